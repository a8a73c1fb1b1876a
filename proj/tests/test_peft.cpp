// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "transpeft/model.hpp"

using namespace transpeft;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 13;
    cfg.max_seq_len = 8;
    return cfg;
}

std::vector<double> eval_logits(const TransformerModel& model, const PeftState* peft,
                                std::span<const int> tokens) {
    Tape tape;
    ForwardCtx ctx;
    ctx.peft = peft;
    return model_forward(tape, model, tokens, ctx).values();
}

}  // namespace

TEST_SUITE("peft") {

TEST_CASE("fresh LoRA changes no logit (zero-init delta)") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 11);
    PeftConfig pc;
    pc.rank = 2;
    auto state = init_peft(pc, model.config(), 42);
    std::vector<int> tokens{1, 4, 7, 2};
    CHECK(eval_logits(model, nullptr, tokens) == eval_logits(model, &state, tokens));
}

TEST_CASE("fresh Adapter is the identity") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 11);
    PeftConfig pc;
    pc.kind = PeftKind::adapter;
    pc.rank = 2;
    pc.targets = {Site::after_attention, Site::after_ffn};
    auto state = init_peft(pc, model.config(), 42);
    std::vector<int> tokens{3, 9, 5};
    CHECK(eval_logits(model, nullptr, tokens) == eval_logits(model, &state, tokens));
}

TEST_CASE("two inits with the same seed are byte-identical") {
    PrecisionGuard guard(Precision::f32);
    PeftConfig pc;
    pc.rank = 4;
    auto a = init_peft(pc, small_config(), 7);
    auto b = init_peft(pc, small_config(), 7);
    CHECK(a.canonical_bytes() == b.canonical_bytes());
    auto c = init_peft(pc, small_config(), 8);
    CHECK(a.canonical_bytes() != c.canonical_bytes());
}

TEST_CASE("lora_forward hand arithmetic") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1.0, 1.0});
    Tensor w = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
    PeftEntry delta;
    delta.down = Tensor::from_data({2, 1}, {1.0, 2.0});
    delta.up = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor out = lora_forward(tape, x, w, delta, /*alpha=*/1.0, /*rank=*/1);
    CHECK(out.values()[0] == doctest::Approx(4.0));
    CHECK(out.values()[1] == doctest::Approx(1.0));

    SUBCASE("zero up-projection leaves XW") {
        Tape t2;
        delta.up.values() = {0.0, 0.0};
        Tensor base = lora_forward(t2, x, w, delta, 1.0, 1);
        CHECK(base.values() == std::vector<double>{1.0, 1.0});
    }

    SUBCASE("pure-delta identity: W = 0, alpha = r, down*up = I") {
        Tape t2;
        Tensor zero_w = Tensor::zeros({2, 2});
        PeftEntry ident;
        ident.down = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
        ident.up = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
        Tensor out2 = lora_forward(t2, x, zero_w, ident, /*alpha=*/2.0, /*rank=*/2);
        CHECK(out2.values() == x.values());
    }
}

TEST_CASE("adapter_forward hand arithmetic") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor h = Tensor::from_data({1, 2}, {1.0, -1.0});
    PeftEntry module;
    module.down = Tensor::from_data({2, 1}, {1.0, -1.0});
    module.up = Tensor::from_data({1, 2}, {2.0, 0.0});
    Tensor out = adapter_forward(tape, h, module, Nonlinearity::relu);
    // h Wdown = [2]; relu -> [2]; [2] Wup = [4, 0]; h + = [5, -1].
    CHECK(out.values()[0] == doctest::Approx(5.0));
    CHECK(out.values()[1] == doctest::Approx(-1.0));

    SUBCASE("zero up-projection is the identity") {
        Tape t2;
        module.up.values() = {0.0, 0.0};
        Tensor out2 = adapter_forward(t2, h, module, Nonlinearity::relu);
        CHECK(out2.values() == h.values());
    }
}

TEST_CASE("rank bound is enforced") {
    PeftConfig pc;
    pc.rank = 5;  // > d/2 for d=8
    CHECK_THROWS_AS(init_peft(pc, small_config(), 1), ConfigError);
    pc.rank = 0;
    CHECK_THROWS_AS(init_peft(pc, small_config(), 1), ConfigError);
    pc.rank = 2;
    pc.targets = {};
    CHECK_THROWS_AS(init_peft(pc, small_config(), 1), ConfigError);
    pc.targets = {Site::after_ffn};  // adapter site on a lora config
    CHECK_THROWS_AS(init_peft(pc, small_config(), 1), ConfigError);
}

TEST_CASE("attach/detach round trip is byte-identical and non-destructive") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 2);
    const std::string base_fp = model.fingerprint();
    PeftConfig pc;
    pc.rank = 2;
    auto state = init_peft(pc, model.config(), 3);
    const auto bytes_before = state.canonical_bytes();

    auto binding = attach(model, std::move(state));
    PeftState back = std::move(binding).detach();
    CHECK(back.canonical_bytes() == bytes_before);
    CHECK(model.fingerprint() == base_fp);
}

TEST_CASE("attach to a mismatched architecture fails") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 2);
    ModelConfig other = small_config();
    other.d_model = 16;
    other.d_ff = 32;
    PeftConfig pc;
    pc.rank = 2;
    auto state = init_peft(pc, other, 3);
    CHECK_THROWS_AS(attach(model, std::move(state)), ConfigError);
}

TEST_CASE("only PEFT parameters receive gradients; a training step moves only the state") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 6);
    model.set_requires_grad(false);
    const std::string m_fp = model.fingerprint();

    PeftConfig pc;
    pc.rank = 2;
    auto binding = attach(model, init_peft(pc, model.config(), 4));
    binding.mutable_state().set_requires_grad(true);

    std::vector<int> tokens{1, 2, 3, 4};
    std::vector<int> targets{2, 3, 4, 5};
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = Mode::train;
    ctx.peft = &binding.state();
    Tensor logits = model_forward(tape, model, tokens, ctx);
    Tensor loss = cross_entropy(tape, logits, targets);
    tape.backward(loss);

    for (auto& t : model.parameters()) CHECK_FALSE(t.has_grad());
    bool any_grad = false;
    for (auto& t : binding.mutable_state().parameters()) any_grad |= t.has_grad();
    CHECK(any_grad);

    // Crude SGD step on the PEFT parameters only.
    for (auto& t : binding.mutable_state().parameters()) {
        if (!t.has_grad()) continue;
        auto g = t.grad();
        for (size_t i = 0; i < g.size(); ++i) t.values()[i] -= 0.1 * g[i];
        t.snap_values();
        t.zero_grad();
    }
    CHECK(model.fingerprint() == m_fp);

    // Transfer the trained state to a second model; its base stays untouched.
    auto m1 = TransformerModel::init(small_config(), 99);
    const std::string m1_fp = m1.fingerprint();
    PeftState trained = std::move(binding).detach();
    const auto trained_bytes = trained.canonical_bytes();
    TransferRecord record;
    auto moved = transfer(std::move(trained), m1, &record);
    CHECK(m1.fingerprint() == m1_fp);
    CHECK(moved.state().canonical_bytes() == trained_bytes);
    CHECK(record.target_fingerprint == m1_fp);
}

TEST_CASE("transfer to the source model evaluates identically") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(small_config(), 8);
    PeftConfig pc;
    pc.rank = 2;
    auto state = init_peft(pc, model.config(), 5);
    // Give the delta some substance.
    for (auto& t : state.parameters()) {
        for (double& v : t.values()) v += 0.05;
        t.snap_values();
    }
    std::vector<int> tokens{1, 6, 11};
    auto before = eval_logits(model, &state, tokens);

    TransferRecord record;
    auto binding = transfer(state.clone(), model, &record);
    auto after = eval_logits(model, &binding.state(), tokens);
    CHECK(before == after);
    CHECK(record.peft_fingerprint == state.bytes_fingerprint());
}

}  // TEST_SUITE
