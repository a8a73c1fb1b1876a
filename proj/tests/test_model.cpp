// SPDX-License-Identifier: Apache-2.0
//
// Model-level oracles: degenerate attention cases, an independent dense
// arithmetic reimplementation of single-head attention, FFN hand values,
// and the strategy-off / purity contracts.

#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "transpeft/model.hpp"

using namespace transpeft;

namespace {

ModelConfig tiny_config(int layers = 1, int d = 4, int dff = 8, int heads = 1, int vocab = 11) {
    ModelConfig cfg;
    cfg.num_layers = layers;
    cfg.d_model = d;
    cfg.d_ff = dff;
    cfg.num_heads = heads;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 16;
    cfg.act = Nonlinearity::relu;
    return cfg;
}

void fill(Tensor& t, const std::vector<double>& v) {
    REQUIRE(t.numel() == static_cast<int64_t>(v.size()));
    t.values() = v;
}

// Plain-double reimplementation of causal single-head attention, kept
// independent of the tensor library on purpose.
std::vector<double> naive_attention(const std::vector<double>& x, int tokens, int d,
                                    const std::vector<double>& wq, const std::vector<double>& wk,
                                    const std::vector<double>& wv, const std::vector<double>& wo) {
    auto matmul_naive = [](const std::vector<double>& a, const std::vector<double>& b, int m,
                           int k, int n) {
        std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
        for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l)
                for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + l] * b[l * n + j];
        return c;
    };
    auto q = matmul_naive(x, wq, tokens, d, d);
    auto k = matmul_naive(x, wk, tokens, d, d);
    auto v = matmul_naive(x, wv, tokens, d, d);
    std::vector<double> ctx(static_cast<size_t>(tokens) * d, 0.0);
    for (int i = 0; i < tokens; ++i) {
        std::vector<double> scores(i + 1);
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int l = 0; l < d; ++l) s += q[i * d + l] * k[j * d + l];
            scores[j] = s / std::sqrt(static_cast<double>(d));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double sum = 0.0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            sum += s;
        }
        for (int j = 0; j <= i; ++j)
            for (int l = 0; l < d; ++l) ctx[i * d + l] += scores[j] / sum * v[j * d + l];
    }
    return matmul_naive(ctx, wo, tokens, d, d);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("degenerate attention: zero Q/K reduces to value-then-output projection") {
    PrecisionGuard guard(Precision::f64);
    auto model = TransformerModel::init(tiny_config(), 3);
    auto& w = model.layers[0];
    std::fill(w.wq.values().begin(), w.wq.values().end(), 0.0);
    std::fill(w.wk.values().begin(), w.wk.values().end(), 0.0);

    Tape tape;
    Tensor x = Tensor::from_data({1, 4}, {0.5, -1.0, 2.0, 0.25});
    Tensor out = attention_forward(tape, model, x, 0);

    // Single token, so softmax over one score is 1 regardless of Q/K.
    std::vector<double> v(4, 0.0), expect(4, 0.0);
    for (int j = 0; j < 4; ++j)
        for (int l = 0; l < 4; ++l) v[j] += x.values()[l] * w.wv.values()[l * 4 + j];
    for (int j = 0; j < 4; ++j)
        for (int l = 0; l < 4; ++l) expect[j] += v[l] * w.wo.values()[l * 4 + j];
    for (int j = 0; j < 4; ++j) CHECK(out.values()[j] == doctest::Approx(expect[j]).epsilon(1e-12));
}

TEST_CASE("attention matches an independent dense-arithmetic oracle") {
    PrecisionGuard guard(Precision::f64);
    auto model = TransformerModel::init(tiny_config(), 5);
    auto& w = model.layers[0];
    fill(w.wq, {0.1, -0.2, 0.3, 0.0, 0.5, 0.1, -0.4, 0.2, -0.3, 0.2, 0.1, 0.6, 0.0, -0.1, 0.2, 0.4});
    fill(w.wk, {0.2, 0.1, -0.1, 0.3, -0.2, 0.4, 0.0, 0.1, 0.5, -0.3, 0.2, 0.0, 0.1, 0.2, -0.4, 0.3});
    fill(w.wv, {0.3, -0.1, 0.2, 0.1, 0.0, 0.2, -0.3, 0.4, 0.1, 0.5, 0.0, -0.2, -0.4, 0.1, 0.3, 0.2});
    fill(w.wo, {0.1, 0.2, 0.3, -0.1, 0.4, 0.0, -0.2, 0.1, 0.2, -0.3, 0.5, 0.0, 0.1, 0.3, -0.1, 0.2});

    std::vector<double> x{0.8, -0.5, 0.3, 1.2, -0.7, 0.4, 0.9, -0.2};
    Tape tape;
    Tensor out = attention_forward(tape, model, Tensor::from_data({2, 4}, x), 0);

    auto expect = naive_attention(x, 2, 4, w.wq.values(), w.wk.values(), w.wv.values(),
                                  w.wo.values());
    for (int i = 0; i < 8; ++i) CHECK(out.values()[i] == doctest::Approx(expect[i]).epsilon(1e-10));
}

TEST_CASE("ffn mask examples") {
    PrecisionGuard guard(Precision::f64);
    ModelConfig cfg = tiny_config(1, 4, 8);
    auto model = TransformerModel::init(cfg, 1);

    Tensor x = Tensor::from_data({2, 4}, {0.3, -0.8, 1.1, 0.2, -0.4, 0.9, 0.0, -1.3});

    SUBCASE("all-ones mask equals unmasked output exactly") {
        Tape tape;
        Tensor plain = ffn_forward(tape, model, x, 0);
        std::vector<double> ones(8, 1.0);
        Tensor masked = ffn_forward(tape, model, x, 0, {}, &ones);
        CHECK(plain.values() == masked.values());
    }

    SUBCASE("all-zeros mask produces the zero tensor") {
        Tape tape;
        std::vector<double> zeros(8, 0.0);
        Tensor masked = ffn_forward(tape, model, x, 0, {}, &zeros);
        for (double v : masked.values()) CHECK(v == 0.0);
    }

    SUBCASE("wrong mask length is rejected") {
        Tape tape;
        std::vector<double> bad(5, 1.0);
        CHECK_THROWS_AS(ffn_forward(tape, model, x, 0, {}, &bad), ShapeError);
    }
}

TEST_CASE("ffn hand-arithmetic oracle: d=1, d_ff=2, ReLU, m=[1,0]") {
    PrecisionGuard guard(Precision::f64);
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.d_model = 1;
    cfg.d_ff = 2;
    cfg.num_heads = 1;
    cfg.vocab_size = 4;
    cfg.max_seq_len = 4;
    cfg.act = Nonlinearity::relu;
    auto model = TransformerModel::init(cfg, 1);
    fill(model.layers[0].fc1, {1.0, -1.0});
    fill(model.layers[0].fc2, {1.0, 1.0});

    Tape tape;
    Tensor x = Tensor::from_data({1, 1}, {2.0});
    std::vector<double> mask{1.0, 0.0};
    Tensor out = ffn_forward(tape, model, x, 0, {}, &mask);
    // relu([2, -2]) = [2, 0]; mask keeps dim 0; dot with [1, 1] = 2.
    CHECK(out.values()[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("layer_forward: forced z=0 ablates the FFN contribution exactly") {
    PrecisionGuard guard(Precision::f64);
    auto model = TransformerModel::init(tiny_config(2, 8, 16, 2), 7);
    Rng data_rng(4);
    Tensor x = Tensor::randn({3, 8}, data_rng, 1.0);

    MaskSample forced;
    forced.layers.resize(2);
    forced.layers[0].ffn_keep = 0;
    forced.layers[1].ffn_keep = 1;

    Tape tape;
    ForwardCtx ctx;
    ctx.forced_masks = &forced;
    Tensor y = layer_forward(tape, model, x, 0, ctx);

    // Recompute the attention-residual path only.
    Tape tape2;
    auto& w = model.layers[0];
    Tensor xn = layer_norm(tape2, x, w.ln1_gamma, w.ln1_beta);
    Tensor a = add(tape2, x, attention_forward(tape2, model, xn, 0));
    CHECK(y.values() == a.values());
}

TEST_CASE("layer_forward: strategies at zero rates equal the vanilla layer exactly") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(tiny_config(1, 8, 16, 2), 9);
    Rng data_rng(5);
    Tensor x = Tensor::randn({4, 8}, data_rng, 1.0);

    Tape t1;
    Tensor vanilla = layer_forward(t1, model, x, 0);

    TransPeftConfig cfg;  // zero rates
    StrategyRuntime strategy(cfg, 0);
    strategy.resample(1, 16, 8, 4);
    Tape t2;
    ForwardCtx ctx;
    ctx.mode = Mode::train;
    ctx.strategy = &strategy;
    Tensor strat = layer_forward(t2, model, x, 0, ctx);

    CHECK(vanilla.values() == strat.values());
}

TEST_CASE("layer_forward: mean over z resamples matches the half-weight expectation") {
    PrecisionGuard guard(Precision::f64);
    auto model = TransformerModel::init(tiny_config(1, 8, 16, 2), 11);
    Rng data_rng(6);
    Tensor x = Tensor::randn({2, 8}, data_rng, 1.0);

    // Expectation target: A + 0.5 * FFN(norm(A)).
    Tape tape;
    auto& w = model.layers[0];
    Tensor xn = layer_norm(tape, x, w.ln1_gamma, w.ln1_beta);
    Tensor a = add(tape, x, attention_forward(tape, model, xn, 0));
    Tensor an = layer_norm(tape, a, w.ln2_gamma, w.ln2_beta);
    Tensor f = ffn_forward(tape, model, an, 0);
    std::vector<double> expected(a.values().size());
    for (size_t i = 0; i < expected.size(); ++i)
        expected[i] = a.values()[i] + 0.5 * f.values()[i];

    TransPeftConfig cfg;
    cfg.drop_rate = 0.5;
    cfg.strategy_seed = 123;
    StrategyRuntime strategy(cfg, 0);

    const int draws = 100000;
    std::vector<double> mean(expected.size(), 0.0);
    for (int i = 0; i < draws; ++i) {
        strategy.resample(1, 16, 8, 2);
        Tape t;
        ForwardCtx ctx;
        ctx.mode = Mode::train;
        ctx.strategy = &strategy;
        Tensor y = layer_forward(t, model, x, 0, ctx);
        for (size_t j = 0; j < mean.size(); ++j) mean[j] += y.values()[j];
    }
    for (double& m : mean) m /= draws;

    // Aggregate 3-sigma bound: per-element variance is 0.25 * F^2.
    double err_sq = 0.0, se_sq = 0.0;
    for (size_t j = 0; j < mean.size(); ++j) {
        const double e = mean[j] - expected[j];
        err_sq += e * e;
        se_sq += 0.25 * f.values()[j] * f.values()[j] / draws;
    }
    CHECK(err_sq <= se_sq * (1.0 + 3.0 * std::sqrt(2.0)));
}

TEST_CASE("model_forward: evaluation is pure and training with drops is stochastic") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(tiny_config(2, 8, 16, 2, 13), 21);
    std::vector<int> tokens{1, 5, 3, 7};

    Tape t1, t2;
    Tensor a = model_forward(t1, model, tokens);
    Tensor b = model_forward(t2, model, tokens);
    CHECK(a.values() == b.values());

    TransPeftConfig cfg;
    cfg.drop_rate = 0.5;
    cfg.mask_rate = 0.3;
    cfg.strategy_seed = 1;
    StrategyRuntime s1(cfg, 0);
    cfg.strategy_seed = 2;
    StrategyRuntime s2(cfg, 0);
    Tape t3, t4;
    ForwardCtx c1{Mode::train, nullptr, &s1};
    ForwardCtx c2{Mode::train, nullptr, &s2};
    Tensor y1 = model_forward(t3, model, tokens, c1);
    Tensor y2 = model_forward(t4, model, tokens, c2);
    CHECK(y1.values() != y2.values());
}

TEST_CASE("untrained model loss is close to ln(vocab)") {
    PrecisionGuard guard(Precision::f32);
    ModelConfig cfg;  // default 4x64 toy scale
    auto model = TransformerModel::init(cfg, 42);
    Rng rng(3);
    double total = 0.0;
    const int trials = 8;
    for (int i = 0; i < trials; ++i) {
        std::vector<int> tokens(16);
        for (int& t : tokens) t = static_cast<int>(rng.below(cfg.vocab_size));
        Tape tape;
        Tensor logits = model_forward(tape, model, tokens);
        std::vector<int> targets(tokens.begin() + 1, tokens.end());
        std::vector<int> rows(targets.size());
        std::iota(rows.begin(), rows.end(), 0);
        Tensor loss = cross_entropy(tape, gather_rows(tape, logits, rows), targets);
        total += loss.item();
    }
    CHECK(std::fabs(total / trials - std::log(64.0)) < 0.05);
}

TEST_CASE("training-mode forward with zero rates equals evaluation forward exactly") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(tiny_config(3, 8, 16, 2, 13), 33);
    std::vector<int> tokens{2, 9, 4};

    Tape t1;
    Tensor eval_logits = model_forward(t1, model, tokens);

    TransPeftConfig cfg;  // zero rates
    StrategyRuntime strategy(cfg, 0);
    Tape t2;
    ForwardCtx ctx{Mode::train, nullptr, &strategy};
    Tensor train_logits = model_forward(t2, model, tokens, ctx);
    CHECK(eval_logits.values() == train_logits.values());
}

TEST_CASE("evaluation mode consumes no strategy randomness") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(tiny_config(2, 8, 16, 2, 13), 5);
    TransPeftConfig cfg;
    cfg.drop_rate = 0.4;
    cfg.mask_rate = 0.2;
    StrategyRuntime strategy(cfg, 0);
    const uint64_t before = strategy.rng.draws();
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = Mode::eval;
    ctx.strategy = &strategy;  // present but must not be consulted
    std::vector<int> tokens{1, 2, 3};
    model_forward(tape, model, tokens, ctx);
    CHECK(strategy.rng.draws() == before);
}

TEST_CASE("model guards: sequence length and token range") {
    PrecisionGuard guard(Precision::f32);
    auto model = TransformerModel::init(tiny_config(), 1);
    Tape tape;
    std::vector<int> too_long(model.cfg.max_seq_len + 1, 0);
    CHECK_THROWS_AS(model_forward(tape, model, too_long), ShapeError);
    std::vector<int> bad{model.cfg.vocab_size};
    CHECK_THROWS_AS(model_forward(tape, model, bad), ShapeError);
}

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    cfg.num_heads = 3;  // 4 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.d_ff = 2;  // < d
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

}  // TEST_SUITE
