// SPDX-License-Identifier: Apache-2.0

#include "transpeft/peft.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "transpeft/model.hpp"

namespace transpeft {

namespace {

struct SiteDims {
    int in = 0;
    int out = 0;
};

SiteDims site_dims(Site site, const ModelConfig& cfg) {
    switch (site) {
        case Site::query:
        case Site::value:
            return {cfg.d_model, cfg.d_model};
        case Site::fc1:
            return {cfg.d_model, cfg.d_ff};
        case Site::fc2:
            return {cfg.d_ff, cfg.d_model};
        case Site::after_attention:
        case Site::after_ffn:
            return {cfg.d_model, cfg.d_model};
    }
    return {};
}

bool site_valid_for_kind(Site site, PeftKind kind) {
    const bool adapter_site = site == Site::after_attention || site == Site::after_ffn;
    return kind == PeftKind::adapter ? adapter_site : !adapter_site;
}

void append_string(std::vector<uint8_t>& bytes, const std::string& s) {
    append_u64_le(bytes, s.size());
    bytes.insert(bytes.end(), s.begin(), s.end());
}

}  // namespace

const char* to_string(PeftKind k) { return k == PeftKind::lora ? "lora" : "adapter"; }

PeftKind peft_kind_from_string(const std::string& s) {
    if (s == "lora") return PeftKind::lora;
    if (s == "adapter") return PeftKind::adapter;
    throw ConfigError("unknown peft kind: " + s);
}

const char* to_string(Site s) {
    switch (s) {
        case Site::query: return "query";
        case Site::value: return "value";
        case Site::fc1: return "fc1";
        case Site::fc2: return "fc2";
        case Site::after_attention: return "after_attention";
        case Site::after_ffn: return "after_ffn";
    }
    return "?";
}

Site site_from_string(const std::string& s) {
    if (s == "query") return Site::query;
    if (s == "value") return Site::value;
    if (s == "fc1") return Site::fc1;
    if (s == "fc2") return Site::fc2;
    if (s == "after_attention") return Site::after_attention;
    if (s == "after_ffn") return Site::after_ffn;
    throw ConfigError("unknown peft site: " + s);
}

bool is_ffn_site(Site s) {
    return s == Site::fc1 || s == Site::fc2 || s == Site::after_ffn;
}

void PeftConfig::validate(const ModelConfig& model) const {
    if (rank < 1) throw ConfigError("peft config: rank must be >= 1");
    if (rank > model.d_model / 2) {
        throw ConfigError("peft config: rank must be << d (at most d/2)");
    }
    if (targets.empty()) throw ConfigError("peft config: target sites must be non-empty");
    for (Site s : targets) {
        if (!site_valid_for_kind(s, kind)) {
            throw ConfigError(std::string("peft config: site ") + to_string(s) +
                              " is not valid for kind " + to_string(kind));
        }
    }
}

const PeftEntry* PeftState::find(int layer, Site site) const {
    auto it = entries.find({layer, site});
    return it == entries.end() ? nullptr : &it->second;
}

std::vector<Tensor> PeftState::parameters() {
    std::vector<Tensor> out;
    for (auto& [key, e] : entries) {
        out.push_back(e.down);
        out.push_back(e.up);
    }
    return out;
}

std::vector<Tensor> PeftState::parameters_for(bool ffn_sites) {
    std::vector<Tensor> out;
    for (auto& [key, e] : entries) {
        if (is_ffn_site(key.second) == ffn_sites) {
            out.push_back(e.down);
            out.push_back(e.up);
        }
    }
    return out;
}

void PeftState::set_requires_grad(bool v) {
    for (auto& t : parameters()) t.set_requires_grad(v);
}

PeftState PeftState::clone() const {
    PeftState s;
    s.config = config;
    s.source_fingerprint = source_fingerprint;
    for (auto& [key, e] : entries) s.entries[key] = {e.down.clone(), e.up.clone()};
    return s;
}

std::vector<uint8_t> PeftState::canonical_bytes() const {
    std::vector<uint8_t> bytes;
    append_string(bytes, "transpeft-peft-v1");
    append_string(bytes, to_string(config.kind));
    append_u64_le(bytes, static_cast<uint64_t>(config.rank));
    char alpha_buf[64];
    std::snprintf(alpha_buf, sizeof alpha_buf, "%.17g", config.alpha);
    append_string(bytes, alpha_buf);
    append_string(bytes, to_string(config.adapter_act));
    append_u64_le(bytes, config.targets.size());
    for (Site s : config.targets) append_string(bytes, to_string(s));
    append_string(bytes, source_fingerprint);
    append_u64_le(bytes, entries.size());
    for (const auto& [key, e] : entries) {
        append_u64_le(bytes, static_cast<uint64_t>(key.first));
        append_string(bytes, to_string(key.second));
        append_u64_le(bytes, static_cast<uint64_t>(e.down.numel()));
        for (double v : e.down.values()) append_f32_le(bytes, v);
        append_u64_le(bytes, static_cast<uint64_t>(e.up.numel()));
        for (double v : e.up.values()) append_f32_le(bytes, v);
    }
    return bytes;
}

std::string PeftState::bytes_fingerprint() const { return sha256_hex(canonical_bytes()); }

PeftState init_peft(const PeftConfig& config, const ModelConfig& model, uint64_t seed) {
    model.validate();
    config.validate(model);
    Rng rng(Rng::derive(seed, {0x70656674ull}));
    PeftState state;
    state.config = config;
    std::vector<Site> sites = config.targets;
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());
    const double down_std = 1.0 / std::sqrt(static_cast<double>(config.rank));
    for (int layer = 0; layer < model.num_layers; ++layer) {
        for (Site site : sites) {
            SiteDims dims = site_dims(site, model);
            PeftEntry e;
            e.down = Tensor::randn({dims.in, config.rank}, rng, down_std);
            e.up = Tensor::zeros({config.rank, dims.out});
            state.entries[{layer, site}] = std::move(e);
        }
    }
    return state;
}

Tensor lora_forward(Tape& tape, const Tensor& x, const Tensor& w, const PeftEntry& delta,
                    double alpha, int rank) {
    Tensor base = matmul(tape, x, w);
    Tensor low = matmul(tape, matmul(tape, x, delta.down), delta.up);
    return add(tape, base, scale(tape, low, alpha / rank));
}

Tensor adapter_forward(Tape& tape, const Tensor& h, const PeftEntry& module, Nonlinearity f) {
    Tensor bottleneck = activation(tape, matmul(tape, h, module.down), f);
    return add(tape, h, matmul(tape, bottleneck, module.up));
}

PeftBinding::PeftBinding(const TransformerModel& model, PeftState state)
    : model_(&model), state_(std::move(state)) {
    state_.config.validate(model.config());
    for (const auto& [key, e] : state_.entries) {
        if (key.first < 0 || key.first >= model.config().num_layers) {
            throw ConfigError("attach: peft layer index outside model depth");
        }
        SiteDims dims = site_dims(key.second, model.config());
        if (e.down.shape() != std::vector<int>{dims.in, state_.config.rank} ||
            e.up.shape() != std::vector<int>{state_.config.rank, dims.out}) {
            throw ConfigError("attach: peft tensor shapes do not fit this architecture");
        }
    }
}

PeftBinding attach(const TransformerModel& model, PeftState state) {
    return PeftBinding(model, std::move(state));
}

PeftBinding transfer(PeftState state, const TransformerModel& target, TransferRecord* record) {
    if (record) {
        record->source_fingerprint = state.source_fingerprint;
        record->peft_fingerprint = state.bytes_fingerprint();
        record->target_fingerprint = target.fingerprint();
    }
    return attach(target, std::move(state));
}

}  // namespace transpeft
