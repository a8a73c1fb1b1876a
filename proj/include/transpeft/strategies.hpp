// SPDX-License-Identifier: Apache-2.0
//
// The two fine-tuning perturbation strategies: per-forward-pass Bernoulli
// masking of FFN intermediate dimensions and Bernoulli dropping of whole
// FFN sub-layer outputs. Sampling draws from a dedicated stream that
// evaluation-mode forwards never touch.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "transpeft/tensor.hpp"

namespace transpeft {

struct TransformerModel;
struct PeftState;

enum class ApplySite { ffn, attention, both };
enum class Granularity { per_forward, per_token };

const char* to_string(ApplySite s);
ApplySite apply_site_from_string(const std::string& s);
const char* to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

struct TransPeftConfig {
    double mask_rate = 0.0;  // p_i: probability an intermediate dimension is masked
    double drop_rate = 0.0;  // p_c: probability an FFN sub-layer output is dropped
    ApplySite apply_site = ApplySite::ffn;
    // Off by default: the strategies as written carry no 1/(1-p) factor.
    // Turning it on makes the induced perturbation mean-zero.
    bool rescale = false;
    Granularity granularity = Granularity::per_forward;
    uint64_t strategy_seed = 42;

    void validate() const;  // rates in [0, 1)
    bool active() const { return mask_rate > 0.0 || drop_rate > 0.0; }
    bool operator==(const TransPeftConfig&) const = default;
};

// One forward pass's realized randomness. Mask vectors hold 0/1 entries,
// flattened row-major when sampled per token.
struct MaskSample {
    struct Layer {
        std::vector<double> ffn_mask;  // d_ff (or tokens x d_ff per-token)
        int ffn_keep = 1;              // z
        std::vector<double> att_mask;  // d_model dims, attention-site runs only
        int att_keep = 1;
    };
    std::vector<Layer> layers;
    int tokens = 0;
    uint64_t draw_count = 0;
};

// Each mask entry ~ Bernoulli(1 - mask_rate), each keep bit ~ Bernoulli(1 - drop_rate),
// all independent. Only the sites selected by apply_site consume draws.
MaskSample sample(const TransPeftConfig& config, int layer_count, int d_ff, int d_model,
                  int tokens, Rng& rng);

// Eq.-level application helpers. `mask` must match the activation width.
Tensor apply_mask(Tape& tape, const Tensor& activation, const std::vector<double>& mask,
                  bool rescale, double rate);
Tensor apply_drop(Tape& tape, const Tensor& sublayer_out, int keep, bool rescale, double rate);

// Owned by one training worker; resampled at the top of every training forward.
struct StrategyRuntime {
    TransPeftConfig config;
    Rng rng;
    MaskSample current;

    StrategyRuntime(TransPeftConfig cfg, uint64_t seed_salt)
        : config(cfg), rng(Rng::derive(cfg.strategy_seed, {seed_salt})) {}

    void resample(int layer_count, int d_ff, int d_model, int tokens) {
        uint64_t before = rng.draws();
        current = sample(config, layer_count, d_ff, d_model, tokens, rng);
        current.draw_count = rng.draws() - before;
    }
};

// Monte-Carlo estimates of the logit-space perturbation induced by the
// strategies on a fixed input, split by strategy.
struct PerturbationStats {
    struct Component {
        double mean_norm = 0.0;     // || E[delta] ||
        double mean_sq_norm = 0.0;  // E[ ||delta||^2 ]
        // 3-sigma Monte-Carlo bound on ||E[delta]||^2 under a zero-mean null.
        double null_bound_sq = 0.0;
    };
    Component masking;   // mask_rate only
    Component dropping;  // drop_rate only
    Component combined;
    int draws = 0;
};

PerturbationStats perturbation_stats(const TransformerModel& model, const PeftState* peft,
                                     const TransPeftConfig& config,
                                     std::span<const int> tokens, int draws,
                                     uint64_t seed = 42);

}  // namespace transpeft
