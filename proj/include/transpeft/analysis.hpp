// SPDX-License-Identifier: Apache-2.0
//
// Observation and bound machinery: activation traces at the attention and
// FFN sites, distribution similarity across model versions, per-layer FFN
// influence, weight-shift norms, and the measurable loss-bound terms.

#pragma once

#include <string>
#include <vector>

#include "transpeft/model.hpp"
#include "transpeft/strategies.hpp"
#include "transpeft/tasks.hpp"

namespace transpeft {

struct ActivationTrace {
    // Per layer, per dimension statistics over a pinned probe set.
    struct SiteStats {
        std::vector<double> mean_abs;
        std::vector<double> variance;
    };
    std::vector<SiteStats> attention;  // attention sub-layer output, d_model dims
    std::vector<SiteStats> ffn;        // FFN intermediate activation, d_ff dims
    std::string model_fingerprint;
    std::string probe_fingerprint;  // hash of the probe token ids
};

ActivationTrace record_activations(const TransformerModel& model, const PeftState* peft,
                                   const std::vector<Example>& probe);

struct SimilarityReport {
    struct PerLayer {
        double pearson = 0.0;       // correlation of the mean-|activation| profiles
        double topk_overlap = 0.0;  // top-(dims/16) active-dimension overlap
    };
    std::vector<PerLayer> attention;
    std::vector<PerLayer> ffn;
    double mean_attention_pearson = 0.0;
    double mean_ffn_pearson = 0.0;
    double mean_attention_overlap = 0.0;
    double mean_ffn_overlap = 0.0;
};

// Symmetric in its arguments; traces must come from architecture-identical
// models over the same probe set.
SimilarityReport compare_distributions(const ActivationTrace& a, const ActivationTrace& b);

struct LayerInfluence {
    // Mean over probe tokens of ||post-FFN hidden|| - ||pre-FFN hidden||.
    std::vector<double> influence;
};

LayerInfluence layer_influence(const TransformerModel& model, const PeftState* peft,
                               const std::vector<Example>& probe,
                               const MaskSample* forced_masks = nullptr);

// Fraction of layers whose influence carries the same sign in both reports.
double sign_agreement(const LayerInfluence& a, const LayerInfluence& b);

struct WeightShiftReport {
    struct LayerShift {
        double attention_spectral = 0.0;
        double attention_frobenius = 0.0;
        double ffn_spectral = 0.0;
        double ffn_frobenius = 0.0;
    };
    std::vector<LayerShift> layers;
    double eps_att = 0.0;  // max over layers of the attention spectral shift
    double rho = 0.0;      // max over layers of the FFN spectral shift
};

WeightShiftReport weight_shift(const TransformerModel& m0, const TransformerModel& m1);

// Largest singular value via power iteration on M^T M.
double spectral_norm(const std::vector<double>& m, int rows, int cols, int iters = 30,
                     double tol = 1e-6);
double frobenius_norm(const std::vector<double>& m);

struct LossDiscrepancy {
    double loss_m0 = 0.0;
    double loss_m1 = 0.0;
    double discrepancy = 0.0;  // |loss_m1 - loss_m0|
};

LossDiscrepancy loss_discrepancy(const PeftState& peft, const TransformerModel& m0,
                                 const TransformerModel& m1,
                                 const std::vector<Example>& eval_set);

// Euclidean distance over the theta_ffn blocks (the bound's deviation term);
// the attention blocks are reported separately for diagnostics.
double parameter_deviation(const PeftState& a, const PeftState& b);
double parameter_deviation_attention(const PeftState& a, const PeftState& b);

struct BoundReport {
    LossDiscrepancy discrepancy;
    double eps_att = 0.0;
    double rho = 0.0;
    double parameter_deviation_ffn = 0.0;
    double parameter_deviation_att = 0.0;
    PerturbationStats perturbation;
    // Theorem symbols we measure nothing for; reported as such.
    std::vector<std::string> unestimated = {"L", "beta", "lambda_max", "C", "C1", "C2"};
};

BoundReport bound_report(const PeftState& peft, const PeftState& peft_new_version,
                         const TransformerModel& m0, const TransformerModel& m1,
                         const std::vector<Example>& eval_set, const TransPeftConfig& strategies,
                         int perturbation_draws, uint64_t seed = 42);

}  // namespace transpeft
