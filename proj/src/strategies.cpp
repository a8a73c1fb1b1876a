// SPDX-License-Identifier: Apache-2.0

#include "transpeft/strategies.hpp"

#include <cmath>

#include "transpeft/model.hpp"

namespace transpeft {

const char* to_string(ApplySite s) {
    switch (s) {
        case ApplySite::ffn: return "ffn";
        case ApplySite::attention: return "attention";
        case ApplySite::both: return "both";
    }
    return "?";
}

ApplySite apply_site_from_string(const std::string& s) {
    if (s == "ffn") return ApplySite::ffn;
    if (s == "attention") return ApplySite::attention;
    if (s == "both") return ApplySite::both;
    throw ConfigError("unknown apply_site: " + s);
}

const char* to_string(Granularity g) {
    return g == Granularity::per_forward ? "per_forward" : "per_token";
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "per_forward") return Granularity::per_forward;
    if (s == "per_token") return Granularity::per_token;
    throw ConfigError("unknown granularity: " + s);
}

void TransPeftConfig::validate() const {
    if (!(mask_rate >= 0.0 && mask_rate < 1.0)) {
        throw ConfigError("transpeft config: p_i must lie in [0, 1)");
    }
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ConfigError("transpeft config: p_c must lie in [0, 1)");
    }
}

MaskSample sample(const TransPeftConfig& config, int layer_count, int d_ff, int d_model,
                  int tokens, Rng& rng) {
    config.validate();
    MaskSample s;
    s.tokens = tokens;
    s.layers.resize(layer_count);
    const bool covers_ffn = config.apply_site != ApplySite::attention;
    const bool covers_att = config.apply_site != ApplySite::ffn;
    const int copies = config.granularity == Granularity::per_token ? tokens : 1;
    for (auto& layer : s.layers) {
        if (covers_ffn) {
            layer.ffn_mask.resize(static_cast<size_t>(copies) * d_ff);
            for (double& m : layer.ffn_mask) m = rng.keep(config.mask_rate) ? 1.0 : 0.0;
            layer.ffn_keep = rng.keep(config.drop_rate) ? 1 : 0;
        }
        if (covers_att) {
            layer.att_mask.resize(static_cast<size_t>(copies) * d_model);
            for (double& m : layer.att_mask) m = rng.keep(config.mask_rate) ? 1.0 : 0.0;
            layer.att_keep = rng.keep(config.drop_rate) ? 1 : 0;
        }
    }
    return s;
}

Tensor apply_mask(Tape& tape, const Tensor& activation, const std::vector<double>& mask,
                  bool rescale, double rate) {
    const int rows = activation.rows();
    const int width = activation.cols();
    const size_t need = static_cast<size_t>(rows) * width;
    std::vector<double> tiled;
    if (mask.size() == static_cast<size_t>(width)) {
        tiled.resize(need);
        for (int i = 0; i < rows; ++i) {
            std::copy(mask.begin(), mask.end(), tiled.begin() + static_cast<size_t>(i) * width);
        }
    } else if (mask.size() == need) {
        tiled = mask;
    } else {
        throw ShapeError("apply_mask: mask length does not match the activation width");
    }
    if (rescale && rate > 0.0) {
        const double inv = 1.0 / (1.0 - rate);
        for (double& v : tiled) v *= inv;
    }
    Tensor mask_tensor = Tensor::from_data({rows, width}, std::move(tiled));
    return mul(tape, activation, mask_tensor);
}

Tensor apply_drop(Tape& tape, const Tensor& sublayer_out, int keep, bool rescale, double rate) {
    double z = static_cast<double>(keep);
    if (rescale && rate > 0.0) z /= (1.0 - rate);
    return scale(tape, sublayer_out, z);
}

namespace {

struct RunningDelta {
    std::vector<double> mean;
    double sq_sum = 0.0;
    int count = 0;

    void add(const std::vector<double>& perturbed, const std::vector<double>& base) {
        if (mean.empty()) mean.assign(base.size(), 0.0);
        double sq = 0.0;
        for (size_t i = 0; i < base.size(); ++i) {
            const double d = perturbed[i] - base[i];
            mean[i] += d;
            sq += d * d;
        }
        sq_sum += sq;
        ++count;
    }

    PerturbationStats::Component finish() const {
        PerturbationStats::Component c;
        if (count == 0) return c;
        double mean_norm_sq = 0.0;
        for (double m : mean) {
            const double avg = m / count;
            mean_norm_sq += avg * avg;
        }
        c.mean_norm = std::sqrt(mean_norm_sq);
        c.mean_sq_norm = sq_sum / count;
        // Under a zero-mean delta, E||mean||^2 = tr(Cov)/n and its standard
        // deviation is at most sqrt(2) tr(Cov)/n.
        const double trace = std::max(0.0, c.mean_sq_norm - mean_norm_sq);
        c.null_bound_sq = trace / count * (1.0 + 3.0 * std::sqrt(2.0));
        return c;
    }
};

PerturbationStats::Component run_component(const TransformerModel& model, const PeftState* peft,
                                           TransPeftConfig cfg, std::span<const int> tokens,
                                           int draws, uint64_t seed, uint64_t salt,
                                           const std::vector<double>& base) {
    cfg.strategy_seed = Rng::derive(seed, {salt});
    StrategyRuntime strategy(cfg, 0);
    RunningDelta acc;
    for (int i = 0; i < draws; ++i) {
        Tape tape;
        ForwardCtx ctx;
        ctx.mode = Mode::train;
        ctx.peft = peft;
        ctx.strategy = &strategy;
        Tensor logits = model_forward(tape, model, tokens, ctx);
        acc.add(logits.values(), base);
    }
    return acc.finish();
}

}  // namespace

PerturbationStats perturbation_stats(const TransformerModel& model, const PeftState* peft,
                                     const TransPeftConfig& config, std::span<const int> tokens,
                                     int draws, uint64_t seed) {
    config.validate();
    if (draws < 1000) throw Error("perturbation_stats: need at least 1000 draws");

    std::vector<double> base;
    {
        Tape tape;
        ForwardCtx ctx;
        ctx.peft = peft;
        base = model_forward(tape, model, tokens, ctx).values();
    }

    PerturbationStats stats;
    stats.draws = draws;

    TransPeftConfig masking = config;
    masking.drop_rate = 0.0;
    stats.masking = run_component(model, peft, masking, tokens, draws, seed, 1, base);

    TransPeftConfig dropping = config;
    dropping.mask_rate = 0.0;
    stats.dropping = run_component(model, peft, dropping, tokens, draws, seed, 2, base);

    stats.combined = run_component(model, peft, config, tokens, draws, seed, 3, base);
    return stats;
}

}  // namespace transpeft
