// SPDX-License-Identifier: Apache-2.0

#include "transpeft/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "transpeft/training.hpp"

namespace transpeft {

namespace {

struct SiteAccumulator {
    std::vector<double> sum, sum_abs, sum_sq;
    int64_t count = 0;

    void ensure(size_t dims) {
        if (sum.empty()) {
            sum.assign(dims, 0.0);
            sum_abs.assign(dims, 0.0);
            sum_sq.assign(dims, 0.0);
        }
    }

    void add_rows(const Tensor& t) {
        const int rows = t.rows(), cols = t.cols();
        ensure(static_cast<size_t>(cols));
        for (int i = 0; i < rows; ++i) {
            const double* row = t.values().data() + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) {
                sum[j] += row[j];
                sum_abs[j] += std::fabs(row[j]);
                sum_sq[j] += row[j] * row[j];
            }
        }
        count += rows;
    }

    ActivationTrace::SiteStats finish() const {
        ActivationTrace::SiteStats s;
        s.mean_abs.resize(sum.size());
        s.variance.resize(sum.size());
        for (size_t j = 0; j < sum.size(); ++j) {
            const double mean = sum[j] / count;
            s.mean_abs[j] = sum_abs[j] / count;
            s.variance[j] = sum_sq[j] / count - mean * mean;
        }
        return s;
    }
};

std::string probe_fingerprint(const std::vector<Example>& probe) {
    std::vector<uint8_t> bytes;
    for (const auto& ex : probe) {
        append_u64_le(bytes, ex.tokens.size());
        for (int t : ex.tokens) append_u64_le(bytes, static_cast<uint64_t>(t));
    }
    return sha256_hex(bytes);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double num = 0.0, da = 0.0, db = 0.0;
    for (size_t i = 0; i < n; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    if (da == 0.0 && db == 0.0) return 1.0;  // two constant profiles agree
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

std::vector<int> top_k_indices(const std::vector<double>& v, int k) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(k);
    return idx;
}

double topk_overlap(const std::vector<double>& a, const std::vector<double>& b) {
    const int k = std::max(1, static_cast<int>(a.size()) / 16);
    auto ia = top_k_indices(a, k);
    auto ib = top_k_indices(b, k);
    std::sort(ia.begin(), ia.end());
    std::sort(ib.begin(), ib.end());
    std::vector<int> common;
    std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(),
                          std::back_inserter(common));
    return static_cast<double>(common.size()) / k;
}

// Collects the per-layer concatenated attention / FFN weight views.
std::vector<const Tensor*> attention_mats(const LayerWeights& w) {
    return {&w.wq, &w.wk, &w.wv, &w.wo};
}

std::vector<const Tensor*> ffn_mats(const LayerWeights& w) {
    std::vector<const Tensor*> out{&w.fc1, &w.fc2};
    if (w.gate.defined()) out.push_back(&w.gate);
    return out;
}

}  // namespace

ActivationTrace record_activations(const TransformerModel& model, const PeftState* peft,
                                   const std::vector<Example>& probe) {
    if (probe.empty()) throw ConfigError("record_activations: empty probe set");
    const int layers = model.config().num_layers;
    std::vector<SiteAccumulator> att_acc(layers), ffn_acc(layers);

    ForwardHooks hooks;
    hooks.on_attention_output = [&](int layer, const Tensor& t) { att_acc[layer].add_rows(t); };
    hooks.on_ffn_intermediate = [&](int layer, const Tensor& t) { ffn_acc[layer].add_rows(t); };

    ForwardCtx ctx;
    ctx.peft = peft;
    ctx.hooks = &hooks;
    for (const auto& ex : probe) {
        Tape tape;
        model_forward(tape, model, ex.tokens, ctx);
    }

    ActivationTrace trace;
    trace.model_fingerprint = model.fingerprint();
    trace.probe_fingerprint = probe_fingerprint(probe);
    for (int l = 0; l < layers; ++l) {
        trace.attention.push_back(att_acc[l].finish());
        trace.ffn.push_back(ffn_acc[l].finish());
    }
    return trace;
}

SimilarityReport compare_distributions(const ActivationTrace& a, const ActivationTrace& b) {
    if (a.attention.size() != b.attention.size() || a.ffn.size() != b.ffn.size()) {
        throw ShapeError("compare_distributions: traces have different layer counts");
    }
    if (a.probe_fingerprint != b.probe_fingerprint) {
        throw ConfigError("compare_distributions: traces use different probe sets");
    }
    SimilarityReport rep;
    for (size_t l = 0; l < a.attention.size(); ++l) {
        if (a.attention[l].mean_abs.size() != b.attention[l].mean_abs.size() ||
            a.ffn[l].mean_abs.size() != b.ffn[l].mean_abs.size()) {
            throw ShapeError("compare_distributions: dimension mismatch");
        }
        SimilarityReport::PerLayer att;
        att.pearson = pearson(a.attention[l].mean_abs, b.attention[l].mean_abs);
        att.topk_overlap = topk_overlap(a.attention[l].mean_abs, b.attention[l].mean_abs);
        rep.attention.push_back(att);
        SimilarityReport::PerLayer ffn;
        ffn.pearson = pearson(a.ffn[l].mean_abs, b.ffn[l].mean_abs);
        ffn.topk_overlap = topk_overlap(a.ffn[l].mean_abs, b.ffn[l].mean_abs);
        rep.ffn.push_back(ffn);
    }
    auto mean_of = [](const std::vector<SimilarityReport::PerLayer>& v, bool use_pearson) {
        double s = 0.0;
        for (const auto& x : v) s += use_pearson ? x.pearson : x.topk_overlap;
        return v.empty() ? 0.0 : s / v.size();
    };
    rep.mean_attention_pearson = mean_of(rep.attention, true);
    rep.mean_ffn_pearson = mean_of(rep.ffn, true);
    rep.mean_attention_overlap = mean_of(rep.attention, false);
    rep.mean_ffn_overlap = mean_of(rep.ffn, false);
    return rep;
}

LayerInfluence layer_influence(const TransformerModel& model, const PeftState* peft,
                               const std::vector<Example>& probe,
                               const MaskSample* forced_masks) {
    if (probe.empty()) throw ConfigError("layer_influence: empty probe set");
    const int layers = model.config().num_layers;
    std::vector<double> sums(layers, 0.0);
    std::vector<int64_t> counts(layers, 0);

    ForwardHooks hooks;
    hooks.on_ffn_residual = [&](int layer, const Tensor& pre, const Tensor& post) {
        const int rows = pre.rows(), cols = pre.cols();
        for (int i = 0; i < rows; ++i) {
            double npre = 0.0, npost = 0.0;
            for (int j = 0; j < cols; ++j) {
                const double a = pre.values()[static_cast<size_t>(i) * cols + j];
                const double b = post.values()[static_cast<size_t>(i) * cols + j];
                npre += a * a;
                npost += b * b;
            }
            sums[layer] += std::sqrt(npost) - std::sqrt(npre);
            counts[layer] += 1;
        }
    };

    ForwardCtx ctx;
    ctx.peft = peft;
    ctx.hooks = &hooks;
    ctx.forced_masks = forced_masks;
    for (const auto& ex : probe) {
        Tape tape;
        model_forward(tape, model, ex.tokens, ctx);
    }

    LayerInfluence inf;
    for (int l = 0; l < layers; ++l) {
        inf.influence.push_back(counts[l] ? sums[l] / counts[l] : 0.0);
    }
    return inf;
}

double sign_agreement(const LayerInfluence& a, const LayerInfluence& b) {
    if (a.influence.size() != b.influence.size()) {
        throw ShapeError("sign_agreement: layer counts differ");
    }
    if (a.influence.empty()) return 1.0;
    int agree = 0;
    for (size_t l = 0; l < a.influence.size(); ++l) {
        const bool sa = a.influence[l] >= 0.0, sb = b.influence[l] >= 0.0;
        agree += (sa == sb) ? 1 : 0;
    }
    return static_cast<double>(agree) / static_cast<double>(a.influence.size());
}

double spectral_norm(const std::vector<double>& m, int rows, int cols, int iters, double tol) {
    if (static_cast<size_t>(rows) * cols != m.size()) {
        throw ShapeError("spectral_norm: bad dimensions");
    }
    // Deterministic, non-degenerate start vector.
    std::vector<double> v(cols);
    for (int j = 0; j < cols; ++j) v[j] = 1.0 + 1e-3 * j;
    double vnorm = 0.0;
    for (double x : v) vnorm += x * x;
    vnorm = std::sqrt(vnorm);
    for (double& x : v) x /= vnorm;

    std::vector<double> u(rows), w(cols);
    double sigma = 0.0;
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < rows; ++i) {
            double s = 0.0;
            const double* row = m.data() + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) s += row[j] * v[j];
            u[i] = s;
        }
        double unorm = 0.0;
        for (double x : u) unorm += x * x;
        unorm = std::sqrt(unorm);
        if (unorm == 0.0) return 0.0;

        for (int j = 0; j < cols; ++j) w[j] = 0.0;
        for (int i = 0; i < rows; ++i) {
            const double* row = m.data() + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) w[j] += row[j] * u[i];
        }
        double wnorm = 0.0;
        for (double x : w) wnorm += x * x;
        wnorm = std::sqrt(wnorm);
        if (wnorm == 0.0) return unorm;
        for (int j = 0; j < cols; ++j) v[j] = w[j] / wnorm;

        const double next = unorm;
        if (it > 0 && std::fabs(next - sigma) <= tol * std::max(1.0, next)) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    // One more multiply for the converged estimate.
    double s2 = 0.0;
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        const double* row = m.data() + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) s += row[j] * v[j];
        s2 += s * s;
    }
    return std::sqrt(s2);
}

double frobenius_norm(const std::vector<double>& m) {
    double s = 0.0;
    for (double x : m) s += x * x;
    return std::sqrt(s);
}

WeightShiftReport weight_shift(const TransformerModel& m0, const TransformerModel& m1) {
    if (m0.config().tag() != m1.config().tag()) {
        throw ConfigError("weight_shift: architecture tags differ");
    }
    WeightShiftReport rep;
    for (size_t l = 0; l < m0.layers.size(); ++l) {
        WeightShiftReport::LayerShift shift;
        auto scan = [&](const std::vector<const Tensor*>& a, const std::vector<const Tensor*>& b,
                        double& spectral, double& frob) {
            double frob_sq = 0.0;
            for (size_t i = 0; i < a.size(); ++i) {
                std::vector<double> diff(a[i]->values().size());
                for (size_t j = 0; j < diff.size(); ++j) {
                    diff[j] = b[i]->values()[j] - a[i]->values()[j];
                }
                // The per-layer weight group acts block-diagonally, so its
                // spectral norm is the max over blocks and its Frobenius
                // norm aggregates them.
                spectral = std::max(
                    spectral, spectral_norm(diff, a[i]->shape()[0], a[i]->shape()[1]));
                const double f = frobenius_norm(diff);
                frob_sq += f * f;
            }
            frob = std::sqrt(frob_sq);
        };
        scan(attention_mats(m0.layers[l]), attention_mats(m1.layers[l]),
             shift.attention_spectral, shift.attention_frobenius);
        scan(ffn_mats(m0.layers[l]), ffn_mats(m1.layers[l]), shift.ffn_spectral,
             shift.ffn_frobenius);
        rep.eps_att = std::max(rep.eps_att, shift.attention_spectral);
        rep.rho = std::max(rep.rho, shift.ffn_spectral);
        rep.layers.push_back(shift);
    }
    return rep;
}

LossDiscrepancy loss_discrepancy(const PeftState& peft, const TransformerModel& m0,
                                 const TransformerModel& m1,
                                 const std::vector<Example>& eval_set) {
    if (m0.config().tag() != m1.config().tag()) {
        throw ConfigError("loss_discrepancy: architecture tags differ");
    }
    LossDiscrepancy d;
    d.loss_m0 = evaluate_task(m0, &peft, eval_set).loss;
    d.loss_m1 = evaluate_task(m1, &peft, eval_set).loss;
    d.discrepancy = std::fabs(d.loss_m1 - d.loss_m0);
    return d;
}

namespace {
double deviation_over(const PeftState& a, const PeftState& b, bool ffn_sites) {
    if (!(a.config == b.config)) throw ConfigError("parameter_deviation: config mismatch");
    double sum = 0.0;
    for (const auto& [key, ea] : a.entries) {
        if (is_ffn_site(key.second) != ffn_sites) continue;
        const PeftEntry* eb = b.find(key.first, key.second);
        if (!eb) throw ConfigError("parameter_deviation: entry sets differ");
        for (size_t i = 0; i < ea.down.values().size(); ++i) {
            const double d = ea.down.values()[i] - eb->down.values()[i];
            sum += d * d;
        }
        for (size_t i = 0; i < ea.up.values().size(); ++i) {
            const double d = ea.up.values()[i] - eb->up.values()[i];
            sum += d * d;
        }
    }
    return std::sqrt(sum);
}
}  // namespace

double parameter_deviation(const PeftState& a, const PeftState& b) {
    return deviation_over(a, b, /*ffn_sites=*/true);
}

double parameter_deviation_attention(const PeftState& a, const PeftState& b) {
    return deviation_over(a, b, /*ffn_sites=*/false);
}

BoundReport bound_report(const PeftState& peft, const PeftState& peft_new_version,
                         const TransformerModel& m0, const TransformerModel& m1,
                         const std::vector<Example>& eval_set, const TransPeftConfig& strategies,
                         int perturbation_draws, uint64_t seed) {
    BoundReport rep;
    rep.discrepancy = loss_discrepancy(peft, m0, m1, eval_set);
    auto shift = weight_shift(m0, m1);
    rep.eps_att = shift.eps_att;
    rep.rho = shift.rho;
    rep.parameter_deviation_ffn = parameter_deviation(peft, peft_new_version);
    rep.parameter_deviation_att = parameter_deviation_attention(peft, peft_new_version);
    std::vector<int> probe_tokens = eval_set.front().tokens;
    rep.perturbation =
        perturbation_stats(m0, &peft, strategies, probe_tokens, perturbation_draws, seed);
    return rep;
}

}  // namespace transpeft
