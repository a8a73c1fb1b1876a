// SPDX-License-Identifier: Apache-2.0

#include "transpeft/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace transpeft {

namespace {

constexpr double kInitStd = 0.02;
// Finite stand-in for -inf in causal masks; exp(x - max) underflows to 0.
constexpr double kMaskedLogit = -1e30;

Tensor causal_mask_constant(int tokens) {
    std::vector<double> m(static_cast<size_t>(tokens) * tokens, 0.0);
    for (int i = 0; i < tokens; ++i)
        for (int j = i + 1; j < tokens; ++j) m[static_cast<size_t>(i) * tokens + j] = kMaskedLogit;
    return Tensor::from_data({tokens, tokens}, std::move(m));
}

// Applies the base projection plus the LoRA delta when one targets the site.
Tensor project(Tape& tape, const Tensor& x, const Tensor& w, const ForwardCtx& ctx, int layer,
               Site site) {
    if (ctx.peft && ctx.peft->config.kind == PeftKind::lora) {
        if (const PeftEntry* e = ctx.peft->find(layer, site)) {
            return lora_forward(tape, x, w, *e, ctx.peft->config.alpha, ctx.peft->config.rank);
        }
    }
    return matmul(tape, x, w);
}

Tensor maybe_adapter(Tape& tape, const Tensor& h, const ForwardCtx& ctx, int layer, Site site) {
    if (ctx.peft && ctx.peft->config.kind == PeftKind::adapter) {
        if (const PeftEntry* e = ctx.peft->find(layer, site)) {
            return adapter_forward(tape, h, *e, ctx.peft->config.adapter_act);
        }
    }
    return h;
}

struct ActiveStrategy {
    const MaskSample::Layer* masks = nullptr;
    const TransPeftConfig* cfg = nullptr;  // null for forced diagnostic samples

    bool covers_ffn() const {
        return cfg ? cfg->apply_site != ApplySite::attention : true;
    }
    bool covers_attention() const {
        if (cfg) return cfg->apply_site != ApplySite::ffn;
        return masks && (!masks->att_mask.empty() || masks->att_keep == 0);
    }
    bool rescale() const { return cfg && cfg->rescale; }
    double mask_rate() const { return cfg ? cfg->mask_rate : 0.0; }
    double drop_rate() const { return cfg ? cfg->drop_rate : 0.0; }
};

ActiveStrategy resolve_strategy(const ForwardCtx& ctx, int layer) {
    ActiveStrategy s;
    if (ctx.forced_masks) {
        if (layer < static_cast<int>(ctx.forced_masks->layers.size())) {
            s.masks = &ctx.forced_masks->layers[layer];
            if (ctx.strategy) s.cfg = &ctx.strategy->config;
        }
        return s;
    }
    if (ctx.mode == Mode::train && ctx.strategy &&
        layer < static_cast<int>(ctx.strategy->current.layers.size())) {
        s.masks = &ctx.strategy->current.layers[layer];
        s.cfg = &ctx.strategy->config;
    }
    return s;
}

std::vector<double> effective_mask(const std::vector<double>& raw, bool rescale, double rate) {
    if (!rescale || rate <= 0.0) return raw;
    std::vector<double> eff(raw.size());
    const double inv = 1.0 / (1.0 - rate);
    for (size_t i = 0; i < raw.size(); ++i) eff[i] = raw[i] * inv;
    return eff;
}

double effective_keep(int keep, bool rescale, double rate) {
    double z = static_cast<double>(keep);
    if (rescale && rate > 0.0) z /= (1.0 - rate);
    return z;
}

}  // namespace

const char* to_string(FfnStyle s) { return s == FfnStyle::plain ? "plain" : "gated"; }

FfnStyle ffn_style_from_string(const std::string& s) {
    if (s == "plain") return FfnStyle::plain;
    if (s == "gated") return FfnStyle::gated;
    throw ConfigError("unknown ffn style: " + s);
}

void ModelConfig::validate() const {
    if (num_layers <= 0 || d_model <= 0 || d_ff <= 0 || num_heads <= 0 || vocab_size <= 0 ||
        max_seq_len <= 0) {
        throw ConfigError("model config: all extents must be positive");
    }
    if (d_model % num_heads != 0) throw ConfigError("model config: d must be divisible by heads");
    if (d_ff < d_model) throw ConfigError("model config: d_ff must be >= d");
}

std::string ModelConfig::canonical_tag() const {
    std::ostringstream os;
    os << "v1-L" << num_layers << "-d" << d_model << "-ff" << d_ff << "-h" << num_heads << "-V"
       << vocab_size << "-T" << max_seq_len << "-" << to_string(act) << "-"
       << to_string(ffn_style);
    return os.str();
}

TransformerModel TransformerModel::init(ModelConfig cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive(seed, {0x6d6f64656cull}));
    TransformerModel m;
    m.cfg = cfg;
    m.tok_embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, kInitStd);
    m.pos_embed = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, kInitStd);
    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerWeights w;
        w.ln1_gamma = Tensor::full({cfg.d_model}, 1.0);
        w.ln1_beta = Tensor::zeros({cfg.d_model});
        w.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, kInitStd);
        w.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, kInitStd);
        w.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, kInitStd);
        w.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, kInitStd);
        w.ln2_gamma = Tensor::full({cfg.d_model}, 1.0);
        w.ln2_beta = Tensor::zeros({cfg.d_model});
        w.fc1 = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, kInitStd);
        w.fc2 = Tensor::randn({cfg.d_ff, cfg.d_model}, rng, kInitStd);
        if (cfg.ffn_style == FfnStyle::gated) {
            w.gate = Tensor::randn({cfg.d_model, cfg.d_ff}, rng, kInitStd);
        }
        m.layers.push_back(std::move(w));
    }
    m.final_gamma = Tensor::full({cfg.d_model}, 1.0);
    m.final_beta = Tensor::zeros({cfg.d_model});
    m.head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, kInitStd);
    return m;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_embed", tok_embed);
    out.emplace_back("pos_embed", pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        auto& w = layers[l];
        out.emplace_back(p + "ln1_gamma", w.ln1_gamma);
        out.emplace_back(p + "ln1_beta", w.ln1_beta);
        out.emplace_back(p + "wq", w.wq);
        out.emplace_back(p + "wk", w.wk);
        out.emplace_back(p + "wv", w.wv);
        out.emplace_back(p + "wo", w.wo);
        out.emplace_back(p + "ln2_gamma", w.ln2_gamma);
        out.emplace_back(p + "ln2_beta", w.ln2_beta);
        out.emplace_back(p + "fc1", w.fc1);
        out.emplace_back(p + "fc2", w.fc2);
        if (w.gate.defined()) out.emplace_back(p + "gate", w.gate);
    }
    out.emplace_back("final_gamma", final_gamma);
    out.emplace_back("final_beta", final_beta);
    out.emplace_back("head", head);
    return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::vector<Tensor> TransformerModel::attention_parameters() const {
    std::vector<Tensor> out;
    for (auto& w : layers) {
        out.push_back(w.wq);
        out.push_back(w.wk);
        out.push_back(w.wv);
        out.push_back(w.wo);
    }
    return out;
}

void TransformerModel::set_requires_grad(bool v) {
    for (auto& t : parameters()) t.set_requires_grad(v);
}

TransformerModel TransformerModel::clone() const {
    TransformerModel m;
    m.cfg = cfg;
    m.tok_embed = tok_embed.clone();
    m.pos_embed = pos_embed.clone();
    for (auto& w : layers) {
        LayerWeights c;
        c.ln1_gamma = w.ln1_gamma.clone();
        c.ln1_beta = w.ln1_beta.clone();
        c.wq = w.wq.clone();
        c.wk = w.wk.clone();
        c.wv = w.wv.clone();
        c.wo = w.wo.clone();
        c.ln2_gamma = w.ln2_gamma.clone();
        c.ln2_beta = w.ln2_beta.clone();
        c.fc1 = w.fc1.clone();
        c.fc2 = w.fc2.clone();
        if (w.gate.defined()) c.gate = w.gate.clone();
        m.layers.push_back(std::move(c));
    }
    m.final_gamma = final_gamma.clone();
    m.final_beta = final_beta.clone();
    m.head = head.clone();
    return m;
}

std::string TransformerModel::fingerprint() const {
    std::vector<uint8_t> bytes;
    for (auto& [name, t] : named_parameters()) {
        (void)name;
        for (double v : t.values()) append_f32_le(bytes, v);
    }
    return sha256_hex(bytes);
}

Tensor attention_forward(Tape& tape, const TransformerModel& model, const Tensor& x_normed,
                         int layer, const ForwardCtx& ctx) {
    const ModelConfig& cfg = model.cfg;
    const int tokens = x_normed.rows();
    if (tokens > cfg.max_seq_len) throw ShapeError("attention: sequence exceeds maximum length");
    const auto& w = model.layers.at(layer);

    Tensor q = project(tape, x_normed, w.wq, ctx, layer, Site::query);
    Tensor k = matmul(tape, x_normed, w.wk);
    Tensor v = project(tape, x_normed, w.wv, ctx, layer, Site::value);

    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor causal = causal_mask_constant(tokens);

    std::vector<Tensor> heads;
    heads.reserve(cfg.num_heads);
    for (int h = 0; h < cfg.num_heads; ++h) {
        Tensor qh = slice_cols(tape, q, h * hd, (h + 1) * hd);
        Tensor kh = slice_cols(tape, k, h * hd, (h + 1) * hd);
        Tensor vh = slice_cols(tape, v, h * hd, (h + 1) * hd);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt_hd);
        Tensor probs = softmax_rows(tape, add(tape, scores, causal));
        heads.push_back(matmul(tape, probs, vh));
    }
    Tensor merged = cfg.num_heads == 1 ? heads[0] : concat_cols(tape, heads);
    return matmul(tape, merged, w.wo);
}

Tensor ffn_forward(Tape& tape, const TransformerModel& model, const Tensor& x_normed, int layer,
                   const ForwardCtx& ctx, const std::vector<double>* mask) {
    const ModelConfig& cfg = model.cfg;
    const auto& w = model.layers.at(layer);

    Tensor up = project(tape, x_normed, w.fc1, ctx, layer, Site::fc1);
    Tensor inter;
    if (cfg.ffn_style == FfnStyle::gated) {
        Tensor gated = activation(tape, matmul(tape, x_normed, w.gate), cfg.act);
        inter = mul(tape, gated, up);
    } else {
        inter = activation(tape, up, cfg.act);
    }
    if (ctx.hooks && ctx.hooks->on_ffn_intermediate) ctx.hooks->on_ffn_intermediate(layer, inter);

    if (mask) inter = apply_mask(tape, inter, *mask, /*rescale=*/false, /*rate=*/0.0);

    return project(tape, inter, w.fc2, ctx, layer, Site::fc2);
}

Tensor layer_forward(Tape& tape, const TransformerModel& model, const Tensor& x, int layer,
                     const ForwardCtx& ctx) {
    const auto& w = model.layers.at(layer);
    const ActiveStrategy strat = resolve_strategy(ctx, layer);

    Tensor xn = layer_norm(tape, x, w.ln1_gamma, w.ln1_beta);
    Tensor att = attention_forward(tape, model, xn, layer, ctx);
    if (ctx.hooks && ctx.hooks->on_attention_output) ctx.hooks->on_attention_output(layer, att);
    if (strat.masks && strat.covers_attention()) {
        if (!strat.masks->att_mask.empty()) {
            auto eff = effective_mask(strat.masks->att_mask, strat.rescale(), strat.mask_rate());
            att = apply_mask(tape, att, eff, false, 0.0);
        }
        att = maybe_adapter(tape, att, ctx, layer, Site::after_attention);
        att = scale(tape, att,
                    effective_keep(strat.masks->att_keep, strat.rescale(), strat.drop_rate()));
    } else {
        att = maybe_adapter(tape, att, ctx, layer, Site::after_attention);
    }
    Tensor a = add(tape, x, att);

    Tensor an = layer_norm(tape, a, w.ln2_gamma, w.ln2_beta);
    Tensor f;
    if (strat.masks && strat.covers_ffn()) {
        std::vector<double> eff;
        const std::vector<double>* mask_ptr = nullptr;
        if (!strat.masks->ffn_mask.empty()) {
            eff = effective_mask(strat.masks->ffn_mask, strat.rescale(), strat.mask_rate());
            mask_ptr = &eff;
        }
        f = ffn_forward(tape, model, an, layer, ctx, mask_ptr);
        f = maybe_adapter(tape, f, ctx, layer, Site::after_ffn);
        f = scale(tape, f,
                  effective_keep(strat.masks->ffn_keep, strat.rescale(), strat.drop_rate()));
    } else {
        f = ffn_forward(tape, model, an, layer, ctx);
        f = maybe_adapter(tape, f, ctx, layer, Site::after_ffn);
    }
    Tensor y = add(tape, a, f);
    if (ctx.hooks && ctx.hooks->on_ffn_residual) ctx.hooks->on_ffn_residual(layer, a, y);
    return y;
}

Tensor model_forward(Tape& tape, const TransformerModel& model, std::span<const int> tokens,
                     const ForwardCtx& ctx) {
    const ModelConfig& cfg = model.cfg;
    const int t = static_cast<int>(tokens.size());
    if (t == 0) throw ShapeError("model_forward: empty token sequence");
    if (t > cfg.max_seq_len) throw ShapeError("model_forward: sequence exceeds maximum length");
    for (int id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) throw ShapeError("model_forward: token out of range");
    }

    if (ctx.mode == Mode::train && ctx.strategy && !ctx.forced_masks) {
        ctx.strategy->resample(cfg.num_layers, cfg.d_ff, cfg.d_model, t);
    }

    Tensor x = embedding(tape, model.tok_embed, tokens);
    std::vector<int> positions(t);
    std::iota(positions.begin(), positions.end(), 0);
    x = add(tape, x, gather_rows(tape, model.pos_embed, positions));

    for (int l = 0; l < cfg.num_layers; ++l) x = layer_forward(tape, model, x, l, ctx);

    x = layer_norm(tape, x, model.final_gamma, model.final_beta);
    return matmul(tape, x, model.head);
}

}  // namespace transpeft
