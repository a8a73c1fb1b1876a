// SPDX-License-Identifier: Apache-2.0
//
// The base model: token/position embeddings plus a stack of pre-norm
// residual blocks, each an attention sub-layer and an FFN sub-layer, with
// seams for PEFT composition and the masking/dropping strategies.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "transpeft/peft.hpp"
#include "transpeft/strategies.hpp"
#include "transpeft/tensor.hpp"

namespace transpeft {

enum class FfnStyle { plain, gated };

const char* to_string(FfnStyle s);
FfnStyle ffn_style_from_string(const std::string& s);

struct ModelConfig {
    int num_layers = 4;
    int d_model = 64;
    int d_ff = 256;
    int num_heads = 4;
    int vocab_size = 64;
    int max_seq_len = 64;
    Nonlinearity act = Nonlinearity::gelu;
    FfnStyle ffn_style = FfnStyle::plain;
    // Models may only exchange PEFT modules when their tags match.
    // Defaults to the canonical tag derived from the fields above.
    std::string arch_tag;

    void validate() const;
    std::string canonical_tag() const;
    std::string tag() const { return arch_tag.empty() ? canonical_tag() : arch_tag; }
    int head_dim() const { return d_model / num_heads; }
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor wq, wk, wv, wo;  // d x d projections
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1;   // d x d_ff
    Tensor fc2;   // d_ff x d
    Tensor gate;  // d x d_ff, gated style only
};

struct TransformerModel {
    ModelConfig cfg;
    Tensor tok_embed;  // vocab x d
    Tensor pos_embed;  // max_seq_len x d
    std::vector<LayerWeights> layers;
    Tensor final_gamma, final_beta;
    Tensor head;  // d x vocab

    static TransformerModel init(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg; }

    // Canonical (name, tensor) enumeration; fixes serialization order.
    // Tensors are shared handles, so mutating them writes through.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::vector<Tensor> attention_parameters() const;

    void set_requires_grad(bool v);
    TransformerModel clone() const;

    // SHA-256 over the canonical little-endian binary32 weight bytes.
    std::string fingerprint() const;
};

enum class Mode { train, eval };

// Observation hooks for the analysis module. Tensors passed to the hooks
// are the live forward values; consumers copy what they need.
struct ForwardHooks {
    std::function<void(int layer, const Tensor& attn_out)> on_attention_output;
    std::function<void(int layer, const Tensor& intermediate)> on_ffn_intermediate;
    std::function<void(int layer, const Tensor& pre, const Tensor& post)> on_ffn_residual;
};

struct ForwardCtx {
    Mode mode = Mode::eval;
    const PeftState* peft = nullptr;
    // Sampled once per training forward; never consulted in eval mode.
    StrategyRuntime* strategy = nullptr;
    // Diagnostic override: applies the given realized masks verbatim.
    const MaskSample* forced_masks = nullptr;
    ForwardHooks* hooks = nullptr;
};

// Multi-head causal self-attention over already-normalized input; the
// residual connection is the caller's.
Tensor attention_forward(Tape& tape, const TransformerModel& model, const Tensor& x_normed,
                         int layer, const ForwardCtx& ctx = {});

// FFN over already-normalized input. `mask`, when supplied, multiplies the
// intermediate activation (its length must be d_ff, or tokens*d_ff).
Tensor ffn_forward(Tape& tape, const TransformerModel& model, const Tensor& x_normed, int layer,
                   const ForwardCtx& ctx = {}, const std::vector<double>* mask = nullptr);

// One pre-norm block: A = X + Attn(norm1(X)); y = A + z * FFN(norm2(A)).
Tensor layer_forward(Tape& tape, const TransformerModel& model, const Tensor& x, int layer,
                     const ForwardCtx& ctx = {});

// Full forward to logits (tokens x vocab). Training mode resamples the
// strategy state; evaluation mode is a pure function of weights and input.
Tensor model_forward(Tape& tape, const TransformerModel& model, std::span<const int> tokens,
                     const ForwardCtx& ctx = {});

}  // namespace transpeft
