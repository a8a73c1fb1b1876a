// SPDX-License-Identifier: Apache-2.0
//
// LoRA and bottleneck-adapter modules: initialization, forward composition,
// attachment to a base model, and cross-model transfer. A PeftState is a
// plain value; attaching never mutates the base model, and the serialized
// bytes of a state do not depend on which model it is bound to.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "transpeft/tensor.hpp"

namespace transpeft {

struct ModelConfig;
struct TransformerModel;

enum class PeftKind { lora, adapter };

// LoRA targets the listed projections; adapters hang off sub-layer outputs.
enum class Site { query, value, fc1, fc2, after_attention, after_ffn };

const char* to_string(PeftKind k);
PeftKind peft_kind_from_string(const std::string& s);
const char* to_string(Site s);
Site site_from_string(const std::string& s);

// Sites whose parameters count as theta_ffn (the rest are theta_att).
bool is_ffn_site(Site s);

struct PeftConfig {
    PeftKind kind = PeftKind::lora;
    int rank = 8;
    double alpha = 16.0;  // LoRA scaling; the delta enters as (alpha/rank)
    std::vector<Site> targets = {Site::query, Site::value, Site::fc1, Site::fc2};
    Nonlinearity adapter_act = Nonlinearity::relu;

    void validate(const ModelConfig& model) const;
    bool operator==(const PeftConfig&) const = default;
};

struct PeftEntry {
    Tensor down;  // in x r
    Tensor up;    // r x out
};

struct PeftState {
    PeftConfig config;
    // Keyed by (layer, site); iteration order is the canonical serialization order.
    std::map<std::pair<int, Site>, PeftEntry> entries;
    // Recorded by fine-tuning as provenance; empty for a fresh state.
    std::string source_fingerprint;

    const PeftEntry* find(int layer, Site site) const;
    std::vector<Tensor> parameters();
    std::vector<Tensor> parameters_for(bool ffn_sites);
    void set_requires_grad(bool v);
    PeftState clone() const;

    // Canonical bytes (config header + f32 tensor data); used for the
    // byte-identity checks around attach/detach/transfer.
    std::vector<uint8_t> canonical_bytes() const;
    std::string bytes_fingerprint() const;
};

// Fresh state: down ~ N(0, 1/rank), up = 0, so the initial delta is exactly zero.
PeftState init_peft(const PeftConfig& config, const ModelConfig& model, uint64_t seed);

// Eq.-style forward helpers, usable standalone.
Tensor lora_forward(Tape& tape, const Tensor& x, const Tensor& w, const PeftEntry& delta,
                    double alpha, int rank);
Tensor adapter_forward(Tape& tape, const Tensor& h, const PeftEntry& module, Nonlinearity f);

// A binding is a view pairing an immutable base model with a PEFT state.
// Construction validates architecture compatibility; detach returns the
// state unchanged (plus whatever training did to its values).
class PeftBinding {
public:
    PeftBinding(const TransformerModel& model, PeftState state);

    const TransformerModel& model() const { return *model_; }
    const PeftState& state() const { return state_; }
    PeftState& mutable_state() { return state_; }
    PeftState detach() && { return std::move(state_); }

private:
    const TransformerModel* model_;
    PeftState state_;
};

PeftBinding attach(const TransformerModel& model, PeftState state);

struct TransferRecord {
    std::string source_fingerprint;
    std::string target_fingerprint;
    std::string peft_fingerprint;
};

// Re-binds a state to another architecture-compatible model. The state's
// bytes are untouched; the record carries the fingerprints for the manifest.
PeftBinding transfer(PeftState state, const TransformerModel& target, TransferRecord* record);

}  // namespace transpeft
