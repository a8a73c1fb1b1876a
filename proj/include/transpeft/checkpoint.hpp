// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: 8-byte magic, little-endian u64 header length, a
// JSON header (format version, kind, config, named-tensor index, blob
// fingerprint), then a raw little-endian IEEE-754 binary32 blob. Loading
// verifies the blob hash, so a single flipped byte is caught.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "transpeft/model.hpp"
#include "transpeft/peft.hpp"

namespace transpeft {

inline constexpr char kCheckpointMagic[9] = "TPFTCKP1";
inline constexpr int kCheckpointFormatVersion = 1;

// Config <-> JSON helpers (also used by manifests).
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PeftConfig& cfg);
PeftConfig peft_config_from_json(const nlohmann::json& j);

std::vector<uint8_t> model_checkpoint_bytes(const TransformerModel& model);
void save_checkpoint(const TransformerModel& model, const std::string& path);
// expect_tag, when set, must match the stored architecture tag.
TransformerModel load_checkpoint(const std::string& path,
                                 const std::optional<std::string>& expect_tag = std::nullopt);

std::vector<uint8_t> peft_checkpoint_bytes(const PeftState& state);
void save_peft_checkpoint(const PeftState& state, const std::string& path);
PeftState load_peft_checkpoint(const std::string& path);

// Peeks at the header without materializing tensors.
nlohmann::json read_checkpoint_header(const std::string& path);

}  // namespace transpeft
