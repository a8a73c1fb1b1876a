// SPDX-License-Identifier: Apache-2.0

#include "transpeft/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace transpeft {

using nlohmann::json;

namespace {

struct NamedTensorView {
    std::string name;
    Tensor tensor;
};

std::vector<uint8_t> build_container(const json& header_extra,
                                     const std::vector<NamedTensorView>& tensors) {
    json header = header_extra;
    header["format_version"] = kCheckpointFormatVersion;

    std::vector<uint8_t> blob;
    json index = json::array();
    int64_t offset = 0;  // counted in float32 elements
    for (const auto& nt : tensors) {
        json entry;
        entry["name"] = nt.name;
        entry["offset"] = offset;
        entry["shape"] = nt.tensor.shape();
        index.push_back(entry);
        for (double v : nt.tensor.values()) append_f32_le(blob, v);
        offset += nt.tensor.numel();
    }
    header["tensors"] = index;
    header["fingerprint"] = sha256_hex(blob);

    const std::string header_str = header.dump();
    std::vector<uint8_t> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 8);
    append_u64_le(out, header_str.size());
    out.insert(out.end(), header_str.begin(), header_str.end());
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed: " + path);
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot open checkpoint: " + path);
    f.seekg(0, std::ios::end);
    const std::streamoff size = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw CheckpointError("read failed: " + path);
    return bytes;
}

struct ParsedContainer {
    json header;
    std::vector<uint8_t> blob;
};

ParsedContainer parse_container(const std::vector<uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
        throw CheckpointError("not a checkpoint file: " + origin);
    }
    const uint64_t header_len = read_u64_le(bytes.data() + 8);
    if (bytes.size() < 16 + header_len) throw CheckpointError("truncated header: " + origin);
    ParsedContainer out;
    try {
        out.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
    } catch (const json::exception& e) {
        throw CheckpointError("corrupt header in " + origin + ": " + e.what());
    }
    if (out.header.value("format_version", -1) != kCheckpointFormatVersion) {
        throw CheckpointError("unsupported checkpoint format version in " + origin);
    }
    out.blob.assign(bytes.begin() + 16 + header_len, bytes.end());

    // Integrity: the header pins the blob hash and the exact float count.
    int64_t expect_floats = 0;
    for (const auto& entry : out.header.at("tensors")) {
        int64_t n = 1;
        for (int e : entry.at("shape").get<std::vector<int>>()) n *= e;
        expect_floats += n;
    }
    if (out.blob.size() != static_cast<size_t>(expect_floats) * 4) {
        throw CheckpointError("truncated blob: " + origin);
    }
    if (sha256_hex(out.blob) != out.header.at("fingerprint").get<std::string>()) {
        throw CheckpointError("fingerprint mismatch (corrupt blob): " + origin);
    }
    return out;
}

Tensor read_tensor(const ParsedContainer& c, const std::string& name) {
    for (const auto& entry : c.header.at("tensors")) {
        if (entry.at("name").get<std::string>() != name) continue;
        auto shape = entry.at("shape").get<std::vector<int>>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        int64_t n = 1;
        for (int e : shape) n *= e;
        std::vector<double> values(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            values[static_cast<size_t>(i)] =
                read_f32_le(c.blob.data() + static_cast<size_t>(offset + i) * 4);
        }
        return Tensor::from_data(std::move(shape), std::move(values));
    }
    throw CheckpointError("tensor missing from checkpoint: " + name);
}

}  // namespace

json to_json(const ModelConfig& cfg) {
    json j;
    j["num_layers"] = cfg.num_layers;
    j["d_model"] = cfg.d_model;
    j["d_ff"] = cfg.d_ff;
    j["num_heads"] = cfg.num_heads;
    j["vocab_size"] = cfg.vocab_size;
    j["max_seq_len"] = cfg.max_seq_len;
    j["act"] = to_string(cfg.act);
    j["ffn_style"] = to_string(cfg.ffn_style);
    j["arch_tag"] = cfg.tag();
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.num_layers = j.at("num_layers").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.num_heads = j.at("num_heads").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.act = nonlinearity_from_string(j.at("act").get<std::string>());
    cfg.ffn_style = ffn_style_from_string(j.at("ffn_style").get<std::string>());
    // A tag equal to the canonical derivation stays implicit, so configs
    // round-trip to equality.
    const std::string tag = j.at("arch_tag").get<std::string>();
    if (tag != cfg.canonical_tag()) cfg.arch_tag = tag;
    cfg.validate();
    return cfg;
}

json to_json(const PeftConfig& cfg) {
    json j;
    j["kind"] = to_string(cfg.kind);
    j["rank"] = cfg.rank;
    j["alpha"] = cfg.alpha;
    json targets = json::array();
    for (Site s : cfg.targets) targets.push_back(to_string(s));
    j["targets"] = targets;
    j["adapter_act"] = to_string(cfg.adapter_act);
    return j;
}

PeftConfig peft_config_from_json(const json& j) {
    PeftConfig cfg;
    cfg.kind = peft_kind_from_string(j.at("kind").get<std::string>());
    cfg.rank = j.at("rank").get<int>();
    cfg.alpha = j.at("alpha").get<double>();
    cfg.targets.clear();
    for (const auto& s : j.at("targets")) cfg.targets.push_back(site_from_string(s));
    cfg.adapter_act = nonlinearity_from_string(j.at("adapter_act").get<std::string>());
    return cfg;
}

std::vector<uint8_t> model_checkpoint_bytes(const TransformerModel& model) {
    json header;
    header["kind"] = "model";
    header["arch_tag"] = model.config().tag();
    header["config"] = to_json(model.config());
    std::vector<NamedTensorView> tensors;
    for (auto& [name, t] : model.named_parameters()) tensors.push_back({name, t});
    return build_container(header, tensors);
}

void save_checkpoint(const TransformerModel& model, const std::string& path) {
    write_file(path, model_checkpoint_bytes(model));
}

TransformerModel load_checkpoint(const std::string& path,
                                 const std::optional<std::string>& expect_tag) {
    ParsedContainer c = parse_container(read_file(path), path);
    if (c.header.value("kind", "") != "model") {
        throw CheckpointError("not a model checkpoint: " + path);
    }
    const std::string tag = c.header.at("arch_tag").get<std::string>();
    if (expect_tag && *expect_tag != tag) {
        throw CheckpointError("architecture tag mismatch: checkpoint has '" + tag +
                              "', expected '" + *expect_tag + "'");
    }
    ModelConfig cfg = model_config_from_json(c.header.at("config"));

    TransformerModel m = TransformerModel::init(cfg, /*seed=*/0);
    for (auto& [name, t] : m.named_parameters()) {
        Tensor loaded = read_tensor(c, name);
        if (loaded.shape() != t.shape()) {
            throw CheckpointError("tensor shape mismatch for " + name + " in " + path);
        }
        t.values() = loaded.values();
    }
    return m;
}

std::vector<uint8_t> peft_checkpoint_bytes(const PeftState& state) {
    json header;
    header["kind"] = "peft";
    header["config"] = to_json(state.config);
    header["source_fingerprint"] = state.source_fingerprint;
    std::vector<NamedTensorView> tensors;
    for (const auto& [key, e] : state.entries) {
        const std::string base =
            "L" + std::to_string(key.first) + "." + to_string(key.second);
        tensors.push_back({base + ".down", e.down});
        tensors.push_back({base + ".up", e.up});
    }
    return build_container(header, tensors);
}

void save_peft_checkpoint(const PeftState& state, const std::string& path) {
    write_file(path, peft_checkpoint_bytes(state));
}

PeftState load_peft_checkpoint(const std::string& path) {
    ParsedContainer c = parse_container(read_file(path), path);
    if (c.header.value("kind", "") != "peft") {
        throw CheckpointError("not a peft checkpoint: " + path);
    }
    PeftState state;
    state.config = peft_config_from_json(c.header.at("config"));
    state.source_fingerprint = c.header.at("source_fingerprint").get<std::string>();
    for (const auto& entry : c.header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto dot = name.rfind('.');
        const std::string base = name.substr(0, dot);
        const std::string part = name.substr(dot + 1);
        if (part != "down") continue;
        const auto site_dot = base.find('.');
        const int layer = std::stoi(base.substr(1, site_dot - 1));
        const Site site = site_from_string(base.substr(site_dot + 1));
        PeftEntry e;
        e.down = read_tensor(c, base + ".down");
        e.up = read_tensor(c, base + ".up");
        state.entries[{layer, site}] = std::move(e);
    }
    return state;
}

json read_checkpoint_header(const std::string& path) {
    return parse_container(read_file(path), path).header;
}

}  // namespace transpeft
