// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "transpeft/checkpoint.hpp"

using namespace transpeft;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("transpeft_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.num_heads = 2;
    cfg.vocab_size = 13;
    cfg.max_seq_len = 8;
    return cfg;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip preserves every weight byte and the fingerprint") {
    PrecisionGuard guard(Precision::f32);
    TempDir dir;
    auto model = TransformerModel::init(small_config(), 17);
    const std::string fp = model.fingerprint();

    save_checkpoint(model, dir.file("m.ckpt"));
    auto loaded = load_checkpoint(dir.file("m.ckpt"));
    CHECK(loaded.fingerprint() == fp);
    CHECK(loaded.config() == model.config());

    // Re-saving the loaded model must give identical file bytes.
    save_checkpoint(loaded, dir.file("m2.ckpt"));
    std::ifstream a(dir.file("m.ckpt"), std::ios::binary);
    std::ifstream b(dir.file("m2.ckpt"), std::ios::binary);
    std::vector<char> ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ba == bb);
}

TEST_CASE("corrupting one blob byte is detected as a fingerprint mismatch") {
    PrecisionGuard guard(Precision::f32);
    TempDir dir;
    auto model = TransformerModel::init(small_config(), 3);
    save_checkpoint(model, dir.file("m.ckpt"));

    auto bytes = [&] {
        std::ifstream f(dir.file("m.ckpt"), std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
    }();
    bytes[bytes.size() - 3] ^= 0x40;  // flip a bit inside the blob
    std::ofstream(dir.file("bad.ckpt"), std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("bad.ckpt")),
                         doctest::Contains("fingerprint mismatch"), CheckpointError);
}

TEST_CASE("truncated blob is rejected") {
    PrecisionGuard guard(Precision::f32);
    TempDir dir;
    auto model = TransformerModel::init(small_config(), 3);
    save_checkpoint(model, dir.file("m.ckpt"));
    auto bytes = [&] {
        std::ifstream f(dir.file("m.ckpt"), std::ios::binary);
        return std::vector<char>((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
    }();
    bytes.resize(bytes.size() - 8);
    std::ofstream(dir.file("cut.ckpt"), std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(dir.file("cut.ckpt")), CheckpointError);
}

TEST_CASE("architecture tag expectation is enforced") {
    PrecisionGuard guard(Precision::f32);
    TempDir dir;
    auto model = TransformerModel::init(small_config(), 3);
    save_checkpoint(model, dir.file("m.ckpt"));
    CHECK_NOTHROW(load_checkpoint(dir.file("m.ckpt"), model.config().tag()));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("m.ckpt"), std::string("other-arch")),
                         doctest::Contains("architecture tag mismatch"), CheckpointError);
}

TEST_CASE("missing file raises a missing-artifact error") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/nowhere.ckpt"), MissingArtifactError);
}

TEST_CASE("peft checkpoints round trip independently of any model") {
    PrecisionGuard guard(Precision::f32);
    TempDir dir;
    ModelConfig mc = small_config();
    PeftConfig pc;
    pc.rank = 2;
    pc.alpha = 4.0;
    auto state = init_peft(pc, mc, 9);
    state.source_fingerprint = "abc123";

    save_peft_checkpoint(state, dir.file("p.ckpt"));
    auto loaded = load_peft_checkpoint(dir.file("p.ckpt"));
    CHECK(loaded.config == state.config);
    CHECK(loaded.source_fingerprint == "abc123");
    CHECK(loaded.bytes_fingerprint() == state.bytes_fingerprint());
}

}  // TEST_SUITE
