// SPDX-License-Identifier: Apache-2.0

#include "transpeft/common.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>

namespace transpeft {

namespace {
std::atomic<Precision> g_precision{Precision::f32};
}

Precision run_precision() { return g_precision.load(std::memory_order_relaxed); }

void set_run_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision: " + s);
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

void append_f32_le(std::vector<uint8_t>& out, double v) {
    uint32_t bits = std::bit_cast<uint32_t>(static_cast<float>(v));
    out.push_back(static_cast<uint8_t>(bits & 0xff));
    out.push_back(static_cast<uint8_t>((bits >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((bits >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((bits >> 24) & 0xff));
}

double read_f32_le(const uint8_t* p) {
    uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                    (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    return static_cast<double>(std::bit_cast<float>(bits));
}

void append_u64_le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

std::string sha256_hex(const uint8_t* data, size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * digest_len);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(const std::vector<uint8_t>& data) {
    return sha256_hex(data.data(), data.size());
}

}  // namespace transpeft
