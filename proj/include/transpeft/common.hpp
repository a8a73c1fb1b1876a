// SPDX-License-Identifier: Apache-2.0
//
// Shared primitives: error types, run precision, deterministic RNG,
// byte encoding and content hashing.

#pragma once

#include <atomic>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace transpeft {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NonFiniteError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

struct MissingArtifactError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Run precision
//
// All arithmetic is carried out in double. With Precision::f32 every op
// output (and every weight update) is snapped to the nearest IEEE-754
// binary32 value, so runs are reproducible at either precision and f32
// weights serialize losslessly. Checkpoint blobs are always binary32.
// ---------------------------------------------------------------------------

enum class Precision { f32, f64 };

Precision run_precision();
void set_run_precision(Precision p);

const char* to_string(Precision p);
Precision precision_from_string(const std::string& s);

inline double snap(double v, Precision p) {
    return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

// Scoped override, used by tests and gradient checks.
struct PrecisionGuard {
    explicit PrecisionGuard(Precision p) : saved_(run_precision()) { set_run_precision(p); }
    ~PrecisionGuard() { set_run_precision(saved_); }
    PrecisionGuard(const PrecisionGuard&) = delete;
    PrecisionGuard& operator=(const PrecisionGuard&) = delete;

private:
    Precision saved_;
};

// ---------------------------------------------------------------------------
// RNG
//
// Wraps mt19937_64 with explicitly coded distributions so that streams are
// stable across standard libraries. Tracks the number of engine draws;
// evaluation paths assert the counter does not move.
// ---------------------------------------------------------------------------

uint64_t splitmix64(uint64_t x);

class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Derives an independent stream id from a base seed and salts.
    static uint64_t derive(uint64_t seed, std::initializer_list<uint64_t> salts) {
        uint64_t h = splitmix64(seed ^ 0x9e3779b97f4a7c15ull);
        for (uint64_t s : salts) h = splitmix64(h ^ splitmix64(s));
        return h;
    }

    double uniform() {  // [0, 1)
        return static_cast<double>(next() >> 11) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; always consumes exactly two draws.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // True with probability 1 - drop_prob.
    bool keep(double drop_prob) { return uniform() >= drop_prob; }

    uint64_t below(uint64_t n) { return next() % n; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    uint64_t draws() const { return draws_; }

private:
    uint64_t next() {
        ++draws_;
        return engine_();
    }

    std::mt19937_64 engine_;
    uint64_t draws_ = 0;
};

// ---------------------------------------------------------------------------
// Bytes and hashing
// ---------------------------------------------------------------------------

// Appends v as little-endian IEEE-754 binary32.
void append_f32_le(std::vector<uint8_t>& out, double v);
double read_f32_le(const uint8_t* p);

void append_u64_le(std::vector<uint8_t>& out, uint64_t v);
uint64_t read_u64_le(const uint8_t* p);

// Hex-encoded SHA-256.
std::string sha256_hex(const uint8_t* data, size_t len);
std::string sha256_hex(const std::vector<uint8_t>& data);

}  // namespace transpeft
