// SPDX-License-Identifier: Apache-2.0
//
// Every emitted label must be recomputable by independent closed-form
// arithmetic, and splits must be disjoint and deterministic.

#include <algorithm>
#include <set>

#include "doctest.h"
#include "transpeft/tasks.hpp"

using namespace transpeft;

namespace {

TaskSpec modular_spec(int train = 256, int test = 128) {
    TaskSpec spec;
    spec.kind = TaskKind::modular_add;
    spec.train_size = train;
    spec.test_size = test;
    return spec;
}

std::set<std::vector<int>> token_set(const std::vector<Example>& v) {
    std::set<std::vector<int>> out;
    for (const auto& e : v) out.insert(e.tokens);
    return out;
}

}  // namespace

TEST_SUITE("tasks") {

TEST_CASE("generation is a pure function of spec and seed") {
    auto spec = modular_spec();
    auto a = generate(spec, 11);
    auto b = generate(spec, 11);
    CHECK(token_set(a.train) == token_set(b.train));
    CHECK(a.train[0].tokens == b.train[0].tokens);
    auto c = generate(spec, 12);
    CHECK(token_set(a.train) != token_set(c.train));
}

TEST_CASE("modular labels verify against independent arithmetic, 100% agreement") {
    auto spec = modular_spec(512, 256);
    auto data = generate(spec, 42);
    for (const auto* split : {&data.train, &data.test}) {
        for (const auto& e : *split) {
            REQUIRE(e.tokens.size() == 6);
            const int a = e.tokens[1], b = e.tokens[3], c = e.tokens[5];
            CHECK(c == (a + b) % spec.modulus);
            CHECK(e.tokens[0] == bos_token(spec));
            CHECK(e.tokens[2] == spec.modulus);          // '+'
            CHECK(e.tokens[4] == spec.modulus + 1);      // '='
            CHECK(e.answer_begin == 5);
            CHECK(e.answer_end == 6);
        }
    }
}

TEST_CASE("copy family answers are recomputable") {
    for (auto kind : {TaskKind::seq_copy, TaskKind::seq_reverse, TaskKind::seq_sort}) {
        TaskSpec spec;
        spec.kind = kind;
        spec.payload_len = 6;
        spec.train_size = 64;
        spec.test_size = 32;
        auto data = generate(spec, 5);
        for (const auto& e : data.train) {
            std::vector<int> payload(e.tokens.begin() + 1, e.tokens.begin() + 1 + 6);
            std::vector<int> answer(e.tokens.begin() + e.answer_begin,
                                    e.tokens.begin() + e.answer_end);
            std::vector<int> expect = payload;
            if (kind == TaskKind::seq_reverse) std::reverse(expect.begin(), expect.end());
            if (kind == TaskKind::seq_sort) std::sort(expect.begin(), expect.end());
            CHECK(answer == expect);
        }
    }
}

TEST_CASE("train and test splits are disjoint") {
    for (auto kind : {TaskKind::modular_add, TaskKind::seq_copy, TaskKind::seq_sort}) {
        TaskSpec spec;
        spec.kind = kind;
        spec.payload_len = 6;
        spec.train_size = 200;
        spec.test_size = 100;
        auto data = generate(spec, 3);
        auto train = token_set(data.train);
        auto test = token_set(data.test);
        std::vector<std::vector<int>> overlap;
        std::set_intersection(train.begin(), train.end(), test.begin(), test.end(),
                              std::back_inserter(overlap));
        CHECK(overlap.empty());
    }
}

TEST_CASE("vocabulary overflow is rejected") {
    TaskSpec spec = modular_spec();
    spec.modulus = 62;  // needs 65 symbols in a 64-token vocabulary
    CHECK_THROWS_AS(generate(spec, 1), ConfigError);
    spec = modular_spec(4000, 1000);  // 61^2 = 3721 pairs
    CHECK_THROWS_AS(generate(spec, 1), ConfigError);
}

TEST_CASE("mixture proportions are exact and order-canonicalized") {
    TaskSpec a = modular_spec(128, 16);
    TaskSpec b;
    b.kind = TaskKind::seq_copy;
    b.payload_len = 6;
    b.train_size = 128;
    b.test_size = 16;

    auto stream1 = corpus_mixture({a, b}, {0.5, 0.5}, 10000, 9);
    auto stream2 = corpus_mixture({b, a}, {0.5, 0.5}, 10000, 9);
    REQUIRE(stream1.size() == 10000);
    CHECK(stream1.size() == stream2.size());
    for (size_t i = 0; i < stream1.size(); ++i) {
        REQUIRE(stream1[i].tokens == stream2[i].tokens);
    }

    int modular_count = 0;
    for (const auto& e : stream1) modular_count += e.tokens.size() == 6 ? 1 : 0;
    CHECK(modular_count == 5000);  // exact counts at half/half
}

TEST_CASE("single-spec mixture is a pure stream; empty list is rejected") {
    TaskSpec a = modular_spec(64, 16);
    auto stream = corpus_mixture({a}, {1.0}, 100, 4);
    CHECK(stream.size() == 100);
    for (const auto& e : stream) CHECK(e.tokens.size() == 6);
    CHECK_THROWS_AS(corpus_mixture({}, {}, 10, 1), ConfigError);
    CHECK_THROWS_AS(corpus_mixture({a}, {0.5}, 10, 1), ConfigError);
}

TEST_CASE("char_lm sequences are deterministic and in-vocabulary") {
    TaskSpec spec;
    spec.kind = TaskKind::char_lm;
    spec.payload_len = 8;
    spec.train_size = 32;
    spec.test_size = 8;
    auto data = generate(spec, 6);
    CHECK(data.train.size() == 32);
    for (const auto& e : data.train) {
        CHECK(e.tokens.size() == 18);
        for (int t : e.tokens) {
            CHECK(t >= 0);
            CHECK(t < spec.vocab_size);
        }
    }
}

}  // TEST_SUITE
