// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic corpora and downstream tasks. Generation is a
// pure function of (spec, seed); train/test splits are disjoint and every
// label is recomputable by closed-form arithmetic.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transpeft/common.hpp"

namespace transpeft {

enum class TaskKind { char_lm, modular_add, seq_copy, seq_reverse, seq_sort };

const char* to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::modular_add;
    int vocab_size = 64;
    int modulus = 61;     // modular_add: answer = (a + b) mod modulus
    int payload_len = 8;  // sequence length for the copy/reverse/sort payloads and char_lm
    int train_size = 2048;
    int test_size = 512;
    uint64_t split_seed = 7;

    void validate() const;
    // Stable identity used to canonicalize mixture order.
    std::string canonical_key() const;
};

struct Example {
    std::vector<int> tokens;
    // Answer region [begin, end) in token positions; empty for pure LM data.
    int answer_begin = 0;
    int answer_end = 0;
};

struct TaskData {
    std::vector<Example> train;
    std::vector<Example> test;
};

TaskData generate(const TaskSpec& spec, uint64_t seed);

// Interleaved pretraining stream with exact per-spec counts. The result is
// independent of the order in which (spec, weight) pairs are passed.
std::vector<Example> corpus_mixture(const std::vector<TaskSpec>& specs,
                                    const std::vector<double>& weights, int total,
                                    uint64_t seed);

// Marker token ids within a task vocabulary.
int bos_token(const TaskSpec& spec);
int separator_token(const TaskSpec& spec);

// Emitted sequence length for a spec (all kinds are fixed-length).
int sequence_length(const TaskSpec& spec);

}  // namespace transpeft
