// SPDX-License-Identifier: Apache-2.0

#include "transpeft/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace transpeft {

namespace {

constexpr uint64_t kTaskSalt = 0x7461736b73ull;

std::vector<int> copy_family_tokens(const TaskSpec& spec, const std::vector<int>& payload,
                                    const std::vector<int>& answer) {
    std::vector<int> tokens;
    tokens.reserve(payload.size() + answer.size() + 2);
    tokens.push_back(bos_token(spec));
    tokens.insert(tokens.end(), payload.begin(), payload.end());
    tokens.push_back(separator_token(spec));
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    return tokens;
}

Example make_copy_family_example(const TaskSpec& spec, const std::vector<int>& payload) {
    std::vector<int> answer = payload;
    if (spec.kind == TaskKind::seq_reverse) std::reverse(answer.begin(), answer.end());
    if (spec.kind == TaskKind::seq_sort) std::sort(answer.begin(), answer.end());
    Example e;
    e.tokens = copy_family_tokens(spec, payload, answer);
    e.answer_begin = static_cast<int>(payload.size()) + 2;
    e.answer_end = static_cast<int>(e.tokens.size());
    return e;
}

Example make_modular_example(const TaskSpec& spec, int a, int b) {
    const int m = spec.modulus;
    Example e;
    e.tokens = {bos_token(spec), a, m, b, m + 1, (a + b) % m};  // BOS a + b = c
    e.answer_begin = 5;
    e.answer_end = 6;
    return e;
}

Example make_char_lm_example(const TaskSpec& spec, Rng& rng) {
    // Order-1 chain: advance by one with high probability, otherwise jump.
    const int len = 2 * spec.payload_len + 2;
    Example e;
    e.tokens.resize(len);
    e.tokens[0] = static_cast<int>(rng.below(spec.vocab_size));
    for (int i = 1; i < len; ++i) {
        if (rng.uniform() < 0.75) {
            e.tokens[i] = (e.tokens[i - 1] + 1) % spec.vocab_size;
        } else {
            e.tokens[i] = static_cast<int>(rng.below(spec.vocab_size));
        }
    }
    e.answer_begin = 1;
    e.answer_end = len;
    return e;
}

}  // namespace

const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::char_lm: return "char_lm";
        case TaskKind::modular_add: return "modular_add";
        case TaskKind::seq_copy: return "seq_copy";
        case TaskKind::seq_reverse: return "seq_reverse";
        case TaskKind::seq_sort: return "seq_sort";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "char_lm") return TaskKind::char_lm;
    if (s == "modular_add") return TaskKind::modular_add;
    if (s == "seq_copy") return TaskKind::seq_copy;
    if (s == "seq_reverse") return TaskKind::seq_reverse;
    if (s == "seq_sort") return TaskKind::seq_sort;
    throw ConfigError("unknown task kind: " + s);
}

int bos_token(const TaskSpec& spec) {
    return spec.kind == TaskKind::modular_add ? spec.modulus + 2 : spec.vocab_size - 1;
}

int separator_token(const TaskSpec& spec) {
    return spec.kind == TaskKind::modular_add ? spec.modulus + 1 : spec.vocab_size - 2;
}

int sequence_length(const TaskSpec& spec) {
    return spec.kind == TaskKind::modular_add ? 6 : 2 * spec.payload_len + 2;
}

void TaskSpec::validate() const {
    if (vocab_size <= 3) throw ConfigError("task spec: vocabulary too small");
    if (train_size < 0 || test_size < 0) throw ConfigError("task spec: negative split size");
    switch (kind) {
        case TaskKind::modular_add: {
            if (modulus < 2) throw ConfigError("task spec: modulus must be >= 2");
            if (modulus + 3 > vocab_size) {
                throw ConfigError("task spec: vocabulary overflow (need modulus + 3 symbols)");
            }
            const int64_t pairs = static_cast<int64_t>(modulus) * modulus;
            if (train_size + test_size > pairs) {
                throw ConfigError("task spec: split larger than the pair space");
            }
            break;
        }
        case TaskKind::seq_copy:
        case TaskKind::seq_reverse:
        case TaskKind::seq_sort:
        case TaskKind::char_lm: {
            if (payload_len < 1) throw ConfigError("task spec: payload length must be >= 1");
            const double space = std::pow(static_cast<double>(vocab_size - 2), payload_len);
            if (kind != TaskKind::char_lm && train_size + test_size > space / 2) {
                throw ConfigError("task spec: split too large for the payload space");
            }
            break;
        }
    }
}

std::string TaskSpec::canonical_key() const {
    std::ostringstream os;
    os << to_string(kind) << "|V" << vocab_size << "|m" << modulus << "|L" << payload_len << "|tr"
       << train_size << "|te" << test_size << "|s" << split_seed;
    return os.str();
}

TaskData generate(const TaskSpec& spec, uint64_t seed) {
    spec.validate();
    Rng rng(Rng::derive(seed, {kTaskSalt, spec.split_seed}));
    TaskData data;

    if (spec.kind == TaskKind::modular_add) {
        const int m = spec.modulus;
        std::vector<std::pair<int, int>> pairs;
        pairs.reserve(static_cast<size_t>(m) * m);
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) pairs.emplace_back(a, b);
        rng.shuffle(pairs);
        for (int i = 0; i < spec.train_size; ++i) {
            data.train.push_back(make_modular_example(spec, pairs[i].first, pairs[i].second));
        }
        for (int i = 0; i < spec.test_size; ++i) {
            const auto& p = pairs[spec.train_size + i];
            data.test.push_back(make_modular_example(spec, p.first, p.second));
        }
        return data;
    }

    if (spec.kind == TaskKind::char_lm) {
        for (int i = 0; i < spec.train_size; ++i) data.train.push_back(make_char_lm_example(spec, rng));
        for (int i = 0; i < spec.test_size; ++i) data.test.push_back(make_char_lm_example(spec, rng));
        return data;
    }

    // Copy family: draw unique payloads, then split.
    const int alphabet = spec.vocab_size - 2;
    std::set<std::vector<int>> seen;
    std::vector<std::vector<int>> payloads;
    while (static_cast<int>(payloads.size()) < spec.train_size + spec.test_size) {
        std::vector<int> payload(spec.payload_len);
        for (int& s : payload) s = static_cast<int>(rng.below(alphabet));
        if (seen.insert(payload).second) payloads.push_back(std::move(payload));
    }
    for (int i = 0; i < spec.train_size; ++i) {
        data.train.push_back(make_copy_family_example(spec, payloads[i]));
    }
    for (int i = 0; i < spec.test_size; ++i) {
        data.test.push_back(make_copy_family_example(spec, payloads[spec.train_size + i]));
    }
    return data;
}

std::vector<Example> corpus_mixture(const std::vector<TaskSpec>& specs,
                                    const std::vector<double>& weights, int total,
                                    uint64_t seed) {
    if (specs.empty()) throw ConfigError("corpus mixture: empty spec list");
    if (specs.size() != weights.size()) {
        throw ConfigError("corpus mixture: one weight per spec required");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ConfigError("corpus mixture: negative weight");
        sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw ConfigError("corpus mixture: weights must sum to 1");

    // Canonical order makes the stream independent of caller-side ordering.
    std::vector<size_t> order(specs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return specs[a].canonical_key() < specs[b].canonical_key();
    });

    // Exact counts: floor then distribute the remainder by fractional part.
    std::vector<int> counts(specs.size(), 0);
    std::vector<std::pair<double, size_t>> fractional;
    int assigned = 0;
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const size_t i = order[oi];
        const double exact = weights[i] * total;
        counts[i] = static_cast<int>(std::floor(exact));
        assigned += counts[i];
        fractional.emplace_back(-(exact - counts[i]), oi);
    }
    std::sort(fractional.begin(), fractional.end());
    for (int r = 0; r < total - assigned; ++r) {
        counts[order[fractional[static_cast<size_t>(r) % fractional.size()].second]] += 1;
    }

    // Per-spec pools are each spec's own train split (seeded by its
    // split_seed, like every other consumer), cycled when shorter than
    // needed. Downstream test splits therefore never enter a mixture.
    std::vector<std::vector<Example>> pools(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) {
        if (counts[i] == 0) continue;
        pools[i] = generate(specs[i], specs[i].split_seed).train;
        if (pools[i].empty()) throw ConfigError("corpus mixture: spec produced no train data");
    }

    std::vector<size_t> slots;
    slots.reserve(static_cast<size_t>(total));
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const size_t i = order[oi];
        for (int c = 0; c < counts[i]; ++c) slots.push_back(i);
    }
    Rng shuffle_rng(Rng::derive(seed, {kTaskSalt, 0x6d6978ull}));
    shuffle_rng.shuffle(slots);

    std::vector<Example> stream;
    stream.reserve(slots.size());
    std::vector<size_t> cursor(specs.size(), 0);
    for (size_t i : slots) {
        stream.push_back(pools[i][cursor[i] % pools[i].size()]);
        ++cursor[i];
    }
    return stream;
}

}  // namespace transpeft
