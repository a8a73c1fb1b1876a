// SPDX-License-Identifier: Apache-2.0

#include "transpeft/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "transpeft/analysis.hpp"

namespace transpeft {

namespace {

// Answer-region loss for one example: predict tokens[t] from the prefix,
// for t in [answer_begin, answer_end). Falls back to all positions for
// pure-LM examples with an empty answer region.
Tensor example_loss(Tape& tape, const TransformerModel& model, const Example& ex,
                    const ForwardCtx& ctx) {
    Tensor logits = model_forward(tape, model, ex.tokens, ctx);
    int begin = ex.answer_begin, end = ex.answer_end;
    if (begin >= end) {
        begin = 1;
        end = static_cast<int>(ex.tokens.size());
    }
    std::vector<int> rows, targets;
    for (int t = begin; t < end; ++t) {
        rows.push_back(t - 1);
        targets.push_back(ex.tokens[t]);
    }
    return cross_entropy(tape, gather_rows(tape, logits, rows), targets);
}

// Mean loss over a batch; one tape spans the whole batch.
Tensor batch_loss(Tape& tape, const TransformerModel& model,
                  std::span<const Example* const> batch, const ForwardCtx& ctx) {
    Tensor total;
    for (const Example* ex : batch) {
        Tensor l = example_loss(tape, model, *ex, ctx);
        total = total.defined() ? add(tape, total, l) : l;
    }
    return scale(tape, total, 1.0 / static_cast<double>(batch.size()));
}

void check_divergence(double loss, const char* where) {
    if (!std::isfinite(loss)) {
        throw DivergenceError(std::string(where) + ": loss became non-finite");
    }
}

// Non-finite values surfacing anywhere in a training step are divergence.
template <typename F>
auto guard_divergence(const char* where, F&& f) {
    try {
        return f();
    } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string(where) + ": " + e.what());
    }
}

std::vector<const Example*> epoch_order(const std::vector<Example>& data, Rng& rng) {
    std::vector<const Example*> order;
    order.reserve(data.size());
    for (const auto& ex : data) order.push_back(&ex);
    rng.shuffle(order);
    return order;
}

}  // namespace

const char* to_string(OptimAlgo a) { return a == OptimAlgo::adamw ? "adamw" : "sgd"; }

OptimAlgo optim_algo_from_string(const std::string& s) {
    if (s == "adamw") return OptimAlgo::adamw;
    if (s == "sgd") return OptimAlgo::sgd;
    throw ConfigError("unknown optimizer: " + s);
}

void OptimizerConfig::validate() const {
    if (lr <= 0.0 || eps <= 0.0) throw ConfigError("optimizer: rates must be positive");
    if (batch_size < 1) throw ConfigError("optimizer: batch size must be >= 1");
    if (epochs < 0) throw ConfigError("optimizer: epochs must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) {
        throw ConfigError("optimizer: betas must lie in [0, 1)");
    }
}

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<ParamGroup> params)
    : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params_[i].param.numel()), 0.0);
        v_[i].assign(static_cast<size_t>(params_[i].param.numel()), 0.0);
    }
}

void Optimizer::step() {
    ++t_;

    if (cfg_.clip_norm > 0.0) {
        double norm_sq = 0.0;
        for (auto& g : params_) {
            if (!g.param.has_grad()) continue;
            for (double v : g.param.grad_buffer()) norm_sq += v * v;
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg_.clip_norm) {
            const double f = cfg_.clip_norm / norm;
            for (auto& g : params_) {
                if (!g.param.has_grad()) continue;
                for (double& v : g.param.grad_buffer()) v *= f;
            }
        }
    }

    const Precision prec = run_precision();
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& group = params_[i];
        if (!group.param.has_grad()) continue;
        const double lr = cfg_.lr * group.lr_scale;
        auto& values = group.param.values();
        auto& grad = group.param.grad_buffer();
        if (cfg_.algorithm == OptimAlgo::sgd) {
            for (size_t j = 0; j < values.size(); ++j) {
                const double update = grad[j] + cfg_.weight_decay * values[j];
                values[j] = snap(values[j] - lr * update, prec);
            }
        } else {
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            for (size_t j = 0; j < values.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * grad[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                const double update =
                    mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * values[j];
                values[j] = snap(values[j] - lr * update, prec);
            }
        }
        group.param.zero_grad();
    }
}

TransformerModel pretrain(const ModelConfig& cfg, const std::vector<Example>& corpus,
                          const OptimizerConfig& optim, int steps, uint64_t seed,
                          TrainLog* log) {
    cfg.validate();
    if (corpus.empty()) throw ConfigError("pretrain: empty corpus");
    TransformerModel model = TransformerModel::init(cfg, seed);
    model.set_requires_grad(true);

    std::vector<Optimizer::ParamGroup> groups;
    for (auto& t : model.parameters()) groups.push_back({t, 1.0});
    Optimizer opt(optim, std::move(groups));

    double last_loss = 0.0;
    size_t cursor = 0;
    for (int step = 0; step < steps; ++step) {
        std::vector<const Example*> batch;
        for (int b = 0; b < optim.batch_size; ++b) {
            batch.push_back(&corpus[cursor % corpus.size()]);
            ++cursor;
        }
        guard_divergence("pretrain", [&] {
            Tape tape;
            Tensor loss = batch_loss(tape, model, batch, {});
            last_loss = loss.item();
            check_divergence(last_loss, "pretrain");
            tape.backward(loss);
            opt.step();
        });
    }
    model.set_requires_grad(false);
    if (log) {
        log->final_loss = last_loss;
        log->steps = steps;
    }
    return model;
}

const char* to_string(UpdateMode m) { return m == UpdateMode::natural ? "natural" : "controlled"; }

UpdateMode update_mode_from_string(const std::string& s) {
    if (s == "natural") return UpdateMode::natural;
    if (s == "controlled") return UpdateMode::controlled;
    throw ConfigError("unknown update mode: " + s);
}

TransformerModel continual_update(const TransformerModel& m0, UpdateMode mode,
                                  const std::vector<Example>& corpus,
                                  const OptimizerConfig& optim, int steps, double kappa,
                                  uint64_t seed, UpdatePair* pair, TrainLog* log) {
    if (corpus.empty() && steps > 0) throw ConfigError("continual_update: empty corpus");
    TransformerModel m1 = m0.clone();
    m1.set_requires_grad(true);

    std::vector<const Example*> stream;
    stream.reserve(corpus.size());
    for (const auto& ex : corpus) stream.push_back(&ex);
    Rng order_rng(Rng::derive(seed, {0x757064617465ull}));
    order_rng.shuffle(stream);

    const double att_scale = mode == UpdateMode::controlled ? kappa : 1.0;
    std::vector<Optimizer::ParamGroup> groups;
    {
        std::vector<detail::TensorNode*> att_nodes;
        for (auto& t : m1.attention_parameters()) att_nodes.push_back(t.node());
        for (auto& t : m1.parameters()) {
            const bool is_att =
                std::find(att_nodes.begin(), att_nodes.end(), t.node()) != att_nodes.end();
            groups.push_back({t, is_att ? att_scale : 1.0});
        }
    }
    Optimizer opt(optim, std::move(groups));

    double last_loss = 0.0;
    size_t cursor = 0;
    for (int step = 0; step < steps; ++step) {
        std::vector<const Example*> batch;
        for (int b = 0; b < optim.batch_size; ++b) {
            batch.push_back(stream[cursor % stream.size()]);
            ++cursor;
        }
        guard_divergence("continual_update", [&] {
            Tape tape;
            Tensor loss = batch_loss(tape, m1, batch, {});
            last_loss = loss.item();
            check_divergence(last_loss, "continual_update");
            tape.backward(loss);
            opt.step();
        });
    }
    m1.set_requires_grad(false);

    if (pair) {
        auto shift = weight_shift(m0, m1);
        pair->m0_fingerprint = m0.fingerprint();
        pair->m1_fingerprint = m1.fingerprint();
        pair->mode = mode;
        pair->eps_att = shift.eps_att;
        pair->rho = shift.rho;
    }
    if (log) {
        log->final_loss = last_loss;
        log->steps = steps;
    }
    return m1;
}

PeftState finetune_peft(const TransformerModel& model, const TaskData& task,
                        const PeftConfig& peft_cfg, const OptimizerConfig& optim,
                        const std::optional<TransPeftConfig>& strategies, uint64_t seed,
                        TrainLog* log) {
    if (task.train.empty()) throw ConfigError("finetune: empty train split");
    for (auto& t : model.parameters()) {
        if (t.requires_grad()) {
            throw Error("finetune: base model must be frozen (requires-grad off)");
        }
    }
    const std::string base_fp = model.fingerprint();

    PeftBinding binding = attach(model, init_peft(peft_cfg, model.config(), seed));
    binding.mutable_state().set_requires_grad(true);

    std::vector<Optimizer::ParamGroup> groups;
    for (auto& t : binding.mutable_state().parameters()) groups.push_back({t, 1.0});
    Optimizer opt(optim, std::move(groups));

    std::optional<StrategyRuntime> strategy;
    if (strategies) {
        strategies->validate();
        strategy.emplace(*strategies, seed);
    }

    Rng order_rng(Rng::derive(seed, {0x6f72646572ull}));
    double last_loss = 0.0;
    int steps = 0;
    for (int epoch = 0; epoch < optim.epochs; ++epoch) {
        auto order = epoch_order(task.train, order_rng);
        for (size_t at = 0; at < order.size(); at += optim.batch_size) {
            const size_t end = std::min(order.size(), at + optim.batch_size);
            std::span<const Example* const> batch(order.data() + at, end - at);
            guard_divergence("finetune", [&] {
                Tape tape;
                ForwardCtx ctx;
                ctx.mode = Mode::train;
                ctx.peft = &binding.state();
                ctx.strategy = strategy ? &*strategy : nullptr;
                Tensor loss = batch_loss(tape, model, batch, ctx);
                last_loss = loss.item();
                check_divergence(last_loss, "finetune");
                tape.backward(loss);
                for (auto& t : model.parameters()) {
                    if (t.has_grad()) throw Error("finetune: base weight received a gradient");
                }
                opt.step();
            });
            ++steps;
        }
    }

    binding.mutable_state().set_requires_grad(false);
    if (model.fingerprint() != base_fp) {
        throw Error("finetune: base fingerprint changed during fine-tuning");
    }
    if (log) {
        log->final_loss = last_loss;
        log->steps = steps;
    }
    PeftState out = std::move(binding).detach();
    out.source_fingerprint = base_fp;
    return out;
}

EvalMetrics evaluate_task(const TransformerModel& model, const PeftState* peft,
                          const std::vector<Example>& split) {
    EvalMetrics metrics;
    metrics.count = static_cast<int>(split.size());
    if (split.empty()) return metrics;

    ForwardCtx ctx;
    ctx.peft = peft;
    double loss_sum = 0.0;
    int exact = 0;
    for (const Example& ex : split) {
        {
            Tape tape;
            loss_sum += example_loss(tape, model, ex, ctx).item();
        }
        int begin = ex.answer_begin, end = ex.answer_end;
        if (begin >= end) continue;  // pure LM data has no decodable answer
        std::vector<int> prefix(ex.tokens.begin(), ex.tokens.begin() + begin);
        bool match = true;
        for (int t = begin; t < end; ++t) {
            Tape tape;
            Tensor logits = model_forward(tape, model, prefix, ctx);
            const int rows = logits.rows(), vocab = logits.cols();
            const double* last = logits.values().data() + static_cast<size_t>(rows - 1) * vocab;
            int best = 0;
            for (int j = 1; j < vocab; ++j) {
                if (last[j] > last[best]) best = j;
            }
            if (best != ex.tokens[t]) match = false;
            prefix.push_back(best);
        }
        exact += match ? 1 : 0;
    }
    metrics.loss = loss_sum / static_cast<double>(split.size());
    metrics.accuracy = static_cast<double>(exact) / static_cast<double>(split.size());
    return metrics;
}

const char* to_string(Arm a) {
    switch (a) {
        case Arm::finetune_o: return "finetune_o";
        case Arm::finetune_n: return "finetune_n";
        case Arm::direct_transfer: return "direct_transfer";
        case Arm::trans_peft: return "trans_peft";
    }
    return "?";
}

Arm arm_from_string(const std::string& s) {
    if (s == "finetune_o") return Arm::finetune_o;
    if (s == "finetune_n") return Arm::finetune_n;
    if (s == "direct_transfer") return Arm::direct_transfer;
    if (s == "trans_peft") return Arm::trans_peft;
    throw ConfigError("unknown protocol arm: " + s);
}

PairedTTest paired_t_test(const std::vector<double>& first, const std::vector<double>& second) {
    if (first.size() != second.size() || first.size() < 2) {
        throw Error("paired_t_test: need two samples of equal size >= 2");
    }
    PairedTTest r;
    r.n = static_cast<int>(first.size());
    std::vector<double> diff(first.size());
    for (size_t i = 0; i < first.size(); ++i) diff[i] = first[i] - second[i];
    double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / r.n;
    double var = 0.0;
    for (double d : diff) var += (d - mean) * (d - mean);
    var /= (r.n - 1);
    r.mean_diff = mean;
    const double se = std::sqrt(var / r.n);
    if (se < 1e-15) {
        // Degenerate sample: identical diffs.
        r.t_statistic = mean > 0 ? 1e9 : (mean < 0 ? -1e9 : 0.0);
        r.p_one_sided = mean > 0 ? 0.0 : (mean < 0 ? 1.0 : 0.5);
        r.p_two_sided = mean == 0.0 ? 1.0 : 0.0;
        return r;
    }
    r.t_statistic = mean / se;
    boost::math::students_t dist(static_cast<double>(r.n - 1));
    r.p_one_sided = 1.0 - boost::math::cdf(dist, r.t_statistic);
    r.p_two_sided = 2.0 * (1.0 - boost::math::cdf(dist, std::fabs(r.t_statistic)));
    return r;
}

double ProtocolResult::mean_accuracy(Arm arm) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : runs) {
        if (r.arm == arm) {
            sum += r.metrics.accuracy;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

double ProtocolResult::mean_loss(Arm arm) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : runs) {
        if (r.arm == arm) {
            sum += r.metrics.loss;
            ++n;
        }
    }
    return n ? sum / n : 0.0;
}

std::vector<double> ProtocolResult::accuracies(Arm arm) const {
    std::vector<double> out;
    for (const auto& r : runs) {
        if (r.arm == arm) out.push_back(r.metrics.accuracy);
    }
    return out;
}

bool ProtocolResult::has_arm(Arm arm) const {
    return std::any_of(runs.begin(), runs.end(), [&](const auto& r) { return r.arm == arm; });
}

ProtocolResult run_protocol(const TransformerModel& m0, const TransformerModel& m1,
                            const TaskData& task, const ProtocolSettings& settings) {
    if (settings.seeds.empty()) throw ConfigError("protocol: need at least one seed");
    if (m0.config().tag() != m1.config().tag()) {
        throw ConfigError("protocol: architecture tags differ between M0 and M1");
    }
    const std::string fp0 = m0.fingerprint();
    const std::string fp1 = m1.fingerprint();

    struct WorkItem {
        Arm arm;
        uint64_t seed;
    };
    std::vector<WorkItem> items;
    for (Arm arm : settings.arms) {
        for (uint64_t seed : settings.seeds) items.push_back({arm, seed});
    }

    std::vector<ArmResult> results(items.size());
    std::vector<std::exception_ptr> errors(items.size());

    // Vanilla fine-tuning on M0 is shared verbatim between finetune_o and
    // direct_transfer (it is the same training run), trained at most once
    // per seed.
    std::vector<PeftState> vanilla(settings.seeds.size());
    std::vector<std::unique_ptr<std::once_flag>> vanilla_once;
    for (size_t i = 0; i < settings.seeds.size(); ++i) {
        vanilla_once.push_back(std::make_unique<std::once_flag>());
    }

    auto seed_index = [&](uint64_t seed) {
        return std::distance(settings.seeds.begin(),
                             std::find(settings.seeds.begin(), settings.seeds.end(), seed));
    };

    auto vanilla_state = [&](uint64_t seed) -> PeftState {
        const auto idx = seed_index(seed);
        std::call_once(*vanilla_once[idx], [&] {
            vanilla[idx] =
                finetune_peft(m0, task, settings.peft, settings.optim, std::nullopt, seed);
        });
        return vanilla[idx].clone();
    };

    auto run_item = [&](size_t i) {
        const WorkItem item = items[i];
        ArmResult r;
        r.arm = item.arm;
        r.seed = item.seed;
        switch (item.arm) {
            case Arm::finetune_o: {
                PeftState state = vanilla_state(item.seed);
                r.peft_fingerprint = state.bytes_fingerprint();
                r.metrics = evaluate_task(m0, &state, task.test);
                break;
            }
            case Arm::finetune_n: {
                PeftState state = finetune_peft(m1, task, settings.peft, settings.optim,
                                                std::nullopt, item.seed);
                r.peft_fingerprint = state.bytes_fingerprint();
                r.metrics = evaluate_task(m1, &state, task.test);
                break;
            }
            case Arm::direct_transfer: {
                PeftState state = vanilla_state(item.seed);
                const std::string before = state.bytes_fingerprint();
                TransferRecord record;
                PeftBinding binding = transfer(std::move(state), m1, &record);
                if (record.peft_fingerprint != before ||
                    binding.state().bytes_fingerprint() != before) {
                    throw Error("protocol: transfer changed peft bytes");
                }
                r.peft_fingerprint = before;
                r.metrics = evaluate_task(m1, &binding.state(), task.test);
                break;
            }
            case Arm::trans_peft: {
                PeftState state = finetune_peft(m0, task, settings.peft, settings.optim,
                                                settings.strategies, item.seed);
                const std::string before = state.bytes_fingerprint();
                TransferRecord record;
                PeftBinding binding = transfer(std::move(state), m1, &record);
                if (binding.state().bytes_fingerprint() != before) {
                    throw Error("protocol: transfer changed peft bytes");
                }
                r.peft_fingerprint = before;
                r.metrics = evaluate_task(m1, &binding.state(), task.test);
                break;
            }
        }
        results[i] = std::move(r);
    };

    const int jobs = std::max(1, settings.jobs);
    if (jobs == 1) {
        for (size_t i = 0; i < items.size(); ++i) run_item(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> workers;
        const int n_workers = std::min<int>(jobs, static_cast<int>(items.size()));
        for (int w = 0; w < n_workers; ++w) {
            workers.emplace_back([&] {
                while (true) {
                    const size_t i = next.fetch_add(1);
                    if (i >= items.size()) break;
                    try {
                        run_item(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : workers) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    if (m0.fingerprint() != fp0 || m1.fingerprint() != fp1) {
        throw Error("protocol: a base model fingerprint changed");
    }

    ProtocolResult out;
    out.runs = std::move(results);
    std::sort(out.runs.begin(), out.runs.end(), [&](const ArmResult& a, const ArmResult& b) {
        if (a.arm != b.arm) return static_cast<int>(a.arm) < static_cast<int>(b.arm);
        return seed_index(a.seed) < seed_index(b.seed);
    });
    return out;
}

}  // namespace transpeft
