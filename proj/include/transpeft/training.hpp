// SPDX-License-Identifier: Apache-2.0
//
// Optimization loops: pretraining, continual updating (the base-model
// update simulator), PEFT fine-tuning with optional masking/dropping
// strategies, task evaluation, and the four-arm transfer protocol.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "transpeft/model.hpp"
#include "transpeft/tasks.hpp"

namespace transpeft {

enum class OptimAlgo { adamw, sgd };

const char* to_string(OptimAlgo a);
OptimAlgo optim_algo_from_string(const std::string& s);

struct OptimizerConfig {
    OptimAlgo algorithm = OptimAlgo::adamw;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int batch_size = 16;
    int epochs = 3;
    double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables

    void validate() const;
    bool operator==(const OptimizerConfig&) const = default;
};

class Optimizer {
public:
    struct ParamGroup {
        Tensor param;
        double lr_scale = 1.0;
    };

    Optimizer(OptimizerConfig cfg, std::vector<ParamGroup> params);

    // Clips, applies one update, clears gradients.
    void step();

private:
    OptimizerConfig cfg_;
    std::vector<ParamGroup> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t t_ = 0;
};

// --- training loops --------------------------------------------------------

struct TrainLog {
    double final_loss = 0.0;
    int steps = 0;
};

// Causal-LM pretraining over a fixed stream, consumed cyclically in batches.
// Throws DivergenceError when the loss goes non-finite.
TransformerModel pretrain(const ModelConfig& cfg, const std::vector<Example>& corpus,
                          const OptimizerConfig& optim, int steps, uint64_t seed,
                          TrainLog* log = nullptr);

enum class UpdateMode { natural, controlled };

const char* to_string(UpdateMode m);
UpdateMode update_mode_from_string(const std::string& s);

struct UpdatePair {
    std::string m0_fingerprint;
    std::string m1_fingerprint;
    UpdateMode mode = UpdateMode::natural;
    std::string corpus_descriptor;
    double eps_att = 0.0;  // max-over-layers attention spectral shift
    double rho = 0.0;      // max-over-layers FFN spectral shift
};

// Continues causal-LM training from m0 on a shifted corpus. In controlled
// mode the attention projections train with their learning rate scaled by
// kappa, which pins down the attention-stable / FFN-drifting regime.
TransformerModel continual_update(const TransformerModel& m0, UpdateMode mode,
                                  const std::vector<Example>& corpus,
                                  const OptimizerConfig& optim, int steps, double kappa,
                                  uint64_t seed, UpdatePair* pair = nullptr,
                                  TrainLog* log = nullptr);

// Fine-tunes a fresh PEFT state on the task's train split with the base
// frozen. Loss is taken over the answer region. A present strategy config
// activates masking/dropping in every training forward.
PeftState finetune_peft(const TransformerModel& model, const TaskData& task,
                        const PeftConfig& peft_cfg, const OptimizerConfig& optim,
                        const std::optional<TransPeftConfig>& strategies, uint64_t seed,
                        TrainLog* log = nullptr);

struct EvalMetrics {
    double loss = 0.0;      // mean answer-region cross-entropy
    double accuracy = 0.0;  // greedy exact match over the answer region
    int count = 0;

    bool operator==(const EvalMetrics&) const = default;
};

EvalMetrics evaluate_task(const TransformerModel& model, const PeftState* peft,
                          const std::vector<Example>& split);

// --- protocol ---------------------------------------------------------------

enum class Arm { finetune_o, finetune_n, direct_transfer, trans_peft };

const char* to_string(Arm a);
Arm arm_from_string(const std::string& s);

struct ArmResult {
    Arm arm;
    uint64_t seed;
    EvalMetrics metrics;
    std::string peft_fingerprint;
};

struct PairedTTest {
    double mean_diff = 0.0;
    double t_statistic = 0.0;
    double p_one_sided = 1.0;  // H1: mean(first - second) > 0
    double p_two_sided = 1.0;
    int n = 0;
};

// Paired t-test over per-seed values (first vs second).
PairedTTest paired_t_test(const std::vector<double>& first, const std::vector<double>& second);

struct ProtocolSettings {
    std::vector<Arm> arms = {Arm::finetune_o, Arm::finetune_n, Arm::direct_transfer,
                             Arm::trans_peft};
    std::vector<uint64_t> seeds = {42, 1, 99};
    PeftConfig peft;
    OptimizerConfig optim;
    TransPeftConfig strategies;  // used by the trans_peft arm
    int jobs = 1;
};

struct ProtocolResult {
    std::vector<ArmResult> runs;  // ordered by (arm, seed)
    double mean_accuracy(Arm arm) const;
    double mean_loss(Arm arm) const;
    std::vector<double> accuracies(Arm arm) const;
    bool has_arm(Arm arm) const;
};

// Executes the requested arms for every seed. Training always happens on the
// arm's home model (M0 for transfer arms, M1 for finetune_n); transfer arms
// evaluate on M1. Base fingerprints are asserted unchanged throughout.
ProtocolResult run_protocol(const TransformerModel& m0, const TransformerModel& m1,
                            const TaskData& task, const ProtocolSettings& settings);

}  // namespace transpeft
