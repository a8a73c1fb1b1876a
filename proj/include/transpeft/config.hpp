// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration and run manifests. The canonical representation
// is a flat key=value map: defaults fill every key, a config file overlays
// it, CLI flags overlay that, and the manifest echoes the complete
// effective map so any run can be re-executed bit-identically from it.
// Unknown keys are rejected.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "transpeft/model.hpp"
#include "transpeft/strategies.hpp"
#include "transpeft/tasks.hpp"
#include "transpeft/training.hpp"

namespace transpeft {

struct MixtureComponent {
    TaskKind kind;
    double weight;
};

struct ExperimentConfig {
    ModelConfig model;
    Precision precision = Precision::f32;
    TaskSpec task;

    std::vector<MixtureComponent> pretrain_mixture;
    std::vector<MixtureComponent> update_mixture;

    int pretrain_steps = 1500;
    OptimizerConfig pretrain_optim;
    uint64_t pretrain_seed = 42;

    int update_steps = 800;
    OptimizerConfig update_optim;
    UpdateMode update_mode = UpdateMode::controlled;
    double update_kappa = 0.05;
    uint64_t update_seed = 42;

    OptimizerConfig finetune_optim;
    PeftConfig peft;
    TransPeftConfig transpeft;

    std::vector<uint64_t> seeds = {42, 1, 99};
    int jobs = 1;

    // Pinned assertion thresholds for `protocol --assert`.
    double assert_p_threshold = 0.05;
    double assert_gap_recovery = 0.5;

    void validate() const;

    // Expands a mixture into concrete task specs + weights. Components that
    // match the downstream task kind reuse its exact spec (and split), so
    // held-out test data never leaks into a pretraining stream.
    std::pair<std::vector<TaskSpec>, std::vector<double>> expand_mixture(
        const std::vector<MixtureComponent>& mixture) const;

    TaskData task_data() const { return generate(task, task.split_seed); }

    std::map<std::string, std::string> to_flat_map() const;
    static ExperimentConfig from_flat_map(const std::map<std::string, std::string>& kv);
};

// Strict `key = value` file grammar ('#' comments, blank lines allowed).
std::map<std::string, std::string> parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides = {});

// --- manifests --------------------------------------------------------------

struct Manifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> inputs;   // name -> path
    std::map<std::string, std::string> input_fingerprints;
    std::vector<std::string> outputs;            // filenames within the run dir
    double wall_clock_sec = 0.0;

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
};

void write_manifest(const Manifest& m, const std::string& path);
Manifest read_manifest(const std::string& path);

// Writes JSON with a stable byte layout (sorted keys, round-trip floats).
void write_json_file(const nlohmann::json& j, const std::string& path);

// "%.17g" formatting, enough digits to round-trip doubles.
std::string format_double(double v);

}  // namespace transpeft
