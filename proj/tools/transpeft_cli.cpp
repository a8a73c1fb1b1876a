// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration CLI. Every subcommand writes a manifest echoing
// the complete effective configuration plus its metric files into --out;
// re-running from a manifest reproduces the metric files byte for byte.
//
// Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numerical
// divergence, 5 failed --assert, 1 anything else.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "transpeft/analysis.hpp"
#include "transpeft/checkpoint.hpp"
#include "transpeft/config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace transpeft;

namespace {

struct AssertionFailure : Error {
    using Error::Error;
};

struct CommonArgs {
    std::string config_path;
    std::string manifest_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config file");
    cmd->add_option("--from-manifest", args.manifest_path,
                    "re-run with the exact configuration of a previous run");
    cmd->add_option("--set", args.overrides, "override a config key (key=value; flags win)");
    cmd->add_option("-o,--out", args.out_dir, "output directory")->required();
}

fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_relative()) {
        if (const char* root = std::getenv("TRANSPEFT_OUT_ROOT")) p = fs::path(root) / p;
    }
    fs::create_directories(p);
    return p;
}

struct LoadedConfig {
    ExperimentConfig cfg;
    std::map<std::string, std::string> flat;
    std::map<std::string, std::string> manifest_inputs;  // when re-running
};

LoadedConfig load(const CommonArgs& args) {
    LoadedConfig out;
    if (!args.manifest_path.empty()) {
        Manifest m = read_manifest(args.manifest_path);
        auto kv = m.config;
        for (const auto& assignment : args.overrides) {
            const auto eq = assignment.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("override is not key=value: '" + assignment + "'");
            }
            kv[assignment.substr(0, eq)] = assignment.substr(eq + 1);
        }
        out.cfg = ExperimentConfig::from_flat_map(kv);
        out.manifest_inputs = m.inputs;
    } else if (!args.config_path.empty()) {
        out.cfg = load_config_file(args.config_path, args.overrides);
    } else {
        throw ConfigError("either --config or --from-manifest is required");
    }
    out.flat = out.cfg.to_flat_map();
    set_run_precision(out.cfg.precision);
    return out;
}

class RunTimer {
public:
    RunTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

void finish_manifest(Manifest m, const fs::path& out, double seconds) {
    m.wall_clock_sec = seconds;
    write_manifest(m, (out / "manifest.json").string());
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write: " + path.string());
    f << header << "\n";
    for (const auto& r : rows) f << r << "\n";
}

std::string pick_input(const LoadedConfig& lc, const std::string& flag_value,
                       const std::string& name) {
    if (!flag_value.empty()) return flag_value;
    auto it = lc.manifest_inputs.find(name);
    if (it != lc.manifest_inputs.end()) return it->second;
    throw ConfigError("missing required input --" + name);
}

std::vector<Example> probe_set(const TaskData& task, uint64_t salt = 0) {
    std::vector<Example> pool = task.test;
    Rng rng(Rng::derive(0x70726f6265ull, {salt}));
    rng.shuffle(pool);
    if (pool.size() > 256) pool.resize(256);
    return pool;
}

json metrics_json(const EvalMetrics& m) {
    json j;
    j["loss"] = m.loss;
    j["accuracy"] = m.accuracy;
    j["count"] = m.count;
    return j;
}

json ttest_json(const PairedTTest& t) {
    json j;
    j["mean_diff"] = t.mean_diff;
    j["t_statistic"] = t.t_statistic;
    j["p_one_sided"] = t.p_one_sided;
    j["p_two_sided"] = t.p_two_sided;
    j["n"] = t.n;
    return j;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_pretrain(const CommonArgs& args) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);

    auto [specs, weights] = lc.cfg.expand_mixture(lc.cfg.pretrain_mixture);
    auto corpus = corpus_mixture(specs, weights,
                                 std::max(1, lc.cfg.pretrain_steps) *
                                     lc.cfg.pretrain_optim.batch_size,
                                 lc.cfg.pretrain_seed);
    TrainLog log;
    auto model = pretrain(lc.cfg.model, corpus, lc.cfg.pretrain_optim, lc.cfg.pretrain_steps,
                          lc.cfg.pretrain_seed, &log);
    save_checkpoint(model, (out / "m0.ckpt").string());

    const double baseline = std::log(static_cast<double>(lc.cfg.model.vocab_size));
    json metrics;
    metrics["final_loss"] = log.final_loss;
    metrics["uniform_baseline"] = baseline;
    metrics["margin_below_baseline"] = baseline - log.final_loss;
    metrics["steps"] = log.steps;
    metrics["fingerprint"] = model.fingerprint();
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "pretrain";
    m.config = lc.flat;
    m.outputs = {"m0.ckpt", "metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "pretrain: final loss " << log.final_loss << " (baseline " << baseline
              << ") -> " << (out / "m0.ckpt").string() << "\n";
    return 0;
}

int cmd_update(const CommonArgs& args, const std::string& model_path) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string m0_path = pick_input(lc, model_path, "model");

    auto m0 = load_checkpoint(m0_path, lc.cfg.model.tag());
    auto [specs, weights] = lc.cfg.expand_mixture(lc.cfg.update_mixture);
    auto corpus = corpus_mixture(specs, weights,
                                 std::max(1, lc.cfg.update_steps) *
                                     lc.cfg.update_optim.batch_size,
                                 lc.cfg.update_seed);
    UpdatePair pair;
    TrainLog log;
    auto m1 = continual_update(m0, lc.cfg.update_mode, corpus, lc.cfg.update_optim,
                               lc.cfg.update_steps, lc.cfg.update_kappa, lc.cfg.update_seed,
                               &pair, &log);
    save_checkpoint(m1, (out / "m1.ckpt").string());

    json pair_json;
    pair_json["m0_fingerprint"] = pair.m0_fingerprint;
    pair_json["m1_fingerprint"] = pair.m1_fingerprint;
    pair_json["mode"] = to_string(pair.mode);
    pair_json["corpus"] = lc.flat.at("update.mixture");
    pair_json["eps_att"] = pair.eps_att;
    pair_json["rho"] = pair.rho;
    write_json_file(pair_json, (out / "update_pair.json").string());

    json metrics;
    metrics["final_loss"] = log.final_loss;
    metrics["eps_att"] = pair.eps_att;
    metrics["rho"] = pair.rho;
    metrics["steps"] = log.steps;
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "update";
    m.config = lc.flat;
    m.inputs["model"] = m0_path;
    m.input_fingerprints["model"] = pair.m0_fingerprint;
    m.outputs = {"m1.ckpt", "update_pair.json", "metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "update: eps_att " << pair.eps_att << ", rho " << pair.rho << " -> "
              << (out / "m1.ckpt").string() << "\n";
    return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& model_path, bool with_strategies,
                 std::optional<uint64_t> seed_flag) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string path = pick_input(lc, model_path, "model");

    auto model = load_checkpoint(path, lc.cfg.model.tag());
    auto task = lc.cfg.task_data();
    const uint64_t seed = seed_flag.value_or(lc.cfg.seeds.front());

    std::optional<TransPeftConfig> strategies;
    if (with_strategies) strategies = lc.cfg.transpeft;

    TrainLog log;
    auto state = finetune_peft(model, task, lc.cfg.peft, lc.cfg.finetune_optim, strategies, seed,
                               &log);
    save_peft_checkpoint(state, (out / "peft.ckpt").string());
    auto eval = evaluate_task(model, &state, task.test);

    json metrics;
    metrics["final_train_loss"] = log.final_loss;
    metrics["steps"] = log.steps;
    metrics["seed"] = seed;
    metrics["strategies_active"] = with_strategies;
    metrics["eval"] = metrics_json(eval);
    metrics["peft_fingerprint"] = state.bytes_fingerprint();
    metrics["base_fingerprint"] = model.fingerprint();
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "finetune";
    m.config = lc.flat;
    m.inputs["model"] = path;
    m.input_fingerprints["model"] = model.fingerprint();
    m.outputs = {"peft.ckpt", "metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "finetune: eval accuracy " << eval.accuracy << " -> "
              << (out / "peft.ckpt").string() << "\n";
    return 0;
}

int cmd_transfer_eval(const CommonArgs& args, const std::string& peft_path,
                      const std::string& target_path) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string peft_p = pick_input(lc, peft_path, "peft");
    const std::string target_p = pick_input(lc, target_path, "target");

    auto state = load_peft_checkpoint(peft_p);
    auto target = load_checkpoint(target_p, lc.cfg.model.tag());
    const std::string target_fp_before = target.fingerprint();
    const std::string peft_fp_before = state.bytes_fingerprint();

    TransferRecord record;
    auto binding = transfer(std::move(state), target, &record);
    auto task = lc.cfg.task_data();
    auto eval = evaluate_task(target, &binding.state(), task.test);

    json metrics;
    metrics["eval"] = metrics_json(eval);
    metrics["peft_fingerprint_before"] = peft_fp_before;
    metrics["peft_fingerprint_after"] = binding.state().bytes_fingerprint();
    metrics["source_fingerprint"] = record.source_fingerprint;
    metrics["target_fingerprint_before"] = target_fp_before;
    metrics["target_fingerprint_after"] = target.fingerprint();
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "transfer-eval";
    m.config = lc.flat;
    m.inputs["peft"] = peft_p;
    m.inputs["target"] = target_p;
    m.input_fingerprints["peft"] = peft_fp_before;
    m.input_fingerprints["target"] = target_fp_before;
    m.outputs = {"metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "transfer-eval: accuracy " << eval.accuracy << "\n";
    return 0;
}

json protocol_to_json(const ProtocolResult& result, const ProtocolSettings& settings) {
    json j;
    json runs = json::array();
    for (const auto& r : result.runs) {
        json rj;
        rj["arm"] = to_string(r.arm);
        rj["seed"] = r.seed;
        rj["loss"] = r.metrics.loss;
        rj["accuracy"] = r.metrics.accuracy;
        rj["peft_fingerprint"] = r.peft_fingerprint;
        runs.push_back(rj);
    }
    j["runs"] = runs;
    json means;
    for (Arm arm : settings.arms) {
        json a;
        a["accuracy"] = result.mean_accuracy(arm);
        a["loss"] = result.mean_loss(arm);
        means[to_string(arm)] = a;
    }
    j["means"] = means;
    if (result.has_arm(Arm::trans_peft) && result.has_arm(Arm::direct_transfer)) {
        j["t_test_trans_vs_direct"] = ttest_json(paired_t_test(
            result.accuracies(Arm::trans_peft), result.accuracies(Arm::direct_transfer)));
        if (result.has_arm(Arm::finetune_n)) {
            const double direct = result.mean_accuracy(Arm::direct_transfer);
            const double trans = result.mean_accuracy(Arm::trans_peft);
            const double ideal = result.mean_accuracy(Arm::finetune_n);
            j["gap_recovery"] =
                ideal > direct ? (trans - direct) / (ideal - direct) : 1.0;
        }
    }
    return j;
}

std::vector<std::string> protocol_csv_rows(const ProtocolResult& result,
                                           const std::string& task_name) {
    std::vector<std::string> rows;
    for (const auto& r : result.runs) {
        rows.push_back(std::string(to_string(r.arm)) + "," + std::to_string(r.seed) + "," +
                       task_name + "," + format_double(r.metrics.loss) + "," +
                       format_double(r.metrics.accuracy));
    }
    return rows;
}

int cmd_protocol(const CommonArgs& args, const std::string& m0_path, const std::string& m1_path,
                 const std::string& arms_csv, bool assert_mode) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string p0 = pick_input(lc, m0_path, "m0");
    const std::string p1 = pick_input(lc, m1_path, "m1");

    auto m0 = load_checkpoint(p0, lc.cfg.model.tag());
    auto m1 = load_checkpoint(p1, lc.cfg.model.tag());
    auto task = lc.cfg.task_data();

    ProtocolSettings settings;
    settings.peft = lc.cfg.peft;
    settings.optim = lc.cfg.finetune_optim;
    settings.strategies = lc.cfg.transpeft;
    settings.seeds = lc.cfg.seeds;
    settings.jobs = lc.cfg.jobs;
    if (!arms_csv.empty()) {
        settings.arms.clear();
        std::stringstream ss(arms_csv);
        std::string item;
        while (std::getline(ss, item, ',')) settings.arms.push_back(arm_from_string(item));
    }

    auto result = run_protocol(m0, m1, task, settings);

    const std::string task_name = to_string(lc.cfg.task.kind);
    write_csv(out / "metrics.csv", "arm,seed,task,loss,accuracy",
              protocol_csv_rows(result, task_name));
    json metrics = protocol_to_json(result, settings);
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "protocol";
    m.config = lc.flat;
    m.inputs["m0"] = p0;
    m.inputs["m1"] = p1;
    m.input_fingerprints["m0"] = m0.fingerprint();
    m.input_fingerprints["m1"] = m1.fingerprint();
    m.outputs = {"metrics.csv", "metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());

    for (Arm arm : settings.arms) {
        std::cout << to_string(arm) << ": mean accuracy " << result.mean_accuracy(arm) << "\n";
    }

    if (assert_mode) {
        if (!metrics.contains("t_test_trans_vs_direct") || !metrics.contains("gap_recovery")) {
            throw AssertionFailure(
                "--assert needs the trans_peft, direct_transfer and finetune_n arms");
        }
        const double p = metrics["t_test_trans_vs_direct"]["p_one_sided"].get<double>();
        const double recovery = metrics["gap_recovery"].get<double>();
        if (p >= lc.cfg.assert_p_threshold) {
            throw AssertionFailure("transfer ordering not significant: p = " +
                                   format_double(p));
        }
        if (recovery < lc.cfg.assert_gap_recovery) {
            throw AssertionFailure("gap recovery below threshold: " + format_double(recovery));
        }
        std::cout << "assertions passed: p = " << p << ", gap recovery = " << recovery << "\n";
    }
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& m0_path, const std::string& m1_path,
              const std::string& param, std::vector<double> values) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string p0 = pick_input(lc, m0_path, "m0");
    const std::string p1 = pick_input(lc, m1_path, "m1");
    if (param != "p_c" && param != "p_i") {
        throw ConfigError("sweep: --param must be p_c or p_i");
    }
    if (values.empty()) {
        // Grid endpoints extend the reference grids for the shape check.
        values = param == "p_c" ? std::vector<double>{0.0, 0.1, 0.2, 0.3, 0.5}
                                : std::vector<double>{0.0, 0.01, 0.05, 0.1, 0.5};
    }

    auto m0 = load_checkpoint(p0, lc.cfg.model.tag());
    auto m1 = load_checkpoint(p1, lc.cfg.model.tag());
    auto task = lc.cfg.task_data();

    std::vector<std::string> rows;
    json by_value = json::array();
    for (double v : values) {
        ProtocolSettings settings;
        settings.arms = {Arm::trans_peft};
        settings.peft = lc.cfg.peft;
        settings.optim = lc.cfg.finetune_optim;
        settings.strategies = lc.cfg.transpeft;
        settings.seeds = lc.cfg.seeds;
        settings.jobs = lc.cfg.jobs;
        if (param == "p_c") {
            settings.strategies.drop_rate = v;
        } else {
            settings.strategies.mask_rate = v;
        }
        auto result = run_protocol(m0, m1, task, settings);
        for (const auto& r : result.runs) {
            rows.push_back(param + "," + format_double(v) + "," + std::to_string(r.seed) + "," +
                           format_double(r.metrics.loss) + "," +
                           format_double(r.metrics.accuracy));
        }
        json vj;
        vj["value"] = v;
        vj["mean_accuracy"] = result.mean_accuracy(Arm::trans_peft);
        vj["mean_loss"] = result.mean_loss(Arm::trans_peft);
        by_value.push_back(vj);
        std::cout << "sweep " << param << " = " << v << ": mean accuracy "
                  << result.mean_accuracy(Arm::trans_peft) << "\n";
    }
    write_csv(out / "fig6_sweep.csv", "param,value,seed,loss,accuracy", rows);
    json metrics;
    metrics["param"] = param;
    metrics["by_value"] = by_value;
    write_json_file(metrics, (out / "metrics.json").string());

    Manifest m;
    m.command = "sweep";
    m.config = lc.flat;
    m.inputs["m0"] = p0;
    m.inputs["m1"] = p1;
    m.input_fingerprints["m0"] = m0.fingerprint();
    m.input_fingerprints["m1"] = m1.fingerprint();
    m.outputs = {"fig6_sweep.csv", "metrics.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    return 0;
}

int cmd_analyze(const CommonArgs& args, const std::string& model_a, const std::string& peft_a,
                const std::string& model_b, const std::string& peft_b) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string pa = pick_input(lc, model_a, "model-a");
    const std::string pb = pick_input(lc, model_b, "model-b");

    auto ma = load_checkpoint(pa, lc.cfg.model.tag());
    auto mb = load_checkpoint(pb, lc.cfg.model.tag());
    std::optional<PeftState> sa, sb;
    if (!peft_a.empty()) sa = load_peft_checkpoint(peft_a);
    if (!peft_b.empty()) sb = load_peft_checkpoint(peft_b);

    auto task = lc.cfg.task_data();
    auto probe = probe_set(task);

    auto trace_a = record_activations(ma, sa ? &*sa : nullptr, probe);
    auto trace_b = record_activations(mb, sb ? &*sb : nullptr, probe);
    auto similarity = compare_distributions(trace_a, trace_b);

    auto inf_a = layer_influence(ma, sa ? &*sa : nullptr, probe);
    auto inf_b = layer_influence(mb, sb ? &*sb : nullptr, probe);
    const double agreement = sign_agreement(inf_a, inf_b);

    auto shift = weight_shift(ma, mb);

    std::vector<std::string> fig1, fig2, fig3;
    for (size_t l = 0; l < similarity.attention.size(); ++l) {
        fig1.push_back(std::to_string(l) + "," + format_double(similarity.attention[l].pearson) +
                       "," + format_double(similarity.attention[l].topk_overlap));
        fig2.push_back(std::to_string(l) + "," + format_double(similarity.ffn[l].pearson) + "," +
                       format_double(similarity.ffn[l].topk_overlap));
        fig3.push_back(std::to_string(l) + "," + format_double(inf_a.influence[l]) + "," +
                       format_double(inf_b.influence[l]));
    }
    write_csv(out / "fig1_attn_similarity.csv", "layer,pearson,topk_overlap", fig1);
    write_csv(out / "fig2_ffn_similarity.csv", "layer,pearson,topk_overlap", fig2);
    write_csv(out / "fig3_influence.csv", "layer,influence_a,influence_b", fig3);

    json metrics;
    metrics["mean_attention_pearson"] = similarity.mean_attention_pearson;
    metrics["mean_ffn_pearson"] = similarity.mean_ffn_pearson;
    metrics["mean_attention_overlap"] = similarity.mean_attention_overlap;
    metrics["mean_ffn_overlap"] = similarity.mean_ffn_overlap;
    metrics["influence_sign_agreement"] = agreement;
    json shift_json;
    shift_json["eps_att"] = shift.eps_att;
    shift_json["rho"] = shift.rho;
    json layers = json::array();
    for (const auto& l : shift.layers) {
        json lj;
        lj["attention_spectral"] = l.attention_spectral;
        lj["attention_frobenius"] = l.attention_frobenius;
        lj["ffn_spectral"] = l.ffn_spectral;
        lj["ffn_frobenius"] = l.ffn_frobenius;
        layers.push_back(lj);
    }
    shift_json["layers"] = layers;
    metrics["weight_shift"] = shift_json;
    write_json_file(metrics, (out / "analysis.json").string());

    Manifest m;
    m.command = "analyze";
    m.config = lc.flat;
    m.inputs["model-a"] = pa;
    m.inputs["model-b"] = pb;
    if (!peft_a.empty()) m.inputs["peft-a"] = peft_a;
    if (!peft_b.empty()) m.inputs["peft-b"] = peft_b;
    m.input_fingerprints["model-a"] = ma.fingerprint();
    m.input_fingerprints["model-b"] = mb.fingerprint();
    m.outputs = {"fig1_attn_similarity.csv", "fig2_ffn_similarity.csv", "fig3_influence.csv",
                 "analysis.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "analyze: attention pearson " << similarity.mean_attention_pearson
              << ", ffn pearson " << similarity.mean_ffn_pearson << ", sign agreement "
              << agreement << "\n";
    return 0;
}

int cmd_bound_report(const CommonArgs& args, const std::string& m0_path,
                     const std::string& m1_path, const std::string& peft_path,
                     const std::string& peft_n_path, int draws) {
    RunTimer timer;
    LoadedConfig lc = load(args);
    const fs::path out = resolve_out(args.out_dir);
    const std::string p0 = pick_input(lc, m0_path, "m0");
    const std::string p1 = pick_input(lc, m1_path, "m1");
    const std::string pp = pick_input(lc, peft_path, "peft");
    const std::string pn = pick_input(lc, peft_n_path, "peft-n");

    auto m0 = load_checkpoint(p0, lc.cfg.model.tag());
    auto m1 = load_checkpoint(p1, lc.cfg.model.tag());
    auto state = load_peft_checkpoint(pp);
    auto state_n = load_peft_checkpoint(pn);
    auto task = lc.cfg.task_data();
    auto eval_set = probe_set(task);

    auto rep = bound_report(state, state_n, m0, m1, eval_set, lc.cfg.transpeft, draws);

    json j;
    j["loss_m0"] = rep.discrepancy.loss_m0;
    j["loss_m1"] = rep.discrepancy.loss_m1;
    j["loss_discrepancy"] = rep.discrepancy.discrepancy;
    j["eps_att"] = rep.eps_att;
    j["rho"] = rep.rho;
    j["parameter_deviation_ffn"] = rep.parameter_deviation_ffn;
    j["parameter_deviation_att"] = rep.parameter_deviation_att;
    auto comp = [](const PerturbationStats::Component& c) {
        json cj;
        cj["mean_norm"] = c.mean_norm;
        cj["mean_sq_norm"] = c.mean_sq_norm;
        cj["null_bound_sq"] = c.null_bound_sq;
        return cj;
    };
    json pj;
    pj["draws"] = rep.perturbation.draws;
    pj["masking"] = comp(rep.perturbation.masking);
    pj["dropping"] = comp(rep.perturbation.dropping);
    pj["combined"] = comp(rep.perturbation.combined);
    j["perturbation"] = pj;
    j["unestimated"] = rep.unestimated;
    write_json_file(j, (out / "bound_report.json").string());

    Manifest m;
    m.command = "bound-report";
    m.config = lc.flat;
    m.inputs["m0"] = p0;
    m.inputs["m1"] = p1;
    m.inputs["peft"] = pp;
    m.inputs["peft-n"] = pn;
    m.input_fingerprints["m0"] = m0.fingerprint();
    m.input_fingerprints["m1"] = m1.fingerprint();
    m.outputs = {"bound_report.json"};
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "bound-report: discrepancy " << rep.discrepancy.discrepancy << ", rho "
              << rep.rho << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    RunTimer timer;
    const fs::path out = resolve_out(out_dir);
    std::vector<std::string> aggregate;
    std::vector<std::string> ablation;

    for (const std::string& dir : run_dirs) {
        const fs::path run(dir);
        if (!fs::exists(run / "manifest.json")) {
            throw MissingArtifactError("no manifest in " + dir);
        }
        Manifest m = read_manifest((run / "manifest.json").string());
        const std::string label = run.filename().string();
        if (fs::exists(run / "metrics.csv")) {
            std::ifstream f(run / "metrics.csv");
            std::string line;
            std::getline(f, line);  // header
            while (std::getline(f, line)) {
                if (!line.empty()) aggregate.push_back(label + "," + line);
            }
            if (m.command == "protocol") {
                const std::string site = m.config.count("transpeft.apply_site")
                                             ? m.config.at("transpeft.apply_site")
                                             : "ffn";
                std::ifstream f2(run / "metrics.csv");
                std::getline(f2, line);
                while (std::getline(f2, line)) {
                    if (line.rfind("trans_peft,", 0) == 0) {
                        ablation.push_back(label + "," + site + "," + line);
                    } else if (line.rfind("direct_transfer,", 0) == 0) {
                        ablation.push_back(label + ",none," + line);
                    }
                }
            }
        }
    }

    write_csv(out / "aggregate.csv", "run,arm,seed,task,loss,accuracy", aggregate);
    if (!ablation.empty()) {
        write_csv(out / "fig8_ablation.csv", "run,site,arm,seed,task,loss,accuracy", ablation);
    }

    Manifest m;
    m.command = "report";
    for (size_t i = 0; i < run_dirs.size(); ++i) {
        m.inputs["run" + std::to_string(i)] = run_dirs[i];
    }
    m.outputs = {"aggregate.csv"};
    if (!ablation.empty()) m.outputs.push_back("fig8_ablation.csv");
    finish_manifest(std::move(m), out, timer.seconds());
    std::cout << "report: " << aggregate.size() << " rows -> "
              << (out / "aggregate.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Trans-PEFT experiment harness"};
    app.require_subcommand(1);

    CommonArgs pretrain_args;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "train the base model M0");
    add_common(pretrain_cmd, pretrain_args);

    CommonArgs update_args;
    std::string update_model;
    auto* update_cmd = app.add_subcommand("update", "continually update M0 into M1");
    add_common(update_cmd, update_args);
    update_cmd->add_option("-m,--model", update_model, "M0 checkpoint");

    CommonArgs ft_args;
    std::string ft_model;
    bool ft_strategies = false;
    std::optional<uint64_t> ft_seed;
    auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a PEFT module on one model");
    add_common(ft_cmd, ft_args);
    ft_cmd->add_option("-m,--model", ft_model, "base model checkpoint");
    ft_cmd->add_flag("--strategies", ft_strategies, "activate masking/dropping during training");
    ft_cmd->add_option("--seed", ft_seed, "fine-tuning seed (default: first config seed)");

    CommonArgs te_args;
    std::string te_peft, te_target;
    auto* te_cmd = app.add_subcommand("transfer-eval", "attach a PEFT module to another model "
                                                       "and evaluate");
    add_common(te_cmd, te_args);
    te_cmd->add_option("--peft", te_peft, "peft checkpoint");
    te_cmd->add_option("--target", te_target, "target model checkpoint");

    CommonArgs proto_args;
    std::string proto_m0, proto_m1, proto_arms;
    bool proto_assert = false;
    auto* proto_cmd = app.add_subcommand("protocol", "run the transfer protocol arms");
    add_common(proto_cmd, proto_args);
    proto_cmd->add_option("--m0", proto_m0, "old base model checkpoint");
    proto_cmd->add_option("--m1", proto_m1, "updated base model checkpoint");
    proto_cmd->add_option("--arms", proto_arms, "comma list of arms (default: all four)");
    proto_cmd->add_flag("--assert", proto_assert, "fail (exit 5) unless the pinned transfer "
                                                  "assertions hold");

    CommonArgs sweep_args;
    std::string sweep_m0, sweep_m1, sweep_param = "p_c";
    std::vector<double> sweep_values;
    auto* sweep_cmd = app.add_subcommand("sweep", "grid over p_c or p_i");
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--m0", sweep_m0, "old base model checkpoint");
    sweep_cmd->add_option("--m1", sweep_m1, "updated base model checkpoint");
    sweep_cmd->add_option("--param", sweep_param, "p_c or p_i");
    sweep_cmd->add_option("--values", sweep_values, "grid values (default per param)");

    CommonArgs an_args;
    std::string an_ma, an_pa, an_mb, an_pb;
    auto* an_cmd = app.add_subcommand("analyze", "activation similarity, layer influence and "
                                                 "weight shift between two models");
    add_common(an_cmd, an_args);
    an_cmd->add_option("--model-a", an_ma, "first model checkpoint");
    an_cmd->add_option("--peft-a", an_pa, "peft checkpoint attached to model a");
    an_cmd->add_option("--model-b", an_mb, "second model checkpoint");
    an_cmd->add_option("--peft-b", an_pb, "peft checkpoint attached to model b");

    CommonArgs br_args;
    std::string br_m0, br_m1, br_peft, br_peft_n;
    int br_draws = 2000;
    auto* br_cmd = app.add_subcommand("bound-report", "measured loss-bound terms for a "
                                                      "checkpoint pair");
    add_common(br_cmd, br_args);
    br_cmd->add_option("--m0", br_m0, "old base model checkpoint");
    br_cmd->add_option("--m1", br_m1, "updated base model checkpoint");
    br_cmd->add_option("--peft", br_peft, "peft trained on M0");
    br_cmd->add_option("--peft-n", br_peft_n, "reference peft trained on M1");
    br_cmd->add_option("--draws", br_draws, "Monte-Carlo draws");

    std::vector<std::string> report_runs;
    std::string report_out;
    auto* report_cmd = app.add_subcommand("report", "aggregate metrics from run directories");
    report_cmd->add_option("--run", report_runs, "run directory (repeatable)")->required();
    report_cmd->add_option("-o,--out", report_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain_cmd->parsed()) return cmd_pretrain(pretrain_args);
        if (update_cmd->parsed()) return cmd_update(update_args, update_model);
        if (ft_cmd->parsed()) return cmd_finetune(ft_args, ft_model, ft_strategies, ft_seed);
        if (te_cmd->parsed()) return cmd_transfer_eval(te_args, te_peft, te_target);
        if (proto_cmd->parsed()) {
            return cmd_protocol(proto_args, proto_m0, proto_m1, proto_arms, proto_assert);
        }
        if (sweep_cmd->parsed()) {
            return cmd_sweep(sweep_args, sweep_m0, sweep_m1, sweep_param, sweep_values);
        }
        if (an_cmd->parsed()) return cmd_analyze(an_args, an_ma, an_pa, an_mb, an_pb);
        if (br_cmd->parsed()) {
            return cmd_bound_report(br_args, br_m0, br_m1, br_peft, br_peft_n, br_draws);
        }
        if (report_cmd->parsed()) return cmd_report(report_runs, report_out);
    } catch (const AssertionFailure& e) {
        std::cerr << "assertion failure: " << e.what() << "\n";
        return 5;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 4;
    } catch (const MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
