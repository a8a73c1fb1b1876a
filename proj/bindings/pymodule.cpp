// SPDX-License-Identifier: Apache-2.0
//
// Python bindings over the core operations: model construction and
// forward, PEFT init/attach/transfer, the training loops, strategies, and
// the analysis entry points. Enum-ish fields are exposed as strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "transpeft/analysis.hpp"
#include "transpeft/checkpoint.hpp"
#include "transpeft/config.hpp"

namespace py = pybind11;
using namespace transpeft;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
    std::vector<ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<double> out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

std::vector<double> from_numpy_2d(const py::array_t<double>& a, int& rows, int& cols) {
    auto buf = a.request();
    if (buf.ndim != 2) throw ShapeError("expected a 2-D array");
    rows = static_cast<int>(buf.shape[0]);
    cols = static_cast<int>(buf.shape[1]);
    std::vector<double> data(static_cast<size_t>(rows) * cols);
    auto view = a.unchecked<2>();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) data[static_cast<size_t>(i) * cols + j] = view(i, j);
    return data;
}

EvalMetrics evaluate_wrapper(const TransformerModel& model, const PeftState* peft,
                             const std::vector<Example>& split) {
    return evaluate_task(model, peft, split);
}

}  // namespace

PYBIND11_MODULE(_transpeft, m) {
    m.doc() = "Toy-transformer PEFT transfer lab: stochastic FFN masking and layer "
              "dropping during fine-tuning, base-model update simulation, and the "
              "associated analysis tooling.";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<CheckpointError>(m, "CheckpointError");
    py::register_exception<DivergenceError>(m, "DivergenceError");

    m.def("set_precision", [](const std::string& p) {
        set_run_precision(precision_from_string(p));
    });
    m.def("get_precision", [] { return std::string(to_string(run_precision())); });

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("d_ff", &ModelConfig::d_ff)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_property(
            "act", [](const ModelConfig& c) { return std::string(to_string(c.act)); },
            [](ModelConfig& c, const std::string& s) { c.act = nonlinearity_from_string(s); })
        .def_property(
            "ffn_style",
            [](const ModelConfig& c) { return std::string(to_string(c.ffn_style)); },
            [](ModelConfig& c, const std::string& s) { c.ffn_style = ffn_style_from_string(s); })
        .def_property_readonly("tag", &ModelConfig::tag);

    py::class_<TransformerModel>(m, "TransformerModel")
        .def_static("init", &TransformerModel::init, py::arg("config"), py::arg("seed"))
        .def_property_readonly("config", &TransformerModel::config)
        .def("fingerprint", &TransformerModel::fingerprint)
        .def("clone", &TransformerModel::clone)
        .def("forward",
             [](const TransformerModel& model, const std::vector<int>& tokens,
                const PeftState* peft) {
                 Tape tape;
                 ForwardCtx ctx;
                 ctx.peft = peft;
                 return to_numpy(model_forward(tape, model, tokens, ctx));
             },
             py::arg("tokens"), py::arg("peft") = nullptr,
             "Evaluation-mode forward pass; returns (tokens x vocab) logits.");

    m.def("save_checkpoint", &save_checkpoint, py::arg("model"), py::arg("path"));
    m.def("load_checkpoint",
          [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"));

    py::class_<PeftConfig>(m, "PeftConfig")
        .def(py::init<>())
        .def_readwrite("rank", &PeftConfig::rank)
        .def_readwrite("alpha", &PeftConfig::alpha)
        .def_property(
            "kind", [](const PeftConfig& c) { return std::string(to_string(c.kind)); },
            [](PeftConfig& c, const std::string& s) {
                c.kind = peft_kind_from_string(s);
                if (c.kind == PeftKind::adapter) {
                    c.targets = {Site::after_attention, Site::after_ffn};
                }
            })
        .def_property(
            "targets",
            [](const PeftConfig& c) {
                std::vector<std::string> out;
                for (Site s : c.targets) out.push_back(to_string(s));
                return out;
            },
            [](PeftConfig& c, const std::vector<std::string>& v) {
                c.targets.clear();
                for (const auto& s : v) c.targets.push_back(site_from_string(s));
            });

    py::class_<PeftState>(m, "PeftState")
        .def("fingerprint", &PeftState::bytes_fingerprint)
        .def("clone", &PeftState::clone)
        .def_readonly("source_fingerprint", &PeftState::source_fingerprint);

    m.def("init_peft", &init_peft, py::arg("config"), py::arg("model_config"), py::arg("seed"));
    m.def("save_peft_checkpoint", &save_peft_checkpoint, py::arg("state"), py::arg("path"));
    m.def("load_peft_checkpoint", &load_peft_checkpoint, py::arg("path"));

    py::class_<TaskSpec>(m, "TaskSpec")
        .def(py::init<>())
        .def_readwrite("vocab_size", &TaskSpec::vocab_size)
        .def_readwrite("modulus", &TaskSpec::modulus)
        .def_readwrite("payload_len", &TaskSpec::payload_len)
        .def_readwrite("train_size", &TaskSpec::train_size)
        .def_readwrite("test_size", &TaskSpec::test_size)
        .def_readwrite("split_seed", &TaskSpec::split_seed)
        .def_property(
            "kind", [](const TaskSpec& s) { return std::string(to_string(s.kind)); },
            [](TaskSpec& s, const std::string& k) { s.kind = task_kind_from_string(k); });

    py::class_<Example>(m, "Example")
        .def_readonly("tokens", &Example::tokens)
        .def_readonly("answer_begin", &Example::answer_begin)
        .def_readonly("answer_end", &Example::answer_end);

    py::class_<TaskData>(m, "TaskData")
        .def_readonly("train", &TaskData::train)
        .def_readonly("test", &TaskData::test);

    m.def("generate_task", &generate, py::arg("spec"), py::arg("seed"));

    py::class_<OptimizerConfig>(m, "OptimizerConfig")
        .def(py::init<>())
        .def_readwrite("lr", &OptimizerConfig::lr)
        .def_readwrite("batch_size", &OptimizerConfig::batch_size)
        .def_readwrite("epochs", &OptimizerConfig::epochs)
        .def_readwrite("weight_decay", &OptimizerConfig::weight_decay)
        .def_readwrite("clip_norm", &OptimizerConfig::clip_norm);

    py::class_<TransPeftConfig>(m, "TransPeftConfig")
        .def(py::init<>())
        .def_readwrite("p_i", &TransPeftConfig::mask_rate)
        .def_readwrite("p_c", &TransPeftConfig::drop_rate)
        .def_readwrite("rescale", &TransPeftConfig::rescale)
        .def_readwrite("strategy_seed", &TransPeftConfig::strategy_seed)
        .def_property(
            "apply_site",
            [](const TransPeftConfig& c) { return std::string(to_string(c.apply_site)); },
            [](TransPeftConfig& c, const std::string& s) {
                c.apply_site = apply_site_from_string(s);
            });

    py::class_<EvalMetrics>(m, "EvalMetrics")
        .def_readonly("loss", &EvalMetrics::loss)
        .def_readonly("accuracy", &EvalMetrics::accuracy)
        .def_readonly("count", &EvalMetrics::count);

    m.def("pretrain",
          [](const ModelConfig& cfg, const std::vector<Example>& corpus,
             const OptimizerConfig& optim, int steps, uint64_t seed) {
              return pretrain(cfg, corpus, optim, steps, seed);
          },
          py::arg("config"), py::arg("corpus"), py::arg("optim"), py::arg("steps"),
          py::arg("seed"));

    m.def("continual_update",
          [](const TransformerModel& m0, const std::string& mode,
             const std::vector<Example>& corpus, const OptimizerConfig& optim, int steps,
             double kappa, uint64_t seed) {
              UpdatePair pair;
              auto m1 = continual_update(m0, update_mode_from_string(mode), corpus, optim, steps,
                                         kappa, seed, &pair);
              return py::make_tuple(m1, pair.eps_att, pair.rho);
          },
          py::arg("m0"), py::arg("mode"), py::arg("corpus"), py::arg("optim"), py::arg("steps"),
          py::arg("kappa"), py::arg("seed"));

    m.def("finetune_peft",
          [](const TransformerModel& model, const TaskData& task, const PeftConfig& peft_cfg,
             const OptimizerConfig& optim, const TransPeftConfig* strategies, uint64_t seed) {
              std::optional<TransPeftConfig> s;
              if (strategies) s = *strategies;
              return finetune_peft(model, task, peft_cfg, optim, s, seed);
          },
          py::arg("model"), py::arg("task"), py::arg("peft_config"), py::arg("optim"),
          py::arg("strategies") = nullptr, py::arg("seed") = 42);

    m.def("evaluate_task", &evaluate_wrapper, py::arg("model"), py::arg("peft"),
          py::arg("split"));

    m.def("weight_shift",
          [](const TransformerModel& m0, const TransformerModel& m1) {
              auto rep = weight_shift(m0, m1);
              py::dict out;
              out["eps_att"] = rep.eps_att;
              out["rho"] = rep.rho;
              return out;
          },
          py::arg("m0"), py::arg("m1"));

    m.def("loss_discrepancy",
          [](const PeftState& peft, const TransformerModel& m0, const TransformerModel& m1,
             const std::vector<Example>& eval_set) {
              auto d = loss_discrepancy(peft, m0, m1, eval_set);
              py::dict out;
              out["loss_m0"] = d.loss_m0;
              out["loss_m1"] = d.loss_m1;
              out["discrepancy"] = d.discrepancy;
              return out;
          },
          py::arg("peft"), py::arg("m0"), py::arg("m1"), py::arg("eval_set"));

    m.def("spectral_norm",
          [](const py::array_t<double>& a) {
              int rows = 0, cols = 0;
              auto data = from_numpy_2d(a, rows, cols);
              return spectral_norm(data, rows, cols, 200, 1e-12);
          },
          py::arg("matrix"));

    m.attr("__version__") = "0.1.0";
}
