// SPDX-License-Identifier: Apache-2.0

#include "transpeft/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace transpeft {

namespace {

std::atomic<bool> g_finite_checks{true};

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor");
}

void check_input_finite(const Tensor& t, const char* op) {
    if (!finite_checks_enabled()) return;
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            throw NonFiniteError(std::string(op) + ": non-finite input value");
        }
    }
}

void accumulate(detail::TensorNode& node, size_t idx, double v) {
    node.grad[idx] += v;
}

std::vector<double>& grad_of(const std::shared_ptr<detail::TensorNode>& node) {
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    return node->grad;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double apply_act(double x, Nonlinearity kind) {
    switch (kind) {
        case Nonlinearity::relu:
            return x > 0.0 ? x : 0.0;
        case Nonlinearity::gelu:
            return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
        case Nonlinearity::silu:
            return x / (1.0 + std::exp(-x));
    }
    return x;
}

double act_derivative(double x, Nonlinearity kind) {
    switch (kind) {
        case Nonlinearity::relu:
            return x > 0.0 ? 1.0 : 0.0;
        case Nonlinearity::gelu:
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
                   x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        case Nonlinearity::silu: {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        }
    }
    return 1.0;
}

}  // namespace

const char* to_string(Nonlinearity n) {
    switch (n) {
        case Nonlinearity::relu: return "relu";
        case Nonlinearity::gelu: return "gelu";
        case Nonlinearity::silu: return "silu";
    }
    return "?";
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "relu") return Nonlinearity::relu;
    if (s == "gelu") return Nonlinearity::gelu;
    if (s == "silu") return Nonlinearity::silu;
    throw ConfigError("unknown nonlinearity: " + s);
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled, std::memory_order_relaxed); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    node->value.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    double s = snap(v, run_precision());
    std::fill(t.values().begin(), t.values().end(), s);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw ShapeError("from_data: data length does not match shape");
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    Tensor t(std::move(node));
    t.snap_values();
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.values()) v = snap(rng.normal() * stddev, run_precision());
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->value[0];
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

std::vector<double>& Tensor::grad_buffer() { return grad_of(node_); }

void Tensor::snap_values() {
    Precision p = run_precision();
    if (p == Precision::f32) {
        for (double& v : node_->value) v = snap(v, p);
    }
}

void Tensor::check_finite(const char* what) const {
    for (double v : node_->value) {
        if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + ": non-finite value");
    }
}

Tensor Tensor::clone() const {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::make_output(std::vector<int> shape, std::vector<double> value,
                         std::span<const Tensor> inputs, const char* op_name,
                         std::function<void(detail::TensorNode&)> backward_fn) {
    (void)op_name;
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    Precision p = run_precision();
    if (p == Precision::f32) {
        for (double& v : node->value) v = snap(v, p);
    }

    bool needs_grad = false;
    for (const Tensor& in : inputs) needs_grad |= in.requires_grad();
    node->requires_grad = needs_grad;

    if (needs_grad) {
        Step step;
        step.inputs.reserve(inputs.size());
        for (const Tensor& in : inputs) step.inputs.push_back(in.node_);
        step.output = node;
        step.backward_fn = std::move(backward_fn);
        steps_.push_back(std::move(step));
    }
    return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw Error("backward: tape already consumed");
    if (!loss.defined() || loss.numel() != 1) {
        throw ShapeError("backward: loss must be a defined scalar");
    }
    consumed_ = true;
    loss.node()->grad.assign(1, 1.0);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        if (it->output->grad.empty()) continue;  // not reachable from the loss
        it->backward_fn(*it->output);
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions do not match");
    check_input_finite(a, "matmul");
    check_input_finite(b, "matmul");

    const int m = a.rows(), k = a.cols(), n = b.cols();
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = av.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const double s = arow[l];
            if (s == 0.0) continue;
            const double* brow = bv.data() + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) orow[j] += s * brow[j];
        }
    }

    Tensor in[] = {a, b};
    auto an = a.node(), bn = b.node();
    return tape.make_output(
        {m, n}, std::move(out), in, "matmul", [an, bn, m, k, n](detail::TensorNode& o) {
            const auto& g = o.grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                // dA = dC @ B^T
                for (int i = 0; i < m; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    double* darow = an->grad.data() + static_cast<size_t>(i) * k;
                    for (int l = 0; l < k; ++l) {
                        const double* brow = bn->value.data() + static_cast<size_t>(l) * n;
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        darow[l] += s;
                    }
                }
            }
            if (bn->requires_grad) {
                if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
                // dB = A^T @ dC
                for (int i = 0; i < m; ++i) {
                    const double* arow = an->value.data() + static_cast<size_t>(i) * k;
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    for (int l = 0; l < k; ++l) {
                        const double s = arow[l];
                        if (s == 0.0) continue;
                        double* dbrow = bn->grad.data() + static_cast<size_t>(l) * n;
                        for (int j = 0; j < n; ++j) dbrow[j] += s * grow[j];
                    }
                }
            }
        });
}

Tensor transpose(Tape& tape, const Tensor& a) {
    require_2d(a, "transpose");
    check_input_finite(a, "transpose");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = a.values()[static_cast<size_t>(i) * n + j];

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output({n, m}, std::move(out), in, "transpose",
                            [an, m, n](detail::TensorNode& o) {
                                if (!an->requires_grad) return;
                                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                for (int i = 0; i < m; ++i)
                                    for (int j = 0; j < n; ++j)
                                        an->grad[static_cast<size_t>(i) * n + j] +=
                                            o.grad[static_cast<size_t>(j) * m + i];
                            });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shapes must match exactly");
    check_input_finite(a, "add");
    check_input_finite(b, "add");
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];

    Tensor in[] = {a, b};
    auto an = a.node(), bn = b.node();
    return tape.make_output(a.shape(), std::move(out), in, "add", [an, bn](detail::TensorNode& o) {
        if (an->requires_grad) {
            if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(*an, i, o.grad[i]);
        }
        if (bn->requires_grad) {
            if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(*bn, i, o.grad[i]);
        }
    });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shapes must match exactly");
    check_input_finite(a, "mul");
    check_input_finite(b, "mul");
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];

    Tensor in[] = {a, b};
    auto an = a.node(), bn = b.node();
    return tape.make_output(a.shape(), std::move(out), in, "mul", [an, bn](detail::TensorNode& o) {
        if (an->requires_grad) {
            if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(*an, i, o.grad[i] * bn->value[i]);
        }
        if (bn->requires_grad) {
            if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(*bn, i, o.grad[i] * an->value[i]);
        }
    });
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
    check_input_finite(a, "scale");
    if (!std::isfinite(c)) throw NonFiniteError("scale: non-finite scalar");
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output(a.shape(), std::move(out), in, "scale", [an, c](detail::TensorNode& o) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
        for (size_t i = 0; i < o.grad.size(); ++i) accumulate(*an, i, o.grad[i] * c);
    });
}

Tensor add_bias(Tape& tape, const Tensor& a, const Tensor& bias) {
    require_2d(a, "add_bias");
    if (bias.ndim() != 1 || bias.shape()[0] != a.cols()) {
        throw ShapeError("add_bias: bias length must equal column count");
    }
    check_input_finite(a, "add_bias");
    check_input_finite(bias, "add_bias");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] =
                a.values()[static_cast<size_t>(i) * n + j] + bias.values()[j];

    Tensor in[] = {a, bias};
    auto an = a.node(), bn = bias.node();
    return tape.make_output({m, n}, std::move(out), in, "add_bias",
                            [an, bn, m, n](detail::TensorNode& o) {
                                if (an->requires_grad) {
                                    if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                    for (size_t i = 0; i < o.grad.size(); ++i)
                                        accumulate(*an, i, o.grad[i]);
                                }
                                if (bn->requires_grad) {
                                    if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
                                    for (int i = 0; i < m; ++i)
                                        for (int j = 0; j < n; ++j)
                                            accumulate(*bn, j,
                                                       o.grad[static_cast<size_t>(i) * n + j]);
                                }
                            });
}

Tensor activation(Tape& tape, const Tensor& a, Nonlinearity kind) {
    check_input_finite(a, "activation");
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = apply_act(a.values()[i], kind);

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output(a.shape(), std::move(out), in, "activation",
                            [an, kind](detail::TensorNode& o) {
                                if (!an->requires_grad) return;
                                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                for (size_t i = 0; i < o.grad.size(); ++i)
                                    accumulate(*an, i,
                                               o.grad[i] * act_derivative(an->value[i], kind));
                            });
}

Tensor softmax_rows(Tape& tape, const Tensor& a) {
    require_2d(a, "softmax_rows");
    check_input_finite(a, "softmax_rows");
    const int m = a.rows(), n = a.cols();
    std::vector<double> out(a.values().size());
    for (int i = 0; i < m; ++i) {
        const double* row = a.values().data() + static_cast<size_t>(i) * n;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= sum;
    }

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output({m, n}, std::move(out), in, "softmax_rows",
                            [an, m, n](detail::TensorNode& o) {
                                if (!an->requires_grad) return;
                                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                for (int i = 0; i < m; ++i) {
                                    const double* y = o.value.data() + static_cast<size_t>(i) * n;
                                    const double* dy = o.grad.data() + static_cast<size_t>(i) * n;
                                    double dot = 0.0;
                                    for (int j = 0; j < n; ++j) dot += dy[j] * y[j];
                                    for (int j = 0; j < n; ++j)
                                        accumulate(*an, static_cast<size_t>(i) * n + j,
                                                   y[j] * (dy[j] - dot));
                                }
                            });
}

Tensor layer_norm(Tape& tape, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    require_2d(a, "layer_norm");
    const int m = a.rows(), n = a.cols();
    if (gamma.ndim() != 1 || gamma.shape()[0] != n || beta.ndim() != 1 || beta.shape()[0] != n) {
        throw ShapeError("layer_norm: gamma/beta must be vectors of the column count");
    }
    check_input_finite(a, "layer_norm");
    check_input_finite(gamma, "layer_norm");
    check_input_finite(beta, "layer_norm");

    std::vector<double> out(a.values().size());
    auto xhat = std::make_shared<std::vector<double>>(a.values().size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (int i = 0; i < m; ++i) {
        const double* row = a.values().data() + static_cast<size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        for (int j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * inv;
            (*xhat)[static_cast<size_t>(i) * n + j] = xh;
            out[static_cast<size_t>(i) * n + j] = gamma.values()[j] * xh + beta.values()[j];
        }
    }

    Tensor in[] = {a, gamma, beta};
    auto an = a.node(), gn = gamma.node(), bn = beta.node();
    return tape.make_output(
        {m, n}, std::move(out), in, "layer_norm",
        [an, gn, bn, xhat, inv_std, m, n](detail::TensorNode& o) {
            for (int i = 0; i < m; ++i) {
                const double* dy = o.grad.data() + static_cast<size_t>(i) * n;
                const double* xh = xhat->data() + static_cast<size_t>(i) * n;
                if (gn->requires_grad) {
                    if (gn->grad.empty()) gn->grad.assign(gn->value.size(), 0.0);
                    for (int j = 0; j < n; ++j) accumulate(*gn, j, dy[j] * xh[j]);
                }
                if (bn->requires_grad) {
                    if (bn->grad.empty()) bn->grad.assign(bn->value.size(), 0.0);
                    for (int j = 0; j < n; ++j) accumulate(*bn, j, dy[j]);
                }
                if (an->requires_grad) {
                    if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double g = dy[j] * gn->value[j];
                        mean_g += g;
                        mean_gx += g * xh[j];
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    const double inv = (*inv_std)[i];
                    for (int j = 0; j < n; ++j) {
                        const double g = dy[j] * gn->value[j];
                        accumulate(*an, static_cast<size_t>(i) * n + j,
                                   inv * (g - mean_g - xh[j] * mean_gx));
                    }
                }
            }
        });
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
    require_2d(table, "embedding");
    check_input_finite(table, "embedding");
    const int v = table.rows(), d = table.cols();
    const int len = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= v) throw ShapeError("embedding: token id out of range");
    }
    std::vector<double> out(static_cast<size_t>(len) * d);
    for (int i = 0; i < len; ++i) {
        const double* src = table.values().data() + static_cast<size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + static_cast<size_t>(i) * d);
    }

    auto ids_copy = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
    Tensor in[] = {table};
    auto tn = table.node();
    return tape.make_output({len, d}, std::move(out), in, "embedding",
                            [tn, ids_copy, d](detail::TensorNode& o) {
                                if (!tn->requires_grad) return;
                                if (tn->grad.empty()) tn->grad.assign(tn->value.size(), 0.0);
                                for (size_t i = 0; i < ids_copy->size(); ++i) {
                                    const double* g = o.grad.data() + i * d;
                                    double* dst = tn->grad.data() +
                                                  static_cast<size_t>((*ids_copy)[i]) * d;
                                    for (int j = 0; j < d; ++j) dst[j] += g[j];
                                }
                            });
}

Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const int> rows) {
    require_2d(a, "gather_rows");
    check_input_finite(a, "gather_rows");
    const int m = a.rows(), n = a.cols();
    for (int r : rows) {
        if (r < 0 || r >= m) throw ShapeError("gather_rows: row index out of range");
    }
    const int len = static_cast<int>(rows.size());
    std::vector<double> out(static_cast<size_t>(len) * n);
    for (int i = 0; i < len; ++i) {
        const double* src = a.values().data() + static_cast<size_t>(rows[i]) * n;
        std::copy(src, src + n, out.data() + static_cast<size_t>(i) * n);
    }

    auto rows_copy = std::make_shared<std::vector<int>>(rows.begin(), rows.end());
    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output({len, n}, std::move(out), in, "gather_rows",
                            [an, rows_copy, n](detail::TensorNode& o) {
                                if (!an->requires_grad) return;
                                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                for (size_t i = 0; i < rows_copy->size(); ++i) {
                                    const double* g = o.grad.data() + i * n;
                                    double* dst = an->grad.data() +
                                                  static_cast<size_t>((*rows_copy)[i]) * n;
                                    for (int j = 0; j < n; ++j) dst[j] += g[j];
                                }
                            });
}

Tensor slice_cols(Tape& tape, const Tensor& a, int begin, int end) {
    require_2d(a, "slice_cols");
    check_input_finite(a, "slice_cols");
    const int m = a.rows(), n = a.cols();
    if (begin < 0 || end > n || begin >= end) throw ShapeError("slice_cols: bad column range");
    const int w = end - begin;
    std::vector<double> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i) {
        const double* src = a.values().data() + static_cast<size_t>(i) * n + begin;
        std::copy(src, src + w, out.data() + static_cast<size_t>(i) * w);
    }

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output({m, w}, std::move(out), in, "slice_cols",
                            [an, begin, m, n, w](detail::TensorNode& o) {
                                if (!an->requires_grad) return;
                                if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
                                for (int i = 0; i < m; ++i) {
                                    const double* g = o.grad.data() + static_cast<size_t>(i) * w;
                                    double* dst =
                                        an->grad.data() + static_cast<size_t>(i) * n + begin;
                                    for (int j = 0; j < w; ++j) dst[j] += g[j];
                                }
                            });
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        require_2d(p, "concat_cols");
        if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
        check_input_finite(p, "concat_cols");
        total += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(m) * total);
    int offset = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i) {
            const double* src = p.values().data() + static_cast<size_t>(i) * w;
            std::copy(src, src + w, out.data() + static_cast<size_t>(i) * total + offset);
        }
        offset += w;
    }

    std::vector<detail::TensorNode*> nodes;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        nodes.push_back(p.node());
        widths.push_back(p.cols());
    }
    return tape.make_output(
        {m, total}, std::move(out), parts, "concat_cols",
        [nodes, widths, m, total](detail::TensorNode& o) {
            int offset = 0;
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                auto* pn = nodes[pi];
                const int w = widths[pi];
                if (pn->requires_grad) {
                    if (pn->grad.empty()) pn->grad.assign(pn->value.size(), 0.0);
                    for (int i = 0; i < m; ++i) {
                        const double* g =
                            o.grad.data() + static_cast<size_t>(i) * total + offset;
                        double* dst = pn->grad.data() + static_cast<size_t>(i) * w;
                        for (int j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                offset += w;
            }
        });
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets) {
    require_2d(logits, "cross_entropy");
    check_input_finite(logits, "cross_entropy");
    const int m = logits.rows(), n = logits.cols();
    if (static_cast<int>(targets.size()) != m) {
        throw ShapeError("cross_entropy: one target per logit row required");
    }
    for (int t : targets) {
        if (t < 0 || t >= n) throw ShapeError("cross_entropy: target index out of range");
    }

    auto probs = std::make_shared<std::vector<double>>(logits.values().size());
    double loss = 0.0;
    for (int i = 0; i < m; ++i) {
        const double* row = logits.values().data() + static_cast<size_t>(i) * n;
        double* prow = probs->data() + static_cast<size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (int j = 0; j < n; ++j) prow[j] /= sum;
        loss += std::log(sum) + mx - row[targets[i]];
    }
    loss /= m;

    auto targets_copy = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    Tensor in[] = {logits};
    auto ln = logits.node();
    return tape.make_output(
        {1}, {loss}, in, "cross_entropy",
        [ln, probs, targets_copy, m, n](detail::TensorNode& o) {
            if (!ln->requires_grad) return;
            if (ln->grad.empty()) ln->grad.assign(ln->value.size(), 0.0);
            const double g = o.grad[0] / m;
            for (int i = 0; i < m; ++i) {
                const double* prow = probs->data() + static_cast<size_t>(i) * n;
                double* drow = ln->grad.data() + static_cast<size_t>(i) * n;
                const int t = (*targets_copy)[i];
                for (int j = 0; j < n; ++j) drow[j] += g * (prow[j] - (j == t ? 1.0 : 0.0));
            }
        });
}

Tensor sum_all(Tape& tape, const Tensor& a) {
    check_input_finite(a, "sum_all");
    double s = 0.0;
    for (double v : a.values()) s += v;

    Tensor in[] = {a};
    auto an = a.node();
    return tape.make_output({1}, {s}, in, "sum_all", [an](detail::TensorNode& o) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->value.size(), 0.0);
        for (size_t i = 0; i < an->grad.size(); ++i) accumulate(*an, i, o.grad[0]);
    });
}

}  // namespace transpeft
