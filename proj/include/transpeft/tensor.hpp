// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over dense row-major arrays.
//
// Tensors are cheap handles onto shared nodes. Ops execute eagerly, snap
// their outputs to the run precision, and append a backward rule to the
// Tape when any input requires a gradient. A tape is rebuilt per forward
// pass and consumed by a single backward() call.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "transpeft/common.hpp"

namespace transpeft {

enum class Nonlinearity { relu, gelu, silu };

const char* to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& s);

namespace detail {
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily; empty means "no gradient yet"
    bool requires_grad = false;
};
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    // Entries ~ N(0, stddev^2), snapped to run precision.
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    // Gradient of a tensor never reached by backward reads as all zeros.
    std::vector<double> grad() const;
    std::vector<double>& grad_buffer();  // allocates zeros on first use
    void zero_grad() { node_->grad.clear(); }

    // Snaps current values to the run precision (used after external writes).
    void snap_values();

    void check_finite(const char* what) const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    detail::TensorNode* node() const { return node_.get(); }

    // Deep copy of values/shape; gradient state is not copied.
    Tensor clone() const;

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend class Tape;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Reverse sweep from a scalar loss. Each recorded op runs at most once,
    // and only if its output actually received a gradient.
    void backward(const Tensor& loss);

    size_t num_ops() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    // --- internal: op recording -------------------------------------------
    Tensor make_output(std::vector<int> shape, std::vector<double> value,
                       std::span<const Tensor> inputs, const char* op_name,
                       std::function<void(detail::TensorNode&)> backward_fn);

private:
    struct Step {
        std::vector<std::shared_ptr<detail::TensorNode>> inputs;
        std::shared_ptr<detail::TensorNode> output;
        std::function<void(detail::TensorNode&)> backward_fn;
    };
    std::vector<Step> steps_;
    bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Ops. 2-D shapes are (rows x cols), 1-D shapes are flat vectors.
// ---------------------------------------------------------------------------

// (m x k) @ (k x n) -> (m x n)
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// (m x n) -> (n x m)
Tensor transpose(Tape& tape, const Tensor& a);
// Elementwise; shapes must match exactly.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
// a * c for a plain scalar c.
Tensor scale(Tape& tape, const Tensor& a, double c);
// (m x n) + bias(n), broadcast over the leading axis. The only broadcast.
Tensor add_bias(Tape& tape, const Tensor& a, const Tensor& bias);
Tensor activation(Tape& tape, const Tensor& a, Nonlinearity kind);
// Row-wise softmax over a (m x n) tensor.
Tensor softmax_rows(Tape& tape, const Tensor& a);
// Per-row normalization to mean 0 / variance 1, then gamma * x + beta.
Tensor layer_norm(Tape& tape, const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// table (v x d), ids in [0, v) -> (len(ids) x d)
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids);
// Row gather from a (m x n) tensor.
Tensor gather_rows(Tape& tape, const Tensor& a, std::span<const int> rows);
// Column slice [begin, end) of a (m x n) tensor.
Tensor slice_cols(Tape& tape, const Tensor& a, int begin, int end);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
// Mean over rows of -log softmax(logits)[target]; scalar output (shape {1}).
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets);
Tensor sum_all(Tape& tape, const Tensor& a);

// Toggles the per-op finite checks (on by default).
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

}  // namespace transpeft
