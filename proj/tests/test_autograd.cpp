// SPDX-License-Identifier: Apache-2.0
//
// Autograd oracles: frozen hand arithmetic for forward values, central
// finite differences for every backward rule.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "transpeft/gradcheck.hpp"
#include "transpeft/tensor.hpp"

using namespace transpeft;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
    return Tensor::randn(std::move(shape), rng, stddev);
}

// Reduces an arbitrary tensor to a scalar through a fixed random functional,
// so every op can be gradient-checked through a scalar loss.
Tensor reduce_with_weights(Tape& tape, const Tensor& t, const Tensor& weights) {
    return sum_all(tape, mul(tape, t, weights));
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("matmul identity maps any matrix to itself") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(7);
    Tape tape;
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = random_tensor({3, 3}, rng);
    Tensor out = matmul(tape, eye, a);
    for (int i = 0; i < 9; ++i) CHECK(out.values()[i] == doctest::Approx(a.values()[i]));
}

TEST_CASE("matmul matches hand arithmetic") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(tape, a, b);
    CHECK(c.values() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("softmax of a constant row is uniform") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor x = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(tape, x);
    for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(11);
    Tape tape;
    Tensor x = random_tensor({5, 8}, rng, 3.0);
    Tensor y = softmax_rows(tape, x);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 8; ++j) s += y.values()[i * 8 + j];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("cross entropy of uniform logits equals ln(vocab)") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    const int vocab = 64;
    Tensor logits = Tensor::zeros({1, vocab});
    std::vector<int> target{5};
    Tensor loss = cross_entropy(tape, logits, target);
    CHECK(std::fabs(loss.item() - std::log(double(vocab))) < 1e-6);
}

TEST_CASE("layer norm output has row mean 0 and variance 1") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(3);
    Tape tape;
    const int n = 32;
    Tensor x = random_tensor({4, n}, rng, 2.0);
    Tensor gamma = Tensor::full({n}, 1.0);
    Tensor beta = Tensor::zeros({n});
    Tensor y = layer_norm(tape, x, gamma, beta);
    for (int i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < n; ++j) mean += y.values()[i * n + j];
        mean /= n;
        for (int j = 0; j < n; ++j) {
            double d = y.values()[i * n + j] - mean;
            var += d * d;
        }
        var /= n;
        CHECK(std::fabs(mean) < 1e-9);
        CHECK(std::fabs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("backward of x*c is c and frozen tensors stay gradient-free") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor x = Tensor::from_data({1, 3}, {0.5, -1.25, 2.0}, /*requires_grad=*/true);
    Tensor c = Tensor::from_data({1, 3}, {3.0, -2.0, 0.25});  // frozen
    Tensor loss = sum_all(tape, mul(tape, x, c));
    tape.backward(loss);
    CHECK(x.grad() == c.values());
    CHECK_FALSE(c.has_grad());
    CHECK(c.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward rejects non-scalar loss and consumed tapes") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
    Tensor y = scale(tape, x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
    Tensor loss = sum_all(tape, y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), Error);
}

TEST_CASE("gradients of tensors not reaching the loss stay zero") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
    Tensor unused = Tensor::from_data({1, 2}, {5.0, 5.0}, true);
    Tensor dead_end = scale(tape, unused, 3.0);  // recorded but not part of the loss
    (void)dead_end;
    Tensor loss = sum_all(tape, x);
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 1});
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("random 3-op composite matches finite differences") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(21);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor w = random_tensor({3, 2}, rng);
    auto fwd = [&](Tape& tape, const std::vector<Tensor>& ps) {
        Tensor h = matmul(tape, ps[0], ps[1]);
        Tensor g = activation(tape, h, Nonlinearity::gelu);
        return reduce_with_weights(tape, g, w);
    };
    auto report = grad_check(fwd, {a, b}, 1e-4);
    CHECK(report.passed);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: linear layer tight tolerance") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(5);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor w = random_tensor({6, 3}, rng);
    Tensor bias = random_tensor({3}, rng);
    Tensor mix = random_tensor({4, 3}, rng);
    auto fwd = [&](Tape& tape, const std::vector<Tensor>& ps) {
        return reduce_with_weights(tape, add_bias(tape, matmul(tape, x, ps[0]), ps[1]), mix);
    };
    auto report = grad_check(fwd, {w, bias}, 1e-6);
    CHECK(report.passed);
}

TEST_CASE("grad_check: softmax cross-entropy head") {
    PrecisionGuard guard(Precision::f64);
    Rng rng(9);
    Tensor x = random_tensor({5, 6}, rng);
    Tensor w = random_tensor({6, 7}, rng);
    std::vector<int> targets{0, 3, 6, 2, 5};
    auto fwd = [&](Tape& tape, const std::vector<Tensor>& ps) {
        return cross_entropy(tape, matmul(tape, x, ps[0]), targets);
    };
    auto report = grad_check(fwd, {w}, 1e-4);
    CHECK(report.passed);
}

TEST_CASE("grad_check: zero-parameter graph passes vacuously") {
    PrecisionGuard guard(Precision::f64);
    auto fwd = [](Tape& tape, const std::vector<Tensor>&) {
        return sum_all(tape, Tensor::from_data({1, 2}, {1.0, 2.0}));
    };
    auto report = grad_check(fwd, {}, 1e-6);
    CHECK(report.passed);
    CHECK(report.params.empty());
}

// One finite-difference sweep per registered op over randomized shapes/seeds.
TEST_CASE("every op passes finite-difference checks on 20 random configs") {
    PrecisionGuard guard(Precision::f64);
    for (uint64_t cfg = 0; cfg < 20; ++cfg) {
        Rng rng(Rng::derive(1234, {cfg}));
        const int m = 2 + static_cast<int>(rng.below(4));
        const int k = 2 + static_cast<int>(rng.below(4));
        const int n = 2 + static_cast<int>(rng.below(4));

        auto check = [&](const char* what, const ForwardFn& fwd, std::vector<Tensor> params) {
            auto report = grad_check(fwd, std::move(params), 1e-4);
            INFO("op = " << what << ", config = " << cfg);
            CHECK(report.passed);
        };

        {
            Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
            Tensor w = random_tensor({m, n}, rng);
            check("matmul",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, matmul(t, ps[0], ps[1]), w);
                  },
                  {a, b});
        }
        {
            Tensor a = random_tensor({m, n}, rng);
            Tensor w = random_tensor({n, m}, rng);
            check("transpose",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, transpose(t, ps[0]), w);
                  },
                  {a});
        }
        {
            Tensor a = random_tensor({m, n}, rng), b = random_tensor({m, n}, rng);
            Tensor w = random_tensor({m, n}, rng);
            check("add",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, add(t, ps[0], ps[1]), w);
                  },
                  {a, b});
            check("mul",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, mul(t, ps[0], ps[1]), w);
                  },
                  {a, b});
            check("scale",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, scale(t, ps[0], -1.7), w);
                  },
                  {a});
        }
        {
            Tensor a = random_tensor({m, n}, rng);
            Tensor bias = random_tensor({n}, rng);
            Tensor w = random_tensor({m, n}, rng);
            check("add_bias",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, add_bias(t, ps[0], ps[1]), w);
                  },
                  {a, bias});
        }
        for (auto kind : {Nonlinearity::relu, Nonlinearity::gelu, Nonlinearity::silu}) {
            // Keep ReLU inputs away from the non-differentiable kink at 0.
            Tensor a = random_tensor({m, n}, rng);
            if (kind == Nonlinearity::relu) {
                for (double& v : a.values()) {
                    if (std::fabs(v) < 1e-2) v += v >= 0 ? 0.05 : -0.05;
                }
            }
            Tensor w = random_tensor({m, n}, rng);
            check(to_string(kind),
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, activation(t, ps[0], kind), w);
                  },
                  {a});
        }
        {
            Tensor a = random_tensor({m, n}, rng, 2.0);
            Tensor w = random_tensor({m, n}, rng);
            check("softmax_rows",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, softmax_rows(t, ps[0]), w);
                  },
                  {a});
        }
        {
            Tensor a = random_tensor({m, n}, rng);
            Tensor gamma = random_tensor({n}, rng);
            Tensor beta = random_tensor({n}, rng);
            Tensor w = random_tensor({m, n}, rng);
            check("layer_norm",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, layer_norm(t, ps[0], ps[1], ps[2]), w);
                  },
                  {a, gamma, beta});
        }
        {
            const int vocab = 5 + static_cast<int>(rng.below(4));
            Tensor table = random_tensor({vocab, n}, rng);
            std::vector<int> ids;
            for (int i = 0; i < m; ++i) ids.push_back(static_cast<int>(rng.below(vocab)));
            Tensor w = random_tensor({m, n}, rng);
            check("embedding",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, embedding(t, ps[0], ids), w);
                  },
                  {table});
        }
        {
            Tensor a = random_tensor({m, n}, rng);
            std::vector<int> rows;
            for (int i = 0; i < m + 1; ++i) rows.push_back(static_cast<int>(rng.below(m)));
            Tensor w = random_tensor({m + 1, n}, rng);
            check("gather_rows",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, gather_rows(t, ps[0], rows), w);
                  },
                  {a});
        }
        {
            const int wide = n + 2;
            Tensor a = random_tensor({m, wide}, rng);
            Tensor w = random_tensor({m, n}, rng);
            check("slice_cols",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return reduce_with_weights(t, slice_cols(t, ps[0], 1, 1 + n), w);
                  },
                  {a});
        }
        {
            Tensor a = random_tensor({m, n}, rng), b = random_tensor({m, k}, rng);
            Tensor w = random_tensor({m, n + k}, rng);
            check("concat_cols",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      std::vector<Tensor> parts{ps[0], ps[1]};
                      return reduce_with_weights(t, concat_cols(t, parts), w);
                  },
                  {a, b});
        }
        {
            Tensor logits = random_tensor({m, n}, rng, 2.0);
            std::vector<int> targets;
            for (int i = 0; i < m; ++i) targets.push_back(static_cast<int>(rng.below(n)));
            check("cross_entropy",
                  [&](Tape& t, const std::vector<Tensor>& ps) {
                      return cross_entropy(t, ps[0], targets);
                  },
                  {logits});
        }
        {
            Tensor a = random_tensor({m, n}, rng);
            check("sum_all",
                  [&](Tape& t, const std::vector<Tensor>& ps) { return sum_all(t, ps[0]); },
                  {a});
        }
    }
}

TEST_CASE("identical seed and op sequence is bit-identical") {
    PrecisionGuard guard(Precision::f32);
    auto run = [] {
        Rng rng(42);
        Tape tape;
        Tensor a = Tensor::randn({4, 4}, rng, 1.0);
        Tensor b = Tensor::randn({4, 4}, rng, 1.0);
        Tensor y = activation(tape, matmul(tape, a, b), Nonlinearity::silu);
        return y.values();
    };
    CHECK(run() == run());
}

TEST_CASE("shape and range errors") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS(matmul(tape, a, b), ShapeError);
    std::vector<int> bad_target{99};
    Tensor logits = Tensor::zeros({1, 4});
    CHECK_THROWS_AS(cross_entropy(tape, logits, bad_target), ShapeError);
    std::vector<int> bad_id{7};
    Tensor table = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(embedding(tape, table, bad_id), ShapeError);
}

TEST_CASE("non-finite inputs are rejected") {
    PrecisionGuard guard(Precision::f64);
    Tape tape;
    Tensor a = Tensor::from_data({1, 2}, {1.0, 2.0});
    a.values()[0] = std::nan("");
    Tensor b = Tensor::from_data({1, 2}, {1.0, 2.0});
    CHECK_THROWS_AS(add(tape, a, b), NonFiniteError);
}

}  // TEST_SUITE
