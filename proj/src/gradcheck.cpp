// SPDX-License-Identifier: Apache-2.0

#include "transpeft/gradcheck.hpp"

#include <cmath>

namespace transpeft {

GradCheckReport grad_check(const ForwardFn& forward, std::vector<Tensor> params,
                           double tolerance, double step,
                           const std::vector<std::string>& names) {
    size_t total = 0;
    for (auto& p : params) {
        p.set_requires_grad(true);
        total += static_cast<size_t>(p.numel());
    }
    if (total > 1000) throw Error("grad_check: too many parameters for finite differences");

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = forward(tape, params);
        loss.check_finite("grad_check loss");
        tape.backward(loss);
        for (auto& p : params) analytic.push_back(p.grad());
        for (auto& p : params) p.zero_grad();
    }

    auto eval = [&](const std::vector<Tensor>& ps) {
        Tape tape;
        Tensor loss = forward(tape, ps);
        double v = loss.item();
        if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite intermediate");
        return v;
    };

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        GradCheckReport::ParamResult pr;
        pr.name = pi < names.size() ? names[pi] : "param" + std::to_string(pi);
        auto& vals = params[pi].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + step;
            const double up = eval(params);
            vals[i] = saved - step;
            const double down = eval(params);
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[pi][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
            const double rel = std::fabs(a - numeric) / denom;
            pr.max_rel_error = std::max(pr.max_rel_error, rel);
        }
        report.max_rel_error = std::max(report.max_rel_error, pr.max_rel_error);
        report.params.push_back(std::move(pr));
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

}  // namespace transpeft
