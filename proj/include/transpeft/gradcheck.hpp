// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference validation of analytic gradients. The forward functor
// must rebuild its graph on the supplied tape from the given parameters and
// return a scalar loss; central differences are O(n) forwards, so keep the
// parameter count small (<= 1e3).

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "transpeft/tensor.hpp"

namespace transpeft {

struct GradCheckReport {
    struct ParamResult {
        std::string name;
        double max_rel_error = 0.0;
    };
    bool passed = true;
    double max_rel_error = 0.0;
    std::vector<ParamResult> params;
};

using ForwardFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6);
// the floor keeps central-difference noise on true-zero gradients from
// registering as a large relative error.
GradCheckReport grad_check(const ForwardFn& forward, std::vector<Tensor> params,
                           double tolerance, double step = 1e-5,
                           const std::vector<std::string>& names = {});

}  // namespace transpeft
