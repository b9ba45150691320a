#pragma once

#include "fsr/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fsr {

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
};

struct GradcheckReport {
    std::vector<ParamCheck> params;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool finite = true;
    bool passed = false;
};

/// Relative error used throughout: |a - n| / max(|a|, |n|, 1e-6).
double gradient_rel_error(double analytic, double numeric);

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must rebuild the loss from the current parameter values on every
/// call and be deterministic.
GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<NamedTensor>& params, double step = 1e-5,
                          double tolerance = 1e-4);

}  // namespace fsr
