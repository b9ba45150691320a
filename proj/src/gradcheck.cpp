#include "fsr/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fsr {

double gradient_rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<NamedTensor>& params, double step, double tolerance) {
    if (!(step > 0.0)) throw TensorError("gradcheck: step must be positive");

    GradcheckReport report;
    report.tolerance = tolerance;

    std::vector<Tensor> leaves;
    std::vector<bool> saved_flags;
    for (const auto& p : params) {
        leaves.push_back(p.tensor);
        saved_flags.push_back(p.tensor.requires_grad());
        leaves.back().set_requires_grad(true);
        leaves.back().zero_grad();
    }

    Tape::current().clear();
    const Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) report.finite = false;
    backward(loss);

    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& leaf = leaves[k];
        ParamCheck check;
        check.name = params[k].name;
        std::vector<double> analytic(leaf.numel(), 0.0);
        if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

        auto values = leaf.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double original = values[i];
            double plus = 0.0;
            double minus = 0.0;
            {
                NoGradGuard no_grad;
                values[i] = original + step;
                plus = loss_fn().item();
                values[i] = original - step;
                minus = loss_fn().item();
            }
            values[i] = original;
            const double numeric = (plus - minus) / (2.0 * step);
            if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
                check.finite = false;
                continue;
            }
            const double rel = gradient_rel_error(analytic[i], numeric);
            const double abs_err = std::abs(analytic[i] - numeric);
            if (rel > check.max_rel_error) {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
            check.max_abs_error = std::max(check.max_abs_error, abs_err);
        }
        report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
        report.finite = report.finite && check.finite;
        report.params.push_back(std::move(check));
    }

    for (std::size_t k = 0; k < leaves.size(); ++k) {
        leaves[k].zero_grad();
        leaves[k].set_requires_grad(saved_flags[k]);
    }
    report.passed = report.finite && report.max_rel_error < tolerance;
    return report;
}

}  // namespace fsr
