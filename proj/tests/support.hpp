#pragma once

// Test-only helpers: central-finite-difference gradient oracle and relative
// error reporting. Kept independent of the autodiff path it checks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace testsupport {

// d f / d x_i via central differences. `f` must be a pure function of x.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h) {
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double f_plus = f(x);
        x[i] = saved - h;
        const double f_minus = f(x);
        x[i] = saved;
        grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    return grad;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_rel_err(const std::vector<double>& analytic, const std::vector<double>& numeric,
                          double floor = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace testsupport
