#ifndef LEAKLAB_GRADCHECK_HPP
#define LEAKLAB_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "leaklab/errors.hpp"

namespace leaklab {

// A scalar function bundled with its analytic gradient.
struct DifferentiableScalar {
    std::function<double(const std::vector<double>&)> value;
    std::function<std::vector<double>(const std::vector<double>&)> gradient;
};

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const DifferentiableScalar& f, std::vector<double> x, double eps) {
    if (eps <= 0.0) throw ArgumentError("grad_check: eps must be positive");
    const std::vector<double> analytic = f.gradient(x);
    if (analytic.size() != x.size()) throw ShapeError("grad_check: gradient size mismatch");

    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double fp = f.value(x);
        x[i] = orig - eps;
        const double fm = f.value(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite function value");
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace leaklab

#endif
