#ifndef LEAKLAB_ADAM_HPP
#define LEAKLAB_ADAM_HPP

#include <cmath>
#include <cstdint>
#include <string>

#include "leaklab/errors.hpp"
#include "leaklab/matrix.hpp"

namespace leaklab {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// First/second moment estimates for one parameter tensor.
struct AdamMoments {
    Matrix m;
    Matrix v;

    static AdamMoments zeros_like(const Matrix& p) {
        AdamMoments mo;
        mo.m = Matrix(p.rows(), p.cols());
        mo.v = Matrix(p.rows(), p.cols());
        return mo;
    }
};

// One bias-corrected Adam update; `step` counts from 1.
inline void adam_step(Matrix& params, const Matrix& grads, AdamMoments& mo, int64_t step,
                      const AdamConfig& cfg = {}) {
    if (params.rows() != grads.rows() || params.cols() != grads.cols() ||
        params.rows() != mo.m.rows() || params.cols() != mo.m.cols() ||
        params.rows() != mo.v.rows() || params.cols() != mo.v.cols()) {
        throw ShapeError("adam_step: params " + params.shape_str() + ", grads " + grads.shape_str() +
                         ", moments " + mo.m.shape_str());
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    double* p = params.data();
    const double* g = grads.data();
    double* m = mo.m.data();
    double* v = mo.v.data();
    const size_t n = params.size();
    for (size_t i = 0; i < n; ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

} // namespace leaklab

#endif
