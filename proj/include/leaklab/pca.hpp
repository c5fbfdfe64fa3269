#ifndef LEAKLAB_PCA_HPP
#define LEAKLAB_PCA_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "leaklab/errors.hpp"
#include "leaklab/matrix.hpp"

namespace leaklab {

struct PcaResult {
    Matrix components;                            // k x d, rows orthonormal
    std::vector<double> explained_variance_ratio; // k values, non-increasing
    std::vector<double> mean;                     // d, used for centering

    // (x - mean) * components^T for a batch of points.
    Matrix project(const Matrix& points) const {
        if (points.cols() != static_cast<int>(mean.size())) {
            throw ShapeError("pca project: points " + points.shape_str() + " vs mean dim " +
                             std::to_string(mean.size()));
        }
        Matrix centered(points.rows(), points.cols());
        for (int i = 0; i < points.rows(); ++i)
            for (int j = 0; j < points.cols(); ++j) centered(i, j) = points(i, j) - mean[j];
        return matmul(centered, transpose(components));
    }
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues
// descending with matching eigenvector rows. d is tiny here (<= a few dozen),
// so O(d^3) sweeps are plenty.
inline void jacobi_eigen_symmetric(Matrix a, std::vector<double>& eigvals, Matrix& eigvecs) {
    const int d = a.rows();
    if (a.cols() != d) throw ShapeError("jacobi_eigen_symmetric: matrix not square");
    eigvecs = Matrix(d, d);
    for (int i = 0; i < d; ++i) eigvecs(i, i) = 1.0;

    double frob = l2_norm(a);
    const double tol = (frob > 0.0) ? 1e-14 * frob : 0.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += a(p, q) * a(p, q);
        if (std::sqrt(2.0 * off) <= tol) break;

        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                // Rotate rows/cols p and q of a, accumulate rotation in eigvecs.
                for (int i = 0; i < d; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < d; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < d; ++i) {
                    const double vpi = eigvecs(p, i), vqi = eigvecs(q, i);
                    eigvecs(p, i) = c * vpi - s * vqi;
                    eigvecs(q, i) = s * vpi + c * vqi;
                }
            }
        }
    }

    eigvals.resize(d);
    for (int i = 0; i < d; ++i) eigvals[i] = a(i, i);
    std::vector<int> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int x, int y) { return eigvals[x] > eigvals[y]; });
    std::vector<double> sorted_vals(d);
    Matrix sorted_vecs(d, d);
    for (int i = 0; i < d; ++i) {
        sorted_vals[i] = eigvals[order[i]];
        for (int j = 0; j < d; ++j) sorted_vecs(i, j) = eigvecs(order[i], j);
    }
    eigvals = std::move(sorted_vals);
    eigvecs = std::move(sorted_vecs);
}

} // namespace detail

// Top-k principal components of the points' covariance. Zero-variance data
// yields all ratios 0 with arbitrary orthonormal components.
inline PcaResult pca_fit(const Matrix& points, int k) {
    const int n = points.rows(), d = points.cols();
    if (n < 2) throw ArgumentError("pca_fit needs at least 2 points, got " + std::to_string(n));
    if (k < 1 || k > std::min(n, d)) {
        throw ArgumentError("pca_fit: k=" + std::to_string(k) + " out of range for " +
                            points.shape_str());
    }

    PcaResult res;
    res.mean.assign(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) res.mean[j] += points(i, j);
    for (double& m : res.mean) m /= n;

    Matrix cov(d, d);
    for (int i = 0; i < n; ++i) {
        for (int a = 0; a < d; ++a) {
            const double xa = points(i, a) - res.mean[a];
            for (int b = 0; b < d; ++b) cov(a, b) += xa * (points(i, b) - res.mean[b]);
        }
    }
    for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) cov(a, b) /= (n - 1);

    std::vector<double> eigvals;
    Matrix eigvecs;
    detail::jacobi_eigen_symmetric(cov, eigvals, eigvecs);

    double total = 0.0;
    for (double& ev : eigvals) {
        if (ev < 0.0) ev = 0.0; // numerical noise on PSD matrices
        total += ev;
    }
    res.components = Matrix(k, d);
    res.explained_variance_ratio.resize(k);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < d; ++j) res.components(i, j) = eigvecs(i, j);
        res.explained_variance_ratio[i] = (total > 0.0) ? eigvals[i] / total : 0.0;
    }
    return res;
}

} // namespace leaklab

#endif
