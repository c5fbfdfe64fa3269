#ifndef LEAKLAB_MATRIX_HPP
#define LEAKLAB_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "leaklab/errors.hpp"
#include "leaklab/rng.hpp"

namespace leaklab {

// Dense row-major 2-D array of doubles. The single numeric carrier for
// weights, activations, and gradients.
class Matrix {
public:
    Matrix() = default;

    Matrix(int rows, int cols, double fill = 0.0) : rows_(rows), cols_(cols) {
        if (rows <= 0 || cols <= 0) {
            throw ShapeError("Matrix dimensions must be positive, got " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
        data_.assign(static_cast<size_t>(rows) * cols, fill);
    }

    Matrix(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (rows <= 0 || cols <= 0 || data_.size() != static_cast<size_t>(rows) * cols) {
            throw ShapeError("Matrix data length does not match " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    static Matrix randn(int rows, int cols, double stddev, Rng& rng) {
        Matrix m(rows, cols);
        for (double& x : m.data_) x = stddev * rng.normal();
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int i, int j) { return data_[static_cast<size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<size_t>(i) * cols_ + j]; }

    double* row(int i) { return data_.data() + static_cast<size_t>(i) * cols_; }
    const double* row(int i) const { return data_.data() + static_cast<size_t>(i) * cols_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

    void fill(double v) { data_.assign(data_.size(), v); }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite values in " + what);
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------- products

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
    }
    Matrix c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i);
        double* ci = c.row(i);
        for (int l = 0; l < a.cols(); ++l) {
            const double s = ai[l];
            if (s == 0.0) continue;
            const double* bl = b.row(l);
            for (int j = 0; j < b.cols(); ++j) ci[j] += s * bl[j];
        }
    }
    return c;
}

inline Matrix outer(const std::vector<double>& v, const std::vector<double>& k) {
    if (v.empty() || k.empty()) throw ShapeError("outer product of empty vector");
    Matrix m(static_cast<int>(v.size()), static_cast<int>(k.size()));
    for (size_t i = 0; i < v.size(); ++i) {
        double* mi = m.row(static_cast<int>(i));
        for (size_t j = 0; j < k.size(); ++j) mi[j] = v[i] * k[j];
    }
    return m;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// ------------------------------------------------------------------- norms

inline double l2_norm(const double* x, size_t n) {
    if (n == 0) throw ShapeError("l2_norm of empty input");
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += x[i] * x[i];
    return std::sqrt(s);
}

inline double l2_norm(const std::vector<double>& x) { return l2_norm(x.data(), x.size()); }

inline double l2_norm(const Matrix& m) {
    if (m.empty()) throw ShapeError("l2_norm of empty matrix");
    return l2_norm(m.data(), m.size());
}

// ------------------------------------------------------- linear-layer kernels
//
// Linear layers use the (out, in) weight convention: y = x * W^T + b with
// x: L x in, W: out x in. The three kernels below are the training hot path.

// y(L x out) = x(L x in) * W^T + b(1 x out); b may be null. Runs against a
// transposed weight copy so the inner loop is a contiguous broadcast the
// compiler can vectorize without reassociation.
inline void linear_forward(const Matrix& x, const Matrix& w, const Matrix* b, Matrix& y) {
    if (x.cols() != w.cols()) {
        throw ShapeError("linear_forward: " + x.shape_str() + " vs weight " + w.shape_str());
    }
    const int L = x.rows(), out = w.rows(), in = w.cols();
    Matrix wt = transpose(w); // in x out
    y = Matrix(L, out);
    for (int i = 0; i < L; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        if (b) {
            const double* bb = b->row(0);
            std::copy(bb, bb + out, yi);
        }
        for (int l = 0; l < in; ++l) {
            const double s = xi[l];
            const double* wl = wt.row(l);
            for (int o = 0; o < out; ++o) yi[o] += s * wl[o];
        }
    }
}

// dx(L x in) += dy(L x out) * W(out x in)
inline void linear_backward_input(const Matrix& dy, const Matrix& w, Matrix& dx) {
    const int L = dy.rows(), out = w.rows(), in = w.cols();
    if (dx.rows() != L || dx.cols() != in || dy.cols() != out) {
        throw ShapeError("linear_backward_input shape mismatch");
    }
    for (int i = 0; i < L; ++i) {
        const double* di = dy.row(i);
        double* xi = dx.row(i);
        for (int o = 0; o < out; ++o) {
            const double g = di[o];
            if (g == 0.0) continue;
            const double* wo = w.row(o);
            for (int l = 0; l < in; ++l) xi[l] += g * wo[l];
        }
    }
}

// dW(out x in) += dy^T * x;  db(1 x out) += column sums of dy (db may be null).
inline void linear_backward_weight(const Matrix& dy, const Matrix& x, Matrix& dw, Matrix* db) {
    const int L = dy.rows(), out = dy.cols(), in = x.cols();
    if (dw.rows() != out || dw.cols() != in || x.rows() != L) {
        throw ShapeError("linear_backward_weight shape mismatch");
    }
    for (int i = 0; i < L; ++i) {
        const double* di = dy.row(i);
        const double* xi = x.row(i);
        for (int o = 0; o < out; ++o) {
            const double g = di[o];
            if (g == 0.0) continue;
            double* wo = dw.row(o);
            for (int l = 0; l < in; ++l) wo[l] += g * xi[l];
        }
        if (db) {
            double* bb = db->row(0);
            for (int o = 0; o < out; ++o) bb[o] += di[o];
        }
    }
}

} // namespace leaklab

#endif
