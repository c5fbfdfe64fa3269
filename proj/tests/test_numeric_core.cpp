#include <doctest.h>

#include <cmath>
#include <vector>

#include "leaklab/adam.hpp"
#include "leaklab/gradcheck.hpp"
#include "leaklab/matrix.hpp"
#include "leaklab/pca.hpp"
#include "leaklab/rng.hpp"

using namespace leaklab;

namespace {

Matrix random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

// Test-side eigensolver: power iteration with deflation, independent of the
// Jacobi implementation under test.
std::pair<std::vector<double>, Matrix> power_iteration_eigen(Matrix a, int k) {
    const int d = a.rows();
    std::vector<double> vals;
    Matrix vecs(k, d);
    Rng rng(7);
    for (int comp = 0; comp < k; ++comp) {
        std::vector<double> v(static_cast<size_t>(d));
        for (double& x : v) x = rng.normal();
        double lambda = 0.0;
        for (int it = 0; it < 20000; ++it) {
            std::vector<double> w(static_cast<size_t>(d), 0.0);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) w[static_cast<size_t>(i)] += a(i, j) * v[static_cast<size_t>(j)];
            const double n = l2_norm(w);
            if (n == 0.0) break;
            for (int i = 0; i < d; ++i) v[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] / n;
            lambda = n;
        }
        // Rayleigh quotient for the signed eigenvalue.
        double num = 0.0;
        for (int i = 0; i < d; ++i) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += a(i, j) * v[static_cast<size_t>(j)];
            num += v[static_cast<size_t>(i)] * acc;
        }
        lambda = num;
        vals.push_back(lambda);
        for (int i = 0; i < d; ++i) vecs(comp, i) = v[static_cast<size_t>(i)];
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) a(i, j) -= lambda * v[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];
    }
    return {vals, vecs};
}

} // namespace

TEST_CASE("matmul basics") {
    Matrix id(2, 2);
    id(0, 0) = id(1, 1) = 1.0;
    Matrix m(2, 2, {3.0, -1.0, 2.0, 0.5});
    CHECK(matmul(id, m) == m);

    Matrix a(2, 2, {1, 2, 3, 4});
    Matrix b(2, 1, {5, 6});
    Matrix c = matmul(a, b);
    CHECK(c(0, 0) == doctest::Approx(17));
    CHECK(c(1, 0) == doctest::Approx(39));

    Matrix bad(2, 3, std::vector<double>(6, 0.0));
    CHECK_THROWS_WITH_AS((void)matmul(bad, bad), doctest::Contains("2x3"), ShapeError);
}

TEST_CASE("matmul associativity within 1e-9 relative") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix a = random_matrix(4, 6, rng);
        Matrix b = random_matrix(6, 3, rng);
        Matrix c = random_matrix(3, 5, rng);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        const double scale = l2_norm(left);
        for (size_t i = 0; i < left.size(); ++i) {
            CHECK(std::abs(left.data()[i] - right.data()[i]) <= 1e-9 * std::max(1.0, scale));
        }
    }
}

TEST_CASE("outer product") {
    Matrix m = outer({1, 2}, {3, 4});
    CHECK(m(0, 0) == 3);
    CHECK(m(0, 1) == 4);
    CHECK(m(1, 0) == 6);
    CHECK(m(1, 1) == 8);

    Matrix z = outer({0, 0, 0}, {1, 2});
    CHECK(l2_norm(z) == 0.0);

    Matrix one = outer({1}, {1});
    CHECK(one.rows() == 1);
    CHECK(one(0, 0) == 1.0);

    CHECK_THROWS_AS((void)outer({}, {1.0}), ShapeError);
}

TEST_CASE("outer product is rank one: 2x2 minors vanish") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> v(5), k(7);
        for (double& x : v) x = rng.normal();
        for (double& x : k) x = rng.normal();
        Matrix m = outer(v, k);
        double scale = 0.0;
        for (size_t i = 0; i < m.size(); ++i) scale = std::max(scale, std::abs(m.data()[i]));
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j)
                for (int i2 = i + 1; i2 < m.rows(); ++i2)
                    for (int j2 = j + 1; j2 < m.cols(); ++j2) {
                        const double minor = m(i, j) * m(i2, j2) - m(i, j2) * m(i2, j);
                        CHECK(std::abs(minor) <= 1e-9 * scale * scale);
                    }
    }
}

TEST_CASE("l2_norm") {
    CHECK(l2_norm(std::vector<double>{3, 4}) == doctest::Approx(5));
    CHECK(l2_norm(std::vector<double>{0, 0, 0}) == 0.0);
    CHECK(l2_norm(std::vector<double>{-2.5}) == doctest::Approx(2.5));
    CHECK_THROWS_AS((void)l2_norm(std::vector<double>{}), ShapeError);
}

TEST_CASE("rng determinism and splitting") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    Rng s1 = c.split(1), s2 = c.split(2);
    CHECK(s1.next_u64() != s2.next_u64());

    Rng d(42);
    Rng s1_again = d.split(1);
    Rng s1_ref = Rng(42).split(1);
    CHECK(s1_again.next_u64() == s1_ref.next_u64());

    Rng u(7);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}

TEST_CASE("adam: zero gradient leaves params unchanged") {
    Matrix p(2, 2, {1, 2, 3, 4});
    Matrix g(2, 2);
    AdamMoments mo = AdamMoments::zeros_like(p);
    Matrix before = p;
    adam_step(p, g, mo, 1);
    CHECK(p == before);
}

TEST_CASE("adam: first step moves a scalar by about lr") {
    Matrix p(1, 1, {0.0});
    Matrix g(1, 1, {1.0});
    AdamMoments mo = AdamMoments::zeros_like(p);
    AdamConfig cfg;
    cfg.lr = 0.1;
    adam_step(p, g, mo, 1, cfg);
    // bias-corrected mhat = vhat = 1 at t=1, so the step is lr/(1+eps)
    CHECK(p(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("adam: identical params with identical grads stay identical") {
    Matrix p(1, 2, {0.5, 0.5});
    AdamMoments mo = AdamMoments::zeros_like(p);
    Rng rng(5);
    for (int step = 1; step <= 10; ++step) {
        const double gv = rng.normal();
        Matrix g(1, 2, {gv, gv});
        adam_step(p, g, mo, step);
        CHECK(p(0, 0) == p(0, 1));
    }
    CHECK_THROWS_AS(adam_step(p, Matrix(2, 2), mo, 11), ShapeError);
}

TEST_CASE("pca: collinear points give ratio 1 along the line") {
    Matrix pts(4, 2);
    for (int i = 0; i < 4; ++i) {
        pts(i, 0) = i * 2.0;
        pts(i, 1) = i * 1.0;
    }
    PcaResult r = pca_fit(pts, 2);
    CHECK(r.explained_variance_ratio[0] == doctest::Approx(1.0));
    CHECK(r.explained_variance_ratio[1] == doctest::Approx(0.0).epsilon(1e-9));
    // first component parallel to (2,1)/sqrt(5)
    const double dot = std::abs(r.components(0, 0) * 2.0 + r.components(0, 1) * 1.0) / std::sqrt(5.0);
    CHECK(dot == doctest::Approx(1.0));
}

TEST_CASE("pca: isotropic cross splits variance evenly") {
    Matrix pts(4, 2);
    pts(0, 0) = 1;
    pts(1, 0) = -1;
    pts(2, 1) = 1;
    pts(3, 1) = -1;
    PcaResult r = pca_fit(pts, 2);
    CHECK(r.explained_variance_ratio[0] == doctest::Approx(0.5));
    CHECK(r.explained_variance_ratio[1] == doctest::Approx(0.5));
}

TEST_CASE("pca matches power-iteration oracle on random data") {
    Rng rng(19);
    Matrix pts = random_matrix(10, 3, rng);
    PcaResult r = pca_fit(pts, 3);

    // Oracle: covariance + power iteration with deflation.
    std::vector<double> mean(3, 0.0);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 3; ++j) mean[static_cast<size_t>(j)] += pts(i, j);
    for (double& m : mean) m /= 10;
    Matrix cov(3, 3);
    for (int i = 0; i < 10; ++i)
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                cov(a, b) += (pts(i, a) - mean[static_cast<size_t>(a)]) *
                             (pts(i, b) - mean[static_cast<size_t>(b)]) / 9.0;
    auto [vals, vecs] = power_iteration_eigen(cov, 3);

    double total = vals[0] + vals[1] + vals[2];
    for (int c = 0; c < 3; ++c) {
        CHECK(r.explained_variance_ratio[static_cast<size_t>(c)] ==
              doctest::Approx(vals[static_cast<size_t>(c)] / total).epsilon(1e-6));
        // match up to sign
        double dot = 0.0;
        for (int j = 0; j < 3; ++j) dot += r.components(c, j) * vecs(c, j);
        CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("pca: components orthonormal, k=d reconstruction, zero variance") {
    Rng rng(23);
    Matrix pts = random_matrix(12, 4, rng);
    PcaResult r = pca_fit(pts, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double dot = 0.0;
            for (int t = 0; t < 4; ++t) dot += r.components(i, t) * r.components(j, t);
            CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-8));
        }
    double ratio_sum = 0.0;
    for (int i = 0; i < 4; ++i) {
        ratio_sum += r.explained_variance_ratio[static_cast<size_t>(i)];
        if (i > 0) {
            CHECK(r.explained_variance_ratio[static_cast<size_t>(i)] <=
                  r.explained_variance_ratio[static_cast<size_t>(i - 1)] + 1e-12);
        }
    }
    CHECK(ratio_sum <= 1.0 + 1e-9);

    // project then reconstruct with k = d
    Matrix proj = r.project(pts);
    Matrix recon = matmul(proj, r.components);
    for (int i = 0; i < pts.rows(); ++i)
        for (int j = 0; j < 4; ++j) {
            CHECK(recon(i, j) + r.mean[static_cast<size_t>(j)] == doctest::Approx(pts(i, j)).epsilon(1e-8));
        }

    Matrix constant(5, 3, std::vector<double>(15, 2.5));
    PcaResult z = pca_fit(constant, 2);
    CHECK(z.explained_variance_ratio[0] == 0.0);
    CHECK(z.explained_variance_ratio[1] == 0.0);

    CHECK_THROWS_AS((void)pca_fit(constant, 4), ArgumentError);
    CHECK_THROWS_AS((void)pca_fit(Matrix(1, 3), 1), ArgumentError);
}

TEST_CASE("grad_check: quadratic, constant, and softmax cross-entropy") {
    DifferentiableScalar square{
        [](const std::vector<double>& x) { return x[0] * x[0]; },
        [](const std::vector<double>& x) { return std::vector<double>{2.0 * x[0]}; }};
    CHECK(grad_check(square, {3.0}, 1e-6) < 1e-7);

    DifferentiableScalar constant{
        [](const std::vector<double>&) { return 1.25; },
        [](const std::vector<double>& x) { return std::vector<double>(x.size(), 0.0); }};
    CHECK(grad_check(constant, {0.1, -0.2}, 1e-5) == 0.0);

    // softmax cross-entropy on a random 4-logit input, target class 2
    const int target = 2;
    DifferentiableScalar ce{
        [&](const std::vector<double>& x) {
            double mx = x[0];
            for (double v : x) mx = std::max(mx, v);
            double denom = 0.0;
            for (double v : x) denom += std::exp(v - mx);
            return mx + std::log(denom) - x[static_cast<size_t>(target)];
        },
        [&](const std::vector<double>& x) {
            double mx = x[0];
            for (double v : x) mx = std::max(mx, v);
            double denom = 0.0;
            for (double v : x) denom += std::exp(v - mx);
            std::vector<double> g(x.size());
            for (size_t i = 0; i < x.size(); ++i) g[i] = std::exp(x[i] - mx) / denom;
            g[static_cast<size_t>(target)] -= 1.0;
            return g;
        }};
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> x(4);
        for (double& v : x) v = rng.normal();
        CHECK(grad_check(ce, x, 1e-5) < 1e-5);
    }

    CHECK_THROWS_AS((void)grad_check(square, {1.0}, 0.0), ArgumentError);

    DifferentiableScalar blows_up{
        [](const std::vector<double>& x) { return std::sqrt(x[0] - 2.0); }, // NaN near x=1
        [](const std::vector<double>&) { return std::vector<double>{0.0}; }};
    CHECK_THROWS_AS((void)grad_check(blows_up, {1.0}, 1e-6), NumericError);
}

TEST_CASE("matrix invariants") {
    CHECK_THROWS_AS(Matrix(0, 3), ShapeError);
    CHECK_THROWS_AS(Matrix(2, 2, {1.0, 2.0}), ShapeError);
    Matrix ok(2, 2, {1, 2, 3, 4});
    CHECK(ok.all_finite());
    ok(1, 1) = std::nan("");
    CHECK_FALSE(ok.all_finite());
    CHECK_THROWS_AS(ok.check_finite("test"), NumericError);
}
