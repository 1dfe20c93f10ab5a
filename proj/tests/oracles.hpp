#pragma once

// Independent reference implementations for the tests: plain loops, or Eigen's
// own solvers where the library uses something else. Nothing here calls into
// the library's numeric code.

#include "snl/random.hpp"
#include "snl/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using snl::Array;

inline Array random_matrix(snl::Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
    Array a({r, c});
    for (auto& v : a.values()) v = sd * rng.normal();
    return a;
}

/// Non-negative entries spread over several orders of magnitude, some zeros,
/// positive diagonal so no node is isolated.
inline Array random_nonneg(snl::Rng& rng, std::size_t n, double spread = 2.0) {
    Array m({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            m(i, j) = (i != j && rng.uniform() < 0.2) ? 0.0 : std::exp(spread * rng.normal());
    return m;
}

inline Array matmul(const Array& a, const Array& b) {
    Array c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
            c(i, j) = static_cast<double>(s);
        }
    return c;
}

inline Array transpose(const Array& a) {
    Array t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Array softmax_rows(const Array& m) {
    Array out(m.shape());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        long double s = 0;
        for (std::size_t j = 0; j < m.cols(); ++j) s += std::exp(static_cast<long double>(m(i, j)));
        for (std::size_t j = 0; j < m.cols(); ++j)
            out(i, j) = static_cast<double>(std::exp(static_cast<long double>(m(i, j))) / s);
    }
    return out;
}

/// D̂^{-1/2} M̂ D̂^{-1/2} by the definition.
inline Array normalize_sym(const Array& m) {
    const std::size_t n = m.rows();
    Array mh({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mh(i, j) = 0.5 * (m(i, j) + m(j, i));
    std::vector<double> d(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i] += mh(i, j);
    Array a({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a(i, j) = mh(i, j) / std::sqrt(d[i] * d[j]);
    return a;
}

inline Array normalize_rw(const Array& m) {
    Array a(m.shape());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double d = 0;
        for (std::size_t j = 0; j < m.cols(); ++j) d += m(i, j);
        for (std::size_t j = 0; j < m.cols(); ++j) a(i, j) = m(i, j) / d;
    }
    return a;
}

inline Eigen::MatrixXd to_eigen(const Array& a) {
    Eigen::MatrixXd m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
    return m;
}

inline Array from_eigen(const Eigen::MatrixXd& m) {
    Array a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) = m(i, j);
    return a;
}

/// Eigenvalues ascending, from Eigen's tridiagonal QR solver.
inline std::vector<double> eigenvalues(const Array& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(s));
    return {es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size()};
}

inline double cheb(std::size_t k, double x) {
    // closed form on [-1, 1], recurrence outside
    if (std::abs(x) <= 1.0) return std::cos(static_cast<double>(k) * std::acos(x));
    double a = 1, b = x;
    if (k == 0) return a;
    for (std::size_t i = 1; i < k; ++i) {
        const double c = 2 * x * b - a;
        a = b;
        b = c;
    }
    return b;
}

/// Σ_k θ_k T_k(−A) z through Eigen's eigendecomposition of A.
inline Array spectral_polynomial(const Array& a, const Array& z, const std::vector<double>& theta) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(a));
    const auto& u = es.eigenvectors();
    Eigen::VectorXd w(u.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        double s = 0;
        for (std::size_t k = 0; k < theta.size(); ++k) s += theta[k] * cheb(k, -es.eigenvalues()(i));
        w(i) = s;
    }
    return from_eigen(u * w.asDiagonal() * u.transpose() * to_eigen(z));
}

inline double max_abs_diff(const Array& a, const Array& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs(const Array& a) {
    double m = 0;
    for (auto v : a.values()) m = std::max(m, std::abs(v));
    return m;
}

inline double rel_err(const Array& a, const Array& b) { return max_abs_diff(a, b) / std::max(1.0, max_abs(b)); }

inline double central_diff(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2 * h);
}

} // namespace oracle
