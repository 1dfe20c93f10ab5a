#include "snl/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace snl {

double max_asymmetry(const Array& s) {
    require_rank2(s, "max_asymmetry");
    if (s.rows() != s.cols())
        throw DimensionError("max_asymmetry: matrix is not square, " + shape_string(s.shape()));
    double worst = 0;
    for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = i + 1; j < s.cols(); ++j) worst = std::max(worst, std::abs(s(i, j) - s(j, i)));
    return worst;
}

namespace {

double off_diagonal_norm(const Array& a) {
    double total = 0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (i != j) total += a(i, j) * a(i, j);
    return std::sqrt(total);
}

void rotate(Array& a, Array& v, std::size_t p, std::size_t q) {
    const std::size_t n = a.rows();
    const double apq = a(p, q);
    const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
    const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
    const double c = 1.0 / std::sqrt(1.0 + t * t);
    const double s = t * c;

    for (std::size_t k = 0; k < n; ++k) {
        const double akp = a(k, p);
        const double akq = a(k, q);
        a(k, p) = c * akp - s * akq;
        a(k, q) = s * akp + c * akq;
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double apk = a(p, k);
        const double aqk = a(q, k);
        a(p, k) = c * apk - s * aqk;
        a(q, k) = s * apk + c * aqk;
    }
    a(p, q) = 0.0;
    a(q, p) = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double vkp = v(k, p);
        const double vkq = v(k, q);
        v(k, p) = c * vkp - s * vkq;
        v(k, q) = s * vkp + c * vkq;
    }
}

} // namespace

SpectralDecomposition sym_eig(const Array& s, double symmetry_tolerance) {
    const double asym = max_asymmetry(s);
    if (asym > symmetry_tolerance) {
        std::ostringstream msg;
        msg << "sym_eig: matrix is not symmetric, max |s_ij - s_ji| = " << asym;
        throw SymmetryError(msg.str(), asym);
    }
    const std::size_t n = s.rows();
    Array a = s;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));
    Array v = Array::identity(n);

    const double tol = 1e-14 * frobenius_norm(s);
    constexpr int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps && off_diagonal_norm(a) > tol; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q)
                if (a(p, q) != 0.0) rotate(a, v, p, q);
    }
    if (off_diagonal_norm(a) > tol) throw NumericError("sym_eig: Jacobi iteration did not converge");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

    SpectralDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Array({n, n});
    for (std::size_t col = 0; col < n; ++col) {
        const std::size_t src = order[col];
        out.eigenvalues[col] = a(src, src);
        std::size_t peak = 0;
        for (std::size_t k = 1; k < n; ++k)
            if (std::abs(v(k, src)) > std::abs(v(peak, src))) peak = k;
        const double sign = v(peak, src) < 0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < n; ++k) out.eigenvectors(k, col) = sign * v(k, src);
    }
    return out;
}

Array reconstruct(const SpectralDecomposition& d) {
    Array scaled = d.eigenvectors;
    for (std::size_t i = 0; i < scaled.rows(); ++i)
        for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= d.eigenvalues[j];
    return matmul_nt(scaled, d.eigenvectors);
}

namespace {

template <typename Step>
Array central_differences(const ScalarFunction& f, const Array& x, Step step) {
    Array grad(x.shape());
    Array probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double h = step(x[i]);
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NumericError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

} // namespace

Array finite_diff_grad(const ScalarFunction& f, const Array& x, double h) {
    return central_differences(f, x, [h](double) { return h; });
}

Array finite_diff_grad_scaled(const ScalarFunction& f, const Array& x, double rel) {
    return central_differences(f, x, [rel](double xi) { return rel * std::max(1.0, std::abs(xi)); });
}

double gradient_relative_error(const Array& analytic, const Array& numeric, double floor) {
    require_same_shape(analytic, numeric, "gradient_relative_error");
    double worst = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

} // namespace snl
