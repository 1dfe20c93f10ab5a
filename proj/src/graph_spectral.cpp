#include "snl/graph_spectral.hpp"

#include <sstream>

namespace snl {

namespace {

void require_symmetric(const Array& a, const char* op) {
    const double asym = max_asymmetry(a);
    if (asym > 1e-12) {
        std::ostringstream msg;
        msg << op << ": affinity is not symmetric, max |a_ij - a_ji| = " << asym;
        throw SymmetryError(msg.str(), asym);
    }
}

} // namespace

Array laplacian(const AffinityMatrix& a) {
    require_symmetric(a.m, "laplacian");
    const auto d = degrees(a.m);
    Array l = scale(a.m, -1.0);
    for (std::size_t i = 0; i < l.rows(); ++i) l(i, i) += d[i];
    return l;
}

Array graph_fourier(const Array& z, const Array& eigenvectors) { return matmul_tn(eigenvectors, z); }

Array inverse_graph_fourier(const Array& zhat, const Array& eigenvectors) { return matmul(eigenvectors, zhat); }

SpectralDecomposition spectral_basis(const AffinityMatrix& a) { return sym_eig(a.m); }

Array spectral_filter_direct(const SpectralDecomposition& basis, const Array& z, const GraphFilter& g) {
    const std::size_t n = basis.eigenvalues.size();
    if (g.omega.size() != n)
        throw DimensionError("spectral_filter_direct: filter has " + std::to_string(g.omega.size()) +
                             " responses for a " + std::to_string(n) + "-node graph");
    if (z.rows() != n)
        throw DimensionError("spectral_filter_direct: signal " + shape_string(z.shape()) + " on a " +
                             std::to_string(n) + "-node graph");
    Array zhat = graph_fourier(z, basis.eigenvectors);
    for (std::size_t i = 0; i < zhat.rows(); ++i)
        for (std::size_t c = 0; c < zhat.cols(); ++c) zhat(i, c) *= g.omega[i];
    return inverse_graph_fourier(zhat, basis.eigenvectors);
}

Array spectral_filter_direct(const AffinityMatrix& a, const Array& z, const GraphFilter& g) {
    return spectral_filter_direct(spectral_basis(a), z, g);
}

double chebyshev_t(std::size_t k, double x) {
    if (k == 0) return 1.0;
    double prev = 1.0;
    double cur = x;
    for (std::size_t i = 2; i <= k; ++i) {
        const double next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    return cur;
}

GraphFilter chebyshev_response(const SpectralDecomposition& basis, const ChebCoeffs& coeffs) {
    GraphFilter g;
    g.omega.reserve(basis.eigenvalues.size());
    for (double lambda : basis.eigenvalues) {
        double w = 0;
        for (std::size_t k = 0; k < coeffs.theta.size(); ++k) w += coeffs.theta[k] * chebyshev_t(k, -lambda);
        g.omega.push_back(w);
    }
    return g;
}

Array cheb_recursion(const Array& ltilde, std::size_t k) {
    require_rank2(ltilde, "cheb_recursion");
    const std::size_t n = ltilde.rows();
    Array prev = Array::identity(n);
    if (k == 0) return prev;
    Array cur = ltilde;
    for (std::size_t i = 2; i <= k; ++i) {
        Array next = sub(scale(matmul(ltilde, cur), 2.0), prev);
        prev = std::move(cur);
        cur = std::move(next);
    }
    return cur;
}

Array chebyshev_filter(const AffinityMatrix& a, const Array& z, const ChebCoeffs& coeffs) {
    if (coeffs.theta.empty()) throw DimensionError("chebyshev_filter: need at least one coefficient");
    if (a.m.cols() != z.rows())
        throw DimensionError("chebyshev_filter: affinity " + shape_string(a.m.shape()) + " vs signal " +
                             shape_string(z.shape()));
    const Array neg_a = scale(a.m, -1.0);

    Array prev = z;                          // T_0(−A) z
    Array out = scale(prev, coeffs.theta[0]);
    if (coeffs.theta.size() == 1) return out;
    Array cur = matmul(neg_a, z);            // T_1(−A) z
    accumulate(out, scale(cur, coeffs.theta[1]));
    for (std::size_t k = 2; k < coeffs.theta.size(); ++k) {
        Array next = sub(scale(matmul(neg_a, cur), 2.0), prev);
        accumulate(out, scale(next, coeffs.theta[k]));
        prev = std::move(cur);
        cur = std::move(next);
    }
    return out;
}

bool has_spectral_domain(const AffinityMatrix& a, double tolerance) {
    return a.m.rank() == 2 && a.m.rows() == a.m.cols() && max_asymmetry(a.m) <= tolerance;
}

} // namespace snl
