#pragma once

#include "snl/affinity.hpp"
#include "snl/linalg.hpp"

#include <vector>

namespace snl {

// Exact graph-spectral reference machinery. Everything here is f64.
//
// Convention: the oracle decomposes A itself and uses λ̃ = −λ(A) as the
// rescaled Laplacian spectrum, i.e. L̃ = −A. For a symmetric-normalised A
// this is the λ_max = 2 convention (L = I − A, L̃ = L − I). The true λ_max
// of L is ≤ 2, with equality only for bipartite graphs; the operator is
// defined by L̃ = −A regardless.

/// Per-eigenpair filter response ω (the diagonal of Ω).
struct GraphFilter {
    std::vector<double> omega;
};

/// Chebyshev coefficients θ_0..θ_{K−1}.
struct ChebCoeffs {
    std::vector<double> theta;
};

/// L = D_L − A.
Array laplacian(const AffinityMatrix& a);

/// ẑ = Uᵀz
Array graph_fourier(const Array& z, const Array& eigenvectors);
/// z = Uẑ
Array inverse_graph_fourier(const Array& zhat, const Array& eigenvectors);

/// Eigendecomposition of A used by the direct filter; ω_i pairs with the
/// i-th eigenpair (ascending λ(A)).
SpectralDecomposition spectral_basis(const AffinityMatrix& a);

/// U diag(ω) Uᵀ z with (Λ, U) = spectral_basis(a).
Array spectral_filter_direct(const AffinityMatrix& a, const Array& z, const GraphFilter& g);
Array spectral_filter_direct(const SpectralDecomposition& basis, const Array& z, const GraphFilter& g);

/// Scalar T_k(x) by the three-term recurrence.
double chebyshev_t(std::size_t k, double x);

/// ω_i = Σ_k θ_k T_k(−λ_i).
GraphFilter chebyshev_response(const SpectralDecomposition& basis, const ChebCoeffs& coeffs);

/// Materialised T_k(L̃).
Array cheb_recursion(const Array& ltilde, std::size_t k);

/// Σ_k θ_k T_k(−A) z, by the recurrence on matrix–feature products; T_k is
/// never formed. Cost O(K·n²·c).
Array chebyshev_filter(const AffinityMatrix& a, const Array& z, const ChebCoeffs& coeffs);

/// Whether the spectral oracle applies: A must be symmetric. Random-walk and
/// masked affinities are generally not, and have no guaranteed real spectrum.
bool has_spectral_domain(const AffinityMatrix& a, double tolerance = 1e-12);

} // namespace snl
