#pragma once

#include "snl/tensor.hpp"

#include <functional>
#include <vector>

namespace snl {

/// Eigen-pairs of a real symmetric matrix: `eigenvalues` ascending, matching
/// orthonormal columns in `eigenvectors`.
struct SpectralDecomposition {
    std::vector<double> eigenvalues;
    Array eigenvectors;
};

/// Largest |s_ij - s_ji|.
double max_asymmetry(const Array& s);

/// Cyclic Jacobi eigensolver. Sweeps until the off-diagonal Frobenius norm
/// drops below 1e-14·‖s‖_F. Each eigenvector is sign-normalised so that its
/// largest-magnitude entry is positive, which makes the output deterministic.
///
/// Throws SymmetryError if any |s_ij - s_ji| exceeds `symmetry_tolerance`.
SpectralDecomposition sym_eig(const Array& s, double symmetry_tolerance = 1e-12);

/// U·diag(Λ)·Uᵀ
Array reconstruct(const SpectralDecomposition& d);

using ScalarFunction = std::function<double(const Array&)>;

/// Central differences with a uniform step h.
Array finite_diff_grad(const ScalarFunction& f, const Array& x, double h);

/// Central differences with per-coordinate step rel·max(1, |x_i|).
Array finite_diff_grad_scaled(const ScalarFunction& f, const Array& x, double rel);

/// Worst per-entry relative discrepancy between an analytic and a numeric
/// gradient. Entries are compared against max(|a|, |n|, floor) so that
/// components which are zero in both do not blow up the ratio.
double gradient_relative_error(const Array& analytic, const Array& numeric, double floor = 1e-6);

} // namespace snl
