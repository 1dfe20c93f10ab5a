#pragma once

#include "snl/tensor.hpp"

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace snl {

/// Pairwise similarity f(φ_i, ψ_j).
enum class Kernel {
    Dot,              ///< φ_i·ψ_j, may be negative
    Gaussian,         ///< exp(φ_i·ψ_j) on the raw input features
    EmbeddedGaussian, ///< exp(φ_i·ψ_j) on learned embeddings
};

enum class Normalization {
    Raw,
    RandomWalk,       ///< D⁻¹M
    Symmetric,        ///< D̂^{-1/2} M̂ D̂^{-1/2}, M̂ = (M + Mᵀ)/2
    MaskedRandomWalk, ///< D⁻¹_{C⊙M} (C⊙M)
    SoftmaxProduct,   ///< σ_row(Φ)·σ_col(Ψ)ᵀ
};

std::string_view kernel_name(Kernel k);
std::optional<Kernel> parse_kernel(std::string_view name);
std::string_view normalization_name(Normalization n);

/// A node has zero degree, so D⁻¹ does not exist.
class IsolatedNodeError : public std::domain_error {
public:
    IsolatedNodeError(const std::string& what, std::size_t node) : std::domain_error(what), node_(node) {}
    std::size_t node() const noexcept { return node_; }

private:
    std::size_t node_;
};

/// The affinity is not non-negative and symmetric, so the spectral view has
/// no real, bounded spectrum to work with.
class PropertyViolation : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

template <typename T>
struct BasicAffinity {
    DenseArray<T> m;
    Normalization norm = Normalization::Raw;
    Kernel kernel = Kernel::EmbeddedGaussian;

    std::size_t nodes() const { return m.rows(); }
};

using AffinityMatrix = BasicAffinity<double>;

/// Raw M_ij = f(φ_i, ψ_j). `scale` multiplies the logits inside exp for the
/// Gaussian kernels and is ignored for the dot kernel.
template <typename T>
BasicAffinity<T> compute_affinity(const DenseArray<T>& phi, const DenseArray<T>& psi, Kernel kernel,
                                  T scale = T(1));

/// Row sums of `m`.
template <typename T>
std::vector<T> degrees(const DenseArray<T>& m);

/// diag(Σ_j m_ij). Throws IsolatedNodeError on a zero row sum.
template <typename T>
DenseArray<T> degree_matrix(const BasicAffinity<T>& a);

/// D⁻¹M. Negative degrees are allowed (the dot kernel produces them and the
/// rows still sum to one); a zero degree is not.
template <typename T>
BasicAffinity<T> normalize_rw(const BasicAffinity<T>& a);

/// D̂^{-1/2} M̂ D̂^{-1/2} with M̂ = (M + Mᵀ)/2.
///
/// Without `allow_indefinite`, any negative entry of M̂ is rejected with
/// PropertyViolation. With it, negative entries pass through and only
/// positive degrees are required; the [-1, 1] spectrum bound is then lost.
template <typename T>
BasicAffinity<T> normalize_sym(const BasicAffinity<T>& a, bool allow_indefinite = false);

/// normalize_sym of M = exp(L) without forming M or D̂ directly.
///
/// With per-node shifts h_i = ½ max_j max(L_ij, L_ji), E_ij = exp(L_ij − h_i − h_j)
/// never exceeds 1 and A_ij = Ê_ij / sqrt(f_i f_j), where Ê = (E + Eᵀ)/2 and
/// f_i = Σ_j Ê_ij e^{h_j − h_i}. When the shifts h spread by more than 30
/// it falls back to the log domain:
///   log M̂_ij = logaddexp(L_ij, L_ji) − log 2,  log d̂_i = logsumexp_j log M̂_ij,
///   A_ij = exp(log M̂_ij − (log d̂_i + log d̂_j)/2).
template <typename T>
struct LogSymmetricGraph {
    BasicAffinity<T> a;
    std::vector<T> log_degree;
    DenseArray<T> shifted;       ///< E, empty after the log-domain fallback
    std::vector<T> half_shift;   ///< h
};

template <typename T>
LogSymmetricGraph<T> normalize_sym_exp(const DenseArray<T>& logits, Kernel kernel = Kernel::EmbeddedGaussian);

/// M + ε on every entry. The explicit opt-in for graphs that may carry
/// isolated nodes.
template <typename T>
BasicAffinity<T> add_epsilon(const BasicAffinity<T>& a, T eps);

struct CrissCrossMask {
    std::size_t h = 0;
    std::size_t w = 0;
    Array c; ///< hw×hw, c_ij = 1 iff positions i and j share a row or a column

    std::size_t row_of(std::size_t node) const { return node / w; }
    std::size_t col_of(std::size_t node) const { return node % w; }
};

CrissCrossMask criss_cross_mask(std::size_t h, std::size_t w);

/// D⁻¹_{C⊙M}(C⊙M): rows sum to one over the unmasked entries.
template <typename T>
BasicAffinity<T> masked_rw(const BasicAffinity<T>& raw, const CrissCrossMask& mask);

/// σ_row(logits_φ)·σ_col(logits_ψ)ᵀ: channel softmax per position on one
/// side, position softmax per channel on the other. Rows of the product sum
/// to one.
template <typename T>
BasicAffinity<T> softmax_product(const DenseArray<T>& phi_logits, const DenseArray<T>& psi_logits);

namespace fault {

/// Deliberate defects used by mutation tests of the verification suites.
enum class Fault { None, NormalizeSymSign };

void inject(Fault f);
Fault active();

} // namespace fault

} // namespace snl
