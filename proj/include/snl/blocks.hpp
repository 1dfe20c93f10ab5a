#pragma once

#include "snl/affinity.hpp"
#include "snl/batch_norm.hpp"
#include "snl/random.hpp"
#include "snl/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace snl {

/// Which nonlocal-style block is instantiated. Each is a configuration of the
/// generalised operator F(A, Z) = Z W₁ + A Z W₂ + Σ_{k≥2} A^k Z W_{k+1}:
///
///   NL    A = D⁻¹M,              F = A Z W
///   NS    A = D⁻¹M,              F = −Z W + A Z W
///   A2    A = σ(Φ)σ(Ψ)ᵀ,         F = A Z W
///   CGNL  A = D⁻¹M on NCs nodes, F = unvec(A vec(Z)) W
///   CC    A = D⁻¹(C⊙M)(C⊙M),     F = A X W
///   SNL   A = D̂^{-1/2} M̂ D̂^{-1/2}, F = Z W₁ + A Z W₂ (+ higher terms)
enum class Variant { NL, NS, A2, CGNL, CC, SNL };

std::string_view variant_name(Variant v);
std::optional<Variant> parse_variant(std::string_view name);

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct BlockConfig {
    Variant variant = Variant::SNL;
    std::size_t c1 = 0;
    std::size_t cs = 0;
    Kernel kernel = Kernel::EmbeddedGaussian;
    /// Number of filter terms K. Only SNL takes K > 2; the other variants
    /// are fixed by their formulation.
    std::size_t order = 2;
    /// Spatial extent; CC needs it for the criss-cross mask.
    std::size_t h = 0;
    std::size_t w = 0;
    bool batch_norm = true;
    /// Lets the dot kernel through symmetric normalisation. The spectrum is
    /// then no longer guaranteed to lie in [-1, 1].
    bool allow_indefinite = false;
    double kernel_scale = 1.0;

    /// Default configuration for a variant, with the kernel each variant
    /// is defined with (CGNL uses the dot kernel).
    static BlockConfig make(Variant v, std::size_t c1, std::size_t cs);

    void validate() const;

    bool has_embeddings() const;    ///< W_φ and W_ψ present
    bool has_value_map() const;     ///< W_g present (CC aggregates X itself)
    std::size_t output_matrices() const;
    std::size_t node_channels() const; ///< columns of the aggregated node feature
};

template <typename T>
struct BlockParams {
    DenseArray<T> w_phi; ///< c1×cs, empty when the kernel works on X directly
    DenseArray<T> w_psi;
    DenseArray<T> w_g;   ///< c1×cs, empty for CC
    std::vector<DenseArray<T>> w_out; ///< per filter term, node_channels×c1
    BatchNorm<T> bn;

    template <typename U>
    BlockParams<U> cast() const;
};

template <typename T>
BlockParams<T> init_block_params(const BlockConfig& cfg, Rng& rng);

/// Sets every filter-output matrix to zero, making the block an identity.
template <typename T>
void zero_filter_weights(BlockParams<T>& p);

/// Saved forward state for block_backward. Per-sample tensors are indexed by
/// batch item.
template <typename T>
struct BlockCache {
    DenseArray<T> x;   ///< (B·n)×c1
    DenseArray<T> phi; ///< (B·n)×cs (or X when the kernel skips embeddings)
    DenseArray<T> psi;
    DenseArray<T> z;   ///< (B·n)×node_channels
    std::vector<DenseArray<T>> affinity;        ///< per sample: normalised A (n×n)
    std::vector<DenseArray<T>> kernel_values;   ///< per sample, SNL: logits c·ΦΨᵀ (exp kernels) or M (dot)
    std::vector<std::vector<T>> degree;         ///< per sample: log D̂ (SNL, exp kernels), D̂ or D otherwise
    std::vector<DenseArray<T>> shifted_kernel;  ///< SNL exp kernels: E from normalize_sym_exp (may be empty)
    std::vector<std::vector<T>> half_shift;     ///< SNL exp kernels: h
    std::vector<DenseArray<T>> softmax_phi;     ///< A2 only
    std::vector<DenseArray<T>> softmax_psi;     ///< A2 only
    std::vector<T> cgnl_scalar;                 ///< CGNL: s = rᵀ vec(Z)
    std::vector<T> cgnl_psi_sum;                ///< CGNL: Σ vec(Ψ)
    std::vector<DenseArray<T>> terms;           ///< P_k stacked over batch, (B·n)×node_channels
    DenseArray<T> branch;                       ///< pre-BN filter output
    BatchNormCache<T> bn;
    std::size_t batch = 0;
    std::size_t nodes = 0;
};

template <typename T>
struct BlockOutput {
    DenseArray<T> y; ///< same shape as the input
    /// Affinity used per batch item, kept when requested. CGNL materialises
    /// its NCs×NCs graph only here.
    std::vector<BasicAffinity<T>> attention;
    BlockCache<T> cache;
};

template <typename T>
struct BlockGrads {
    DenseArray<T> dx;
    DenseArray<T> dw_phi;
    DenseArray<T> dw_psi;
    DenseArray<T> dw_g;
    std::vector<DenseArray<T>> dw_out;
    DenseArray<T> dgamma;
    DenseArray<T> dbeta;
};

struct ForwardOptions {
    BnMode bn = BnMode::Train;
    bool keep_attention = false;
};

/// Y = X + BN(F(A, Z)) for x of shape n×c1 or B×n×c1.
template <typename T>
BlockOutput<T> forward_block(const DenseArray<T>& x, const BlockParams<T>& p, const BlockConfig& cfg,
                             ForwardOptions opts = {});

/// The spectral nonlocal block: Z = X W_g, Φ = X W_φ, Ψ = X W_ψ,
/// A = normalize_sym(kernel(Φ, Ψ)), Y = X + BN(Z W₁ + A Z W₂).
template <typename T>
BlockOutput<T> forward_snl(const DenseArray<T>& x, const BlockParams<T>& p, const BlockConfig& cfg,
                           ForwardOptions opts = {});

/// Exact adjoint of forward_block, including the affinity construction.
template <typename T>
BlockGrads<T> block_backward(const DenseArray<T>& grad_y, const BlockParams<T>& p, const BlockConfig& cfg,
                             const BlockCache<T>& cache);

/// Z W₁ + A Z W₂ + Σ_{k=2}^{K−1} A^k Z W_{k+1}, with K = weights.size().
/// Powers are applied by repeated A·(previous) products.
template <typename T>
DenseArray<T> unified_operator(const DenseArray<T>& a, const DenseArray<T>& z,
                               const std::vector<DenseArray<T>>& weights);

/// Closed-form forward of each variant, computed element by element from
/// its own definition (weighted means over neighbours, gather/distribute for
/// A2, the NCs-node graph for CGNL, row/column neighbourhoods for CC, the
/// step-by-step symmetric normalisation for SNL). No batch norm. f64, single
/// sample n×c1.
BlockOutput<double> forward_variant_reference(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg);

/// The same variant written as X + unified_operator(A, Z, weights) with the
/// affinity and the weight list each variant instantiates.
BlockOutput<double> forward_variant_unified(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg);

/// Weight list a variant feeds to unified_operator.
std::vector<Array> unified_weights(const BlockParams<double>& p, const BlockConfig& cfg);

/// Affinity a variant builds on a single sample, as the affinity module
/// would construct it.
AffinityMatrix variant_affinity(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg);

struct ParamCount {
    std::uint64_t weights = 0;
    std::uint64_t batch_norm = 0;
    std::uint64_t total() const { return weights + batch_norm; }
};

/// Learnable parameters added by one block.
ParamCount count_params(const BlockConfig& cfg);

/// Multiply–accumulates of one block forward on an h×w map: every matrix
/// product, including the affinity logits and the aggregation. Elementwise
/// work (exp, normalisation, batch norm) is not counted.
std::uint64_t count_flops(const BlockConfig& cfg, std::size_t h, std::size_t w);

} // namespace snl
