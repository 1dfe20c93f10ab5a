#include "snl/affinity.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace snl {

std::string_view kernel_name(Kernel k) {
    switch (k) {
    case Kernel::Dot: return "dot";
    case Kernel::Gaussian: return "gaussian";
    case Kernel::EmbeddedGaussian: return "embedded-gaussian";
    }
    return "unknown";
}

std::optional<Kernel> parse_kernel(std::string_view name) {
    if (name == "dot") return Kernel::Dot;
    if (name == "gaussian") return Kernel::Gaussian;
    if (name == "embedded-gaussian") return Kernel::EmbeddedGaussian;
    return std::nullopt;
}

std::string_view normalization_name(Normalization n) {
    switch (n) {
    case Normalization::Raw: return "raw";
    case Normalization::RandomWalk: return "random-walk";
    case Normalization::Symmetric: return "symmetric";
    case Normalization::MaskedRandomWalk: return "masked-random-walk";
    case Normalization::SoftmaxProduct: return "softmax-product";
    }
    return "unknown";
}

namespace fault {

namespace {
std::atomic<Fault> g_fault{Fault::None};
}

void inject(Fault f) { g_fault.store(f); }
Fault active() { return g_fault.load(); }

} // namespace fault

template <typename T>
BasicAffinity<T> compute_affinity(const DenseArray<T>& phi, const DenseArray<T>& psi, Kernel kernel, T scale) {
    require_rank2(phi, "compute_affinity");
    require_rank2(psi, "compute_affinity");
    if (phi.rows() != psi.rows() || phi.cols() != psi.cols())
        throw DimensionError("compute_affinity: phi " + shape_string(phi.shape()) + " and psi " +
                             shape_string(psi.shape()) + " must match");
    DenseArray<T> m = matmul_nt(phi, psi);
    if (kernel != Kernel::Dot)
        for (auto& v : m.values()) v = std::exp(scale * v);
    return {std::move(m), Normalization::Raw, kernel};
}

template <typename T>
std::vector<T> degrees(const DenseArray<T>& m) {
    require_rank2(m, "degrees");
    std::vector<T> d(m.rows(), T(0));
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) d[i] += m(i, j);
    return d;
}

namespace {

template <typename T>
void reject_isolated(const std::vector<T>& d) {
    for (std::size_t i = 0; i < d.size(); ++i)
        if (d[i] == T(0) || !std::isfinite(d[i]))
            throw IsolatedNodeError("node " + std::to_string(i) + " has degree " + std::to_string(d[i]), i);
}

template <typename T>
void require_square(const DenseArray<T>& m, const char* op) {
    require_rank2(m, op);
    if (m.rows() != m.cols())
        throw DimensionError(std::string(op) + ": affinity must be square, got " + shape_string(m.shape()));
}

} // namespace

template <typename T>
DenseArray<T> degree_matrix(const BasicAffinity<T>& a) {
    auto d = degrees(a.m);
    reject_isolated(d);
    return DenseArray<T>::diagonal(d);
}

template <typename T>
BasicAffinity<T> normalize_rw(const BasicAffinity<T>& a) {
    require_square(a.m, "normalize_rw");
    auto d = degrees(a.m);
    reject_isolated(d);
    DenseArray<T> out = a.m;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) /= d[i];
    return {std::move(out), Normalization::RandomWalk, a.kernel};
}

template <typename T>
BasicAffinity<T> normalize_sym(const BasicAffinity<T>& a, bool allow_indefinite) {
    require_square(a.m, "normalize_sym");
    const std::size_t n = a.m.rows();
    DenseArray<T> hat({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) hat(i, j) = (a.m(i, j) + a.m(j, i)) / T(2);

    if (!allow_indefinite) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (hat(i, j) < T(0)) {
                    std::ostringstream msg;
                    msg << "symmetrised affinity has a negative entry (" << hat(i, j) << " at " << i << ',' << j
                        << "); the graph must be non-negative and symmetric";
                    throw PropertyViolation(msg.str());
                }
    }
    auto d = degrees(hat);
    reject_isolated(d);
    std::vector<T> inv_sqrt(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (d[i] < T(0))
            throw PropertyViolation("node " + std::to_string(i) + " has negative degree, D^-1/2 is undefined");
        inv_sqrt[i] = T(1) / std::sqrt(d[i]);
    }
    const T sign = fault::active() == fault::Fault::NormalizeSymSign ? T(-1) : T(1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) hat(i, j) = sign * inv_sqrt[i] * hat(i, j) * inv_sqrt[j];
    return {std::move(hat), Normalization::Symmetric, a.kernel};
}

template <typename T>
LogSymmetricGraph<T> normalize_sym_exp(const DenseArray<T>& logits, Kernel kernel) {
    require_square(logits, "normalize_sym_exp");
    if (!all_finite(logits)) throw NumericError("normalize_sym_exp: non-finite logits");
    // Row-at-a-time so every pass runs on contiguous vectorised segments.
    using Mat = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
    const std::size_t un = logits.rows();
    const auto n = static_cast<Eigen::Index>(un);
    const Eigen::Map<const Mat> l(logits.data(), n, n);
    const Mat lt = l.transpose();
    const T sign = fault::active() == fault::Fault::NormalizeSymSign ? T(-1) : T(1);

    LogSymmetricGraph<T> out;
    out.log_degree.resize(un);
    auto a = DenseArray<T>::uninitialized({un, un});
    Eigen::Map<Mat> am(a.data(), n, n);

    Row h(n);
    for (Eigen::Index i = 0; i < n; ++i) h(i) = std::max(l.row(i).maxCoeff(), lt.row(i).maxCoeff()) / T(2);
    if (n > 0 && h.maxCoeff() - h.minCoeff() <= T(30)) {
        auto e = DenseArray<T>::uninitialized({un, un});
        Eigen::Map<Mat> em(e.data(), n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            em.row(i) = (l.row(i) - h(i) - h).exp();
            am.row(i) = (em.row(i) + (lt.row(i) - h(i) - h).exp()) / T(2);
        }
        // f_i = e^{H − h_i} Σ_j Ê_ij e^{h_j − H}
        const T top = h.maxCoeff();
        const Row u = (h - top).exp();
        Row f = (am.matrix() * u.matrix().transpose()).transpose().array() * (top - h).exp();
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!(f(i) > T(0))) throw NumericError("normalize_sym_exp: degree underflow");
            out.log_degree[static_cast<std::size_t>(i)] = T(2) * h(i) + std::log(f(i));
        }
        const Row t = f.rsqrt();
        for (Eigen::Index i = 0; i < n; ++i) am.row(i) *= sign * t(i) * t;
        out.shifted = std::move(e);
        out.half_shift.assign(h.data(), h.data() + n);
        out.a = {std::move(a), Normalization::Symmetric, kernel};
        return out;
    }

    // log M̂ is built in the output buffer and exponentiated in place.
    const T log2 = std::log(T(2));
    for (Eigen::Index i = 0; i < n; ++i) {
        // log M̂ = logaddexp(L, Lᵀ) − log 2
        const auto hi = l.row(i).max(lt.row(i));
        am.row(i) = hi + (l.row(i).min(lt.row(i)) - hi).exp().log1p() - log2;
        const T peak = am.row(i).maxCoeff();
        out.log_degree[static_cast<std::size_t>(i)] = peak + std::log((am.row(i) - peak).exp().sum());
    }
    const Eigen::Map<const Row> ell(out.log_degree.data(), n);
    for (Eigen::Index i = 0; i < n; ++i) am.row(i) = sign * (am.row(i) - (ell(i) / T(2)) - ell / T(2)).exp();
    out.a = {std::move(a), Normalization::Symmetric, kernel};
    return out;
}

template <typename T>
BasicAffinity<T> add_epsilon(const BasicAffinity<T>& a, T eps) {
    BasicAffinity<T> out = a;
    for (auto& v : out.m.values()) v += eps;
    return out;
}

CrissCrossMask criss_cross_mask(std::size_t h, std::size_t w) {
    if (h == 0 || w == 0) throw DimensionError("criss_cross_mask: extents must be positive");
    CrissCrossMask mask{h, w, Array({h * w, h * w})};
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t j = 0; j < h * w; ++j)
            if (mask.row_of(i) == mask.row_of(j) || mask.col_of(i) == mask.col_of(j)) mask.c(i, j) = 1.0;
    return mask;
}

template <typename T>
BasicAffinity<T> masked_rw(const BasicAffinity<T>& raw, const CrissCrossMask& mask) {
    require_square(raw.m, "masked_rw");
    if (raw.m.rows() != mask.c.rows())
        throw DimensionError("masked_rw: affinity " + shape_string(raw.m.shape()) + " vs mask " +
                             shape_string(mask.c.shape()));
    BasicAffinity<T> masked = raw;
    for (std::size_t i = 0; i < masked.m.size(); ++i)
        if (mask.c[i] == 0.0) masked.m[i] = T(0);
    auto out = normalize_rw(masked);
    out.norm = Normalization::MaskedRandomWalk;
    return out;
}

template <typename T>
BasicAffinity<T> softmax_product(const DenseArray<T>& phi_logits, const DenseArray<T>& psi_logits) {
    require_same_shape(phi_logits, psi_logits, "softmax_product");
    auto m = matmul_nt(softmax_rows(phi_logits), softmax_cols(psi_logits));
    return {std::move(m), Normalization::SoftmaxProduct, Kernel::EmbeddedGaussian};
}

#define SNL_INSTANTIATE(T)                                                                                  \
    template BasicAffinity<T> compute_affinity(const DenseArray<T>&, const DenseArray<T>&, Kernel, T);      \
    template std::vector<T> degrees(const DenseArray<T>&);                                                  \
    template DenseArray<T> degree_matrix(const BasicAffinity<T>&);                                          \
    template BasicAffinity<T> normalize_rw(const BasicAffinity<T>&);                                        \
    template BasicAffinity<T> normalize_sym(const BasicAffinity<T>&, bool);                                 \
    template LogSymmetricGraph<T> normalize_sym_exp(const DenseArray<T>&, Kernel);                         \
    template BasicAffinity<T> add_epsilon(const BasicAffinity<T>&, T);                                      \
    template BasicAffinity<T> masked_rw(const BasicAffinity<T>&, const CrissCrossMask&);                    \
    template BasicAffinity<T> softmax_product(const DenseArray<T>&, const DenseArray<T>&);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

} // namespace snl
