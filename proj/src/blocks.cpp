#include "snl/blocks.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace snl {

std::string_view variant_name(Variant v) {
    switch (v) {
    case Variant::NL: return "NL";
    case Variant::NS: return "NS";
    case Variant::A2: return "A2";
    case Variant::CGNL: return "CGNL";
    case Variant::CC: return "CC";
    case Variant::SNL: return "SNL";
    }
    return "unknown";
}

std::optional<Variant> parse_variant(std::string_view name) {
    for (Variant v : {Variant::NL, Variant::NS, Variant::A2, Variant::CGNL, Variant::CC, Variant::SNL})
        if (name == variant_name(v)) return v;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Configuration

BlockConfig BlockConfig::make(Variant v, std::size_t c1, std::size_t cs) {
    BlockConfig cfg;
    cfg.variant = v;
    cfg.c1 = c1;
    cfg.cs = cs;
    cfg.kernel = v == Variant::CGNL ? Kernel::Dot : Kernel::EmbeddedGaussian;
    return cfg;
}

void BlockConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("block config: " + msg); };
    if (c1 == 0) fail("c1 must be at least 1");
    if (cs == 0) fail("cs must be at least 1");
    if (cs > c1) fail("cs (" + std::to_string(cs) + ") must not exceed c1 (" + std::to_string(c1) + ")");
    if (variant == Variant::SNL) {
        if (order < 2) fail("SNL needs at least 2 filter terms, got order " + std::to_string(order));
    } else if (order != 2) {
        fail(std::string(variant_name(variant)) + " has a fixed formulation; order must be 2");
    }
    if (variant == Variant::CC && (h == 0 || w == 0)) fail("CC needs the spatial extent h and w");
    if (variant == Variant::CGNL && kernel != Kernel::Dot) fail("CGNL is defined with the dot kernel");
    if (variant == Variant::SNL && kernel == Kernel::Dot && !allow_indefinite)
        fail("the dot kernel can produce negative affinities; SNL needs allow_indefinite to accept it");
    if (!(kernel_scale > 0.0) || !std::isfinite(kernel_scale)) fail("kernel_scale must be positive and finite");
}

bool BlockConfig::has_embeddings() const { return variant == Variant::A2 || kernel != Kernel::Gaussian; }

bool BlockConfig::has_value_map() const { return variant != Variant::CC; }

std::size_t BlockConfig::output_matrices() const { return variant == Variant::SNL ? order : 1; }

std::size_t BlockConfig::node_channels() const { return variant == Variant::CC ? c1 : cs; }

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
template <typename U>
BlockParams<U> BlockParams<T>::cast() const {
    BlockParams<U> out;
    out.w_phi = w_phi.template cast<U>();
    out.w_psi = w_psi.template cast<U>();
    out.w_g = w_g.template cast<U>();
    for (const auto& w : w_out) out.w_out.push_back(w.template cast<U>());
    out.bn.gamma = bn.gamma.template cast<U>();
    out.bn.beta = bn.beta.template cast<U>();
    out.bn.running_mean = bn.running_mean.template cast<U>();
    out.bn.running_var = bn.running_var.template cast<U>();
    out.bn.momentum = static_cast<U>(bn.momentum);
    out.bn.eps = static_cast<U>(bn.eps);
    return out;
}

namespace {

template <typename T>
DenseArray<T> gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    DenseArray<T> m({rows, cols});
    for (auto& v : m.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return m;
}

} // namespace

template <typename T>
BlockParams<T> init_block_params(const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    BlockParams<T> p;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(cfg.c1));
    if (cfg.has_embeddings()) {
        p.w_phi = gaussian_matrix<T>(cfg.c1, cfg.cs, in_std, rng);
        p.w_psi = gaussian_matrix<T>(cfg.c1, cfg.cs, in_std, rng);
    }
    if (cfg.has_value_map()) p.w_g = gaussian_matrix<T>(cfg.c1, cfg.cs, in_std, rng);
    const double out_std = 1.0 / std::sqrt(static_cast<double>(cfg.node_channels()));
    for (std::size_t k = 0; k < cfg.output_matrices(); ++k)
        p.w_out.push_back(gaussian_matrix<T>(cfg.node_channels(), cfg.c1, out_std, rng));
    p.bn = BatchNorm<T>::identity(cfg.c1);
    return p;
}

template <typename T>
void zero_filter_weights(BlockParams<T>& p) {
    for (auto& w : p.w_out) std::fill(w.values().begin(), w.values().end(), T(0));
}

// ---------------------------------------------------------------------------
// Generalised operator

template <typename T>
DenseArray<T> unified_operator(const DenseArray<T>& a, const DenseArray<T>& z,
                               const std::vector<DenseArray<T>>& weights) {
    if (weights.empty()) throw DimensionError("unified_operator: need at least one weight matrix");
    require_rank2(a, "unified_operator");
    require_rank2(z, "unified_operator");
    if (a.rows() != a.cols() || a.cols() != z.rows())
        throw DimensionError("unified_operator: affinity " + shape_string(a.shape()) + " vs signal " +
                             shape_string(z.shape()));
    const std::size_t c_out = weights.front().cols();
    for (const auto& w : weights)
        if (w.rank() != 2 || w.rows() != z.cols() || w.cols() != c_out)
            throw DimensionError("unified_operator: weight " + shape_string(w.shape()) + " does not map " +
                                 std::to_string(z.cols()) + " to " + std::to_string(c_out) + " channels");

    DenseArray<T> out = matmul(z, weights[0]);
    DenseArray<T> power = z;
    for (std::size_t k = 1; k < weights.size(); ++k) {
        power = matmul(a, power);
        accumulate(out, matmul(power, weights[k]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched block forward / backward

namespace {

template <typename T>
DenseArray<T> take_rows(const DenseArray<T>& m, std::size_t start, std::size_t count) {
    const std::size_t c = m.cols();
    auto out = DenseArray<T>::uninitialized({count, c});
    std::copy(m.data() + start * c, m.data() + (start + count) * c, out.data());
    return out;
}

template <typename T>
void put_rows(DenseArray<T>& m, std::size_t start, const DenseArray<T>& part) {
    std::copy(part.data(), part.data() + part.size(), m.data() + start * m.cols());
}

template <typename T>
void add_rows(DenseArray<T>& m, std::size_t start, const DenseArray<T>& part) {
    T* dst = m.data() + start * m.cols();
    for (std::size_t i = 0; i < part.size(); ++i) dst[i] += part[i];
}

/// Number of filter terms P_0..P_{K-1} the variant needs.
std::size_t term_count(const BlockConfig& cfg) { return cfg.variant == Variant::SNL ? cfg.order : 2; }

bool exp_kernel(const BlockConfig& cfg) { return cfg.kernel != Kernel::Dot; }

template <typename T>
struct SampleGraph {
    DenseArray<T> a;
    DenseArray<T> kernel_values;
    std::vector<T> degree;
    DenseArray<T> shifted_kernel;
    std::vector<T> half_shift;
    DenseArray<T> softmax_phi;
    DenseArray<T> softmax_psi;
    T cgnl_psi_sum = T(0);
};

/// Masked row softmax / masked row normalisation for CC.
template <typename T>
SampleGraph<T> criss_cross_graph(const DenseArray<T>& logits, const CrissCrossMask& mask, const BlockConfig& cfg) {
    const std::size_t n = logits.rows();
    SampleGraph<T> g;
    g.a = DenseArray<T>({n, n});
    g.degree.assign(n, T(0));
    const T c = static_cast<T>(cfg.kernel_scale);
    for (std::size_t i = 0; i < n; ++i) {
        if (exp_kernel(cfg)) {
            T peak = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                if (mask.c(i, j) != 0.0) peak = std::max(peak, c * logits(i, j));
            for (std::size_t j = 0; j < n; ++j)
                if (mask.c(i, j) != 0.0) {
                    g.a(i, j) = std::exp(c * logits(i, j) - peak);
                    g.degree[i] += g.a(i, j);
                }
        } else {
            for (std::size_t j = 0; j < n; ++j)
                if (mask.c(i, j) != 0.0) {
                    g.a(i, j) = logits(i, j);
                    g.degree[i] += logits(i, j);
                }
        }
        if (g.degree[i] == T(0)) throw IsolatedNodeError("node " + std::to_string(i) + " has degree 0", i);
        for (std::size_t j = 0; j < n; ++j) g.a(i, j) /= g.degree[i];
    }
    return g;
}

template <typename T>
SampleGraph<T> build_graph(const DenseArray<T>& phi, const DenseArray<T>& psi, const BlockConfig& cfg,
                           const CrissCrossMask* mask) {
    SampleGraph<T> g;
    const T c = static_cast<T>(cfg.kernel_scale);
    switch (cfg.variant) {
    case Variant::NL:
    case Variant::NS: {
        DenseArray<T> logits = matmul_nt(phi, psi);
        if (exp_kernel(cfg)) {
            g.a = softmax_rows(c == T(1) ? logits : scale(logits, c));
        } else {
            auto rw = normalize_rw(BasicAffinity<T>{logits, Normalization::Raw, cfg.kernel});
            g.degree = degrees(logits);
            g.a = std::move(rw.m);
        }
        break;
    }
    case Variant::CC: g = criss_cross_graph(matmul_nt(phi, psi), *mask, cfg); break;
    case Variant::SNL: {
        DenseArray<T> m = matmul_nt(phi, psi);
        if (exp_kernel(cfg)) {
            // Log domain: the exponentiated logits span far more than the
            // float range once embeddings grow during training.
            if (c != T(1)) m = scale(m, c);
            auto sym = normalize_sym_exp(m, cfg.kernel);
            g.degree = std::move(sym.log_degree);
            g.a = std::move(sym.a.m);
            g.shifted_kernel = std::move(sym.shifted);
            g.half_shift = std::move(sym.half_shift);
            g.kernel_values = std::move(m);
            break;
        }
        auto sym = normalize_sym(BasicAffinity<T>{m, Normalization::Raw, cfg.kernel}, cfg.allow_indefinite);
        const std::size_t n = m.rows();
        g.degree.assign(n, T(0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) g.degree[i] += (m(i, j) + m(j, i)) / T(2);
        g.kernel_values = std::move(m);
        g.a = std::move(sym.m);
        break;
    }
    case Variant::A2:
        g.softmax_phi = softmax_rows(phi);
        g.softmax_psi = softmax_cols(psi);
        g.a = matmul_nt(g.softmax_phi, g.softmax_psi);
        break;
    case Variant::CGNL: {
        T total = 0;
        for (auto v : psi.values()) total += v;
        if (total == T(0)) throw IsolatedNodeError("CGNL: Σψ = 0, every node has degree 0", 0);
        g.cgnl_psi_sum = total;
        break;
    }
    }
    return g;
}

/// dL/dS for the affinity logits S = ΦΨᵀ given dL/dA.
template <typename T>
DenseArray<T> graph_backward(const DenseArray<T>& da, const BlockCache<T>& cache, std::size_t b,
                             const BlockConfig& cfg, const CrissCrossMask* mask) {
    const DenseArray<T>& a = cache.affinity[b];
    const std::size_t n = a.rows();
    const T c = static_cast<T>(cfg.kernel_scale);
    // The exp SNL path writes every entry.
    auto ds = cfg.variant == Variant::SNL && exp_kernel(cfg) ? DenseArray<T>::uninitialized({n, n})
                                                             : DenseArray<T>({n, n});
    switch (cfg.variant) {
    case Variant::NL:
    case Variant::NS:
    case Variant::CC: {
        const auto& d = cache.degree[b];
        for (std::size_t i = 0; i < n; ++i) {
            T dot = 0;
            for (std::size_t l = 0; l < n; ++l) dot += da(i, l) * a(i, l);
            for (std::size_t j = 0; j < n; ++j) {
                if (mask && mask->c(i, j) == 0.0) continue;
                ds(i, j) = exp_kernel(cfg) ? c * a(i, j) * (da(i, j) - dot) : (da(i, j) - dot) / d[i];
            }
        }
        break;
    }
    case Variant::SNL: {
        using Mat = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
        const auto en = static_cast<Eigen::Index>(n);
        const Eigen::Map<const Mat> g(da.data(), en, en), am(a.data(), en, en);
        // h_i = Σ_l dA_il A_il + Σ_k dA_ki A_ki collects the degree terms.
        const Mat e = g * am;
        const Row hv = e.rowwise().sum().transpose() + e.colwise().sum();
        const std::vector<T> h(hv.data(), hv.data() + n);
        const auto& d = cache.degree[b];
        const auto& m = cache.kernel_values[b];
        if (exp_kernel(cfg) && !cache.shifted_kernel[b].empty()) {
            // Same formula as below, with R = E·e^{h_j−h_i}/f_i, R' = E·e^{h_i−h_j}/f_j and
            // B = E t_i t_j, t = f^{-1/2}; shifts are re-centred on H = max h.
            //   dS_ij = c/2 E_ij [t_i t_j (dA_ij + dA_ji) − (v_j q_i + v_i q_j)/2]
            // v = e^{h−H} over the shifts, q = t²/v times the degree terms above.
            const Eigen::Map<const Mat> e(cache.shifted_kernel[b].data(), en, en);
            const Eigen::Map<const Row> hs(cache.half_shift[b].data(), en);
            const Eigen::Map<const Row> ell(d.data(), en);
            const Row v = (hs - hs.maxCoeff()).exp();
            const Row t = (hs - ell / T(2)).exp();
            const Row ph = t.square() / v * hv;
            const Mat gt = g.transpose();
            Eigen::Map<Mat> out(ds.data(), en, en);
            for (Eigen::Index i = 0; i < en; ++i)
                out.row(i) = c / T(2) * e.row(i) *
                             (t(i) * t * (g.row(i) + gt.row(i)) - (ph(i) * v + v(i) * ph) / T(2));
            break;
        }
        if (exp_kernel(cfg)) {
            // With M = exp(L) and log degrees ℓ:
            //   dS_ij = c/2 [B_ij (dA_ij + dA_ji) − (R_ij h_i + R'_ij h_j)/2]
            // R_ij = e^{L_ij − ℓ_i}, R'_ij = e^{L_ij − ℓ_j}, B_ij = sqrt(R_ij R'_ij),
            // all bounded by 2 since ℓ_i ≥ L_ij − log 2.
            const Eigen::Map<const Mat> l(m.data(), en, en);
            const Eigen::Map<const Row> ell(d.data(), en);
            const Mat gt = g.transpose();
            Eigen::Map<Mat> out(ds.data(), en, en);
            for (Eigen::Index i = 0; i < en; ++i) {
                const Row r = (l.row(i) - ell(i)).exp();
                const Row rp = (l.row(i) - ell).exp();
                out.row(i) = c / T(2) * ((r * rp).sqrt() * (g.row(i) + gt.row(i)) - (r * hv(i) + rp * hv) / T(2));
            }
            break;
        }
        std::vector<T> inv_sqrt(n);
        for (std::size_t i = 0; i < n; ++i) inv_sqrt[i] = T(1) / std::sqrt(d[i]);
        DenseArray<T> dhat({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) dhat(i, j) = inv_sqrt[i] * inv_sqrt[j] * da(i, j) - h[i] / (T(2) * d[i]);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) ds(i, j) = (dhat(i, j) + dhat(j, i)) / T(2);
        break;
    }
    default: throw std::logic_error("graph_backward: variant has no logit graph");
    }
    return ds;
}

template <typename T>
std::size_t infer_batch(const DenseArray<T>& x, std::size_t c1, std::size_t& nodes) {
    if (x.rank() == 2) {
        nodes = x.rows();
        if (x.cols() != c1)
            throw DimensionError("block input " + shape_string(x.shape()) + " does not have c1 = " + std::to_string(c1) +
                                 " channels");
        return 1;
    }
    if (x.rank() == 3) {
        nodes = x.dim(1);
        if (x.dim(2) != c1)
            throw DimensionError("block input " + shape_string(x.shape()) + " does not have c1 = " + std::to_string(c1) +
                                 " channels");
        return x.dim(0);
    }
    throw DimensionError("block input must be n×c1 or B×n×c1, got " + shape_string(x.shape()));
}

} // namespace

template <typename T>
BlockOutput<T> forward_block(const DenseArray<T>& x_in, const BlockParams<T>& p, const BlockConfig& cfg,
                             ForwardOptions opts) {
    cfg.validate();
    std::size_t n = 0;
    const std::size_t batch = infer_batch(x_in, cfg.c1, n);
    if (cfg.variant == Variant::CC && cfg.h * cfg.w != n)
        throw DimensionError("CC: spatial extent " + std::to_string(cfg.h) + "x" + std::to_string(cfg.w) +
                             " does not cover " + std::to_string(n) + " nodes");
    const BnMode bn_mode = cfg.batch_norm ? opts.bn : BnMode::Off;

    BlockOutput<T> out;
    BlockCache<T>& cache = out.cache;
    cache.batch = batch;
    cache.nodes = n;
    cache.x = x_in.reshaped({batch * n, cfg.c1});
    const DenseArray<T>& x = cache.x;

    cache.phi = cfg.has_embeddings() ? matmul(x, p.w_phi) : x;
    cache.psi = cfg.has_embeddings() ? matmul(x, p.w_psi) : x;
    cache.z = cfg.has_value_map() ? matmul(x, p.w_g) : x;

    std::optional<CrissCrossMask> mask;
    if (cfg.variant == Variant::CC) mask = criss_cross_mask(cfg.h, cfg.w);

    const std::size_t terms = term_count(cfg);
    const std::size_t ch = cfg.node_channels();
    cache.terms.assign(terms, DenseArray<T>({batch * n, ch}));
    cache.terms[0] = cache.z;
    cache.affinity.resize(batch);
    cache.kernel_values.resize(batch);
    cache.degree.resize(batch);
    cache.shifted_kernel.resize(batch);
    cache.half_shift.resize(batch);
    cache.softmax_phi.resize(batch);
    cache.softmax_psi.resize(batch);
    cache.cgnl_scalar.assign(batch, T(0));
    cache.cgnl_psi_sum.assign(batch, T(0));

    for (std::size_t b = 0; b < batch; ++b) {
        const DenseArray<T> phi = take_rows(cache.phi, b * n, n);
        const DenseArray<T> psi = take_rows(cache.psi, b * n, n);
        const DenseArray<T> z = take_rows(cache.z, b * n, n);
        SampleGraph<T> g = build_graph(phi, psi, cfg, mask ? &*mask : nullptr);

        if (cfg.variant == Variant::CGNL) {
            // A = 1·rᵀ with r = vec(Ψ)/Σvec(Ψ): every node receives s = rᵀ vec(Z).
            T s = 0;
            for (std::size_t i = 0; i < psi.size(); ++i) s += psi[i] * z[i];
            s /= g.cgnl_psi_sum;
            cache.cgnl_scalar[b] = s;
            cache.cgnl_psi_sum[b] = g.cgnl_psi_sum;
            put_rows(cache.terms[1], b * n, DenseArray<T>({n, ch}, s));
            if (opts.keep_attention) {
                const std::size_t nodes = psi.size();
                DenseArray<T> a({nodes, nodes});
                for (std::size_t i = 0; i < nodes; ++i)
                    for (std::size_t j = 0; j < nodes; ++j) a(i, j) = psi[j] / g.cgnl_psi_sum;
                out.attention.push_back({std::move(a), Normalization::RandomWalk, cfg.kernel});
            }
            continue;
        }

        DenseArray<T> power = z;
        for (std::size_t k = 1; k < terms; ++k) {
            power = matmul(g.a, power);
            put_rows(cache.terms[k], b * n, power);
        }
        if (opts.keep_attention) {
            Normalization tag = Normalization::RandomWalk;
            if (cfg.variant == Variant::SNL) tag = Normalization::Symmetric;
            if (cfg.variant == Variant::CC) tag = Normalization::MaskedRandomWalk;
            if (cfg.variant == Variant::A2) tag = Normalization::SoftmaxProduct;
            out.attention.push_back({g.a, tag, cfg.kernel});
        }
        cache.affinity[b] = std::move(g.a);
        cache.kernel_values[b] = std::move(g.kernel_values);
        cache.degree[b] = std::move(g.degree);
        cache.shifted_kernel[b] = std::move(g.shifted_kernel);
        cache.half_shift[b] = std::move(g.half_shift);
        cache.softmax_phi[b] = std::move(g.softmax_phi);
        cache.softmax_psi[b] = std::move(g.softmax_psi);
    }

    switch (cfg.variant) {
    case Variant::SNL:
        cache.branch = matmul(cache.terms[0], p.w_out[0]);
        for (std::size_t k = 1; k < terms; ++k) accumulate(cache.branch, matmul(cache.terms[k], p.w_out[k]));
        break;
    case Variant::NS: cache.branch = matmul(sub(cache.terms[1], cache.terms[0]), p.w_out[0]); break;
    default: cache.branch = matmul(cache.terms[1], p.w_out[0]); break;
    }

    DenseArray<T> y = batch_norm_forward(cache.branch, p.bn, bn_mode, cache.bn);
    accumulate(y, x);
    out.y = std::move(y).reshaped(x_in.shape());
    return out;
}

template <typename T>
BlockOutput<T> forward_snl(const DenseArray<T>& x, const BlockParams<T>& p, const BlockConfig& cfg,
                           ForwardOptions opts) {
    if (cfg.variant != Variant::SNL) throw ConfigError("forward_snl called with variant " + std::string(variant_name(cfg.variant)));
    return forward_block(x, p, cfg, opts);
}

template <typename T>
BlockGrads<T> block_backward(const DenseArray<T>& grad_y, const BlockParams<T>& p, const BlockConfig& cfg,
                             const BlockCache<T>& cache) {
    const std::size_t batch = cache.batch;
    const std::size_t n = cache.nodes;
    const std::size_t rows = batch * n;
    if (grad_y.size() != rows * cfg.c1)
        throw DimensionError("block_backward: gradient " + shape_string(grad_y.shape()) + " does not match the forward");
    const DenseArray<T> gy = grad_y.reshaped({rows, cfg.c1});

    BlockGrads<T> grads;
    auto bn = batch_norm_backward(gy, p.bn, cache.bn);
    grads.dgamma = cfg.batch_norm ? bn.dgamma : DenseArray<T>({cfg.c1});
    grads.dbeta = cfg.batch_norm ? bn.dbeta : DenseArray<T>({cfg.c1});
    if (grads.dgamma.empty()) grads.dgamma = DenseArray<T>({cfg.c1});
    if (grads.dbeta.empty()) grads.dbeta = DenseArray<T>({cfg.c1});
    const DenseArray<T>& dbranch = bn.dx;

    const std::size_t terms = term_count(cfg);
    std::vector<DenseArray<T>> dterms(terms, DenseArray<T>({rows, cfg.node_channels()}));
    switch (cfg.variant) {
    case Variant::SNL:
        for (std::size_t k = 0; k < terms; ++k) {
            grads.dw_out.push_back(matmul_tn(cache.terms[k], dbranch));
            dterms[k] = matmul_nt(dbranch, p.w_out[k]);
        }
        break;
    case Variant::NS:
        grads.dw_out.push_back(matmul_tn(sub(cache.terms[1], cache.terms[0]), dbranch));
        dterms[1] = matmul_nt(dbranch, p.w_out[0]);
        dterms[0] = scale(dterms[1], T(-1));
        break;
    default:
        grads.dw_out.push_back(matmul_tn(cache.terms[1], dbranch));
        dterms[1] = matmul_nt(dbranch, p.w_out[0]);
        break;
    }

    std::optional<CrissCrossMask> mask;
    if (cfg.variant == Variant::CC) mask = criss_cross_mask(cfg.h, cfg.w);

    DenseArray<T> dphi({rows, cache.phi.cols()});
    DenseArray<T> dpsi({rows, cache.psi.cols()});
    for (std::size_t b = 0; b < batch; ++b) {
        if (cfg.variant == Variant::CGNL) {
            const DenseArray<T> dp = take_rows(dterms[1], b * n, n);
            T ds = 0;
            for (auto v : dp.values()) ds += v;
            const DenseArray<T> psi = take_rows(cache.psi, b * n, n);
            const DenseArray<T> z = take_rows(cache.z, b * n, n);
            const T total = cache.cgnl_psi_sum[b];
            const T s = cache.cgnl_scalar[b];
            DenseArray<T> dz({n, z.cols()}), dpsi_b({n, psi.cols()});
            for (std::size_t i = 0; i < z.size(); ++i) {
                dz[i] = ds * psi[i] / total;
                dpsi_b[i] = ds * (z[i] - s) / total;
            }
            add_rows(dterms[0], b * n, dz);
            put_rows(dpsi, b * n, dpsi_b);
            continue;
        }

        const DenseArray<T>& a = cache.affinity[b];
        DenseArray<T> da;
        for (std::size_t k = terms - 1; k >= 1; --k) {
            const DenseArray<T> dp = take_rows(dterms[k], b * n, n);
            auto part = matmul_nt(dp, take_rows(cache.terms[k - 1], b * n, n));
            if (da.empty()) da = std::move(part);
            else accumulate(da, part);
            add_rows(dterms[k - 1], b * n, matmul_tn(a, dp));
        }

        const DenseArray<T> phi = take_rows(cache.phi, b * n, n);
        const DenseArray<T> psi = take_rows(cache.psi, b * n, n);
        if (cfg.variant == Variant::A2) {
            const auto& sp = cache.softmax_phi[b];
            const auto& sq = cache.softmax_psi[b];
            put_rows(dphi, b * n, softmax_rows_backward(sp, matmul(da, sq)));
            put_rows(dpsi, b * n, softmax_cols_backward(sq, matmul_tn(da, sp)));
            continue;
        }
        const DenseArray<T> ds = graph_backward(da, cache, b, cfg, mask ? &*mask : nullptr);
        put_rows(dphi, b * n, matmul(ds, psi));
        put_rows(dpsi, b * n, matmul_tn(ds, phi));
    }

    const DenseArray<T>& x = cache.x;
    DenseArray<T> dx = gy;
    if (cfg.has_embeddings()) {
        grads.dw_phi = matmul_tn(x, dphi);
        grads.dw_psi = matmul_tn(x, dpsi);
        accumulate(dx, matmul_nt(dphi, p.w_phi));
        accumulate(dx, matmul_nt(dpsi, p.w_psi));
    } else {
        accumulate(dx, dphi);
        accumulate(dx, dpsi);
    }
    if (cfg.has_value_map()) {
        grads.dw_g = matmul_tn(x, dterms[0]);
        accumulate(dx, matmul_nt(dterms[0], p.w_g));
    } else {
        accumulate(dx, dterms[0]);
    }
    grads.dx = std::move(dx).reshaped(grad_y.shape());
    return grads;
}

// ---------------------------------------------------------------------------
// Closed-form references and unified instantiations (f64, single sample)

namespace {

double kernel_value(const Array& phi, std::size_t i, const Array& psi, std::size_t j, const BlockConfig& cfg,
                    double shift) {
    double s = 0;
    for (std::size_t c = 0; c < phi.cols(); ++c) s += phi(i, c) * psi(j, c);
    return cfg.kernel == Kernel::Dot ? s : std::exp(cfg.kernel_scale * s - shift);
}

struct Embedded {
    Array phi, psi, z;
};

Embedded embed(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg) {
    cfg.validate();
    require_rank2(x, "block reference");
    if (x.cols() != cfg.c1)
        throw DimensionError("block input " + shape_string(x.shape()) + " does not have c1 = " + std::to_string(cfg.c1));
    if (cfg.variant == Variant::CC && cfg.h * cfg.w != x.rows())
        throw DimensionError("CC: spatial extent does not cover the input");
    Embedded e;
    e.phi = cfg.has_embeddings() ? matmul(x, p.w_phi) : x;
    e.psi = cfg.has_embeddings() ? matmul(x, p.w_psi) : x;
    e.z = cfg.has_value_map() ? matmul(x, p.w_g) : x;
    return e;
}

/// Per-row max of c·ΦΨᵀ over the allowed columns, to keep exp finite.
double row_shift(const Array& phi, std::size_t i, const Array& psi, const BlockConfig& cfg, const CrissCrossMask* mask) {
    if (cfg.kernel == Kernel::Dot) return 0.0;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < psi.rows(); ++j) {
        if (mask && mask->c(i, j) == 0.0) continue;
        double s = 0;
        for (std::size_t c = 0; c < phi.cols(); ++c) s += phi(i, c) * psi(j, c);
        peak = std::max(peak, cfg.kernel_scale * s);
    }
    return peak;
}

Array vec(const Array& m) { return m.reshaped({m.size(), 1}); }

} // namespace

BlockOutput<double> forward_variant_reference(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg) {
    const Embedded e = embed(x, p, cfg);
    const std::size_t n = x.rows();
    const std::size_t ch = cfg.node_channels();
    BlockOutput<double> out;
    Array agg({n, ch});
    Array attention({n, n});
    Normalization tag = Normalization::RandomWalk;

    switch (cfg.variant) {
    case Variant::NL:
    case Variant::NS: {
        // O_i = Σ_j f_ij (Z_j [− Z_i]) / Σ_j f_ij
        for (std::size_t i = 0; i < n; ++i) {
            const double shift = row_shift(e.phi, i, e.psi, cfg, nullptr);
            double denom = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const double f = kernel_value(e.phi, i, e.psi, j, cfg, shift);
                denom += f;
                attention(i, j) = f;
                for (std::size_t c = 0; c < ch; ++c)
                    agg(i, c) += f * (cfg.variant == Variant::NS ? e.z(j, c) - e.z(i, c) : e.z(j, c));
            }
            if (denom == 0.0) throw IsolatedNodeError("node " + std::to_string(i) + " has degree 0", i);
            for (std::size_t c = 0; c < ch; ++c) agg(i, c) /= denom;
            for (std::size_t j = 0; j < n; ++j) attention(i, j) /= denom;
        }
        break;
    }
    case Variant::CC: {
        // Weighted mean over the positions sharing a row or column, on X.
        const CrissCrossMask mask = criss_cross_mask(cfg.h, cfg.w);
        tag = Normalization::MaskedRandomWalk;
        for (std::size_t i = 0; i < n; ++i) {
            const double shift = row_shift(e.phi, i, e.psi, cfg, &mask);
            double denom = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (mask.row_of(i) != mask.row_of(j) && mask.col_of(i) != mask.col_of(j)) continue;
                const double f = kernel_value(e.phi, i, e.psi, j, cfg, shift);
                denom += f;
                attention(i, j) = f;
                for (std::size_t c = 0; c < ch; ++c) agg(i, c) += f * x(j, c);
            }
            if (denom == 0.0) throw IsolatedNodeError("node " + std::to_string(i) + " has degree 0", i);
            for (std::size_t c = 0; c < ch; ++c) agg(i, c) /= denom;
            for (std::size_t j = 0; j < n; ++j) attention(i, j) /= denom;
        }
        break;
    }
    case Variant::A2: {
        // Gather global descriptors G = σ_col(Ψ)ᵀ Z, then distribute σ_row(Φ) G.
        tag = Normalization::SoftmaxProduct;
        const Array gather_w = softmax_cols(e.psi);
        const Array dist_w = softmax_rows(e.phi);
        Array descriptors({cfg.cs, ch});
        for (std::size_t k = 0; k < cfg.cs; ++k)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t c = 0; c < ch; ++c) descriptors(k, c) += gather_w(j, k) * e.z(j, c);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < cfg.cs; ++k)
                for (std::size_t c = 0; c < ch; ++c) agg(i, c) += dist_w(i, k) * descriptors(k, c);
        attention = matmul_nt(dist_w, gather_w);
        break;
    }
    case Variant::CGNL: {
        // Graph on the NCs entries of vec(·): o_i = Σ_j θ_i φ_j z_j / Σ_j θ_i φ_j.
        const Array theta = vec(e.phi), phi = vec(e.psi), z = vec(e.z);
        const std::size_t nodes = z.rows();
        Array o({nodes, 1});
        attention = Array({nodes, nodes});
        for (std::size_t i = 0; i < nodes; ++i) {
            double num = 0, denom = 0;
            for (std::size_t j = 0; j < nodes; ++j) {
                const double f = theta[i] * phi[j];
                num += f * z[j];
                denom += f;
                attention(i, j) = f;
            }
            if (denom == 0.0) throw IsolatedNodeError("node " + std::to_string(i) + " has degree 0", i);
            o[i] = num / denom;
            for (std::size_t j = 0; j < nodes; ++j) attention(i, j) /= denom;
        }
        agg = o.reshaped({n, ch});
        break;
    }
    case Variant::SNL: {
        // Step by step: M, M̂ = (M + Mᵀ)/2, d̂, A_ij = M̂_ij / sqrt(d̂_i d̂_j),
        // Y = X + Σ_k A^k Z W_{k+1}.
        tag = Normalization::Symmetric;
        double shift = 0;
        if (cfg.kernel != Kernel::Dot) {
            shift = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) shift = std::max(shift, row_shift(e.phi, i, e.psi, cfg, nullptr));
        }
        Array m({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) m(i, j) = kernel_value(e.phi, i, e.psi, j, cfg, shift);
        std::vector<double> d(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double hat = 0.5 * (m(i, j) + m(j, i));
                if (hat < 0.0 && !cfg.allow_indefinite) throw PropertyViolation("negative symmetrised affinity");
                d[i] += hat;
            }
        for (std::size_t i = 0; i < n; ++i)
            if (!(d[i] > 0.0)) throw IsolatedNodeError("node " + std::to_string(i) + " has non-positive degree", i);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) attention(i, j) = 0.5 * (m(i, j) + m(j, i)) / std::sqrt(d[i] * d[j]);

        Array y = x;
        Array power = e.z;
        for (std::size_t k = 0; k < cfg.order; ++k) {
            if (k > 0) {
                Array next({n, ch});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t c = 0; c < ch; ++c) next(i, c) += attention(i, j) * power(j, c);
                power = std::move(next);
            }
            const Array& w = p.w_out[k];
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < ch; ++c)
                    for (std::size_t o = 0; o < cfg.c1; ++o) y(i, o) += power(i, c) * w(c, o);
        }
        out.y = std::move(y);
        out.attention.push_back({std::move(attention), tag, cfg.kernel});
        return out;
    }
    }

    Array y = x;
    const Array& w = p.w_out[0];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t o = 0; o < cfg.c1; ++o) y(i, o) += agg(i, c) * w(c, o);
    out.y = std::move(y);
    out.attention.push_back({std::move(attention), tag, cfg.kernel});
    return out;
}

AffinityMatrix variant_affinity(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg) {
    const Embedded e = embed(x, p, cfg);
    const double c = cfg.kernel_scale;
    switch (cfg.variant) {
    case Variant::NL:
    case Variant::NS: return normalize_rw(compute_affinity(e.phi, e.psi, cfg.kernel, c));
    case Variant::CC: return masked_rw(compute_affinity(e.phi, e.psi, cfg.kernel, c), criss_cross_mask(cfg.h, cfg.w));
    case Variant::A2: return softmax_product(e.phi, e.psi);
    case Variant::CGNL: return normalize_rw(compute_affinity(vec(e.phi), vec(e.psi), Kernel::Dot, 1.0));
    case Variant::SNL:
        return normalize_sym(compute_affinity(e.phi, e.psi, cfg.kernel, c), cfg.allow_indefinite);
    }
    throw std::logic_error("unhandled variant");
}

std::vector<Array> unified_weights(const BlockParams<double>& p, const BlockConfig& cfg) {
    switch (cfg.variant) {
    case Variant::SNL: return p.w_out;
    case Variant::NS: return {scale(p.w_out[0], -1.0), p.w_out[0]};
    case Variant::CGNL: return {Array({1, 1}, 0.0), Array({1, 1}, 1.0)};
    default: return {Array(p.w_out[0].shape()), p.w_out[0]};
    }
}

BlockOutput<double> forward_variant_unified(const Array& x, const BlockParams<double>& p, const BlockConfig& cfg) {
    const Embedded e = embed(x, p, cfg);
    AffinityMatrix a = variant_affinity(x, p, cfg);
    BlockOutput<double> out;
    const auto weights = unified_weights(p, cfg);
    if (cfg.variant == Variant::CGNL) {
        // Single-channel signal on the NCs-node graph; W acts after unvec.
        const Array f = unified_operator(a.m, vec(e.z), weights);
        out.y = add(x, matmul(f.reshaped({x.rows(), cfg.cs}), p.w_out[0]));
    } else {
        out.y = add(x, unified_operator(a.m, e.z, weights));
    }
    out.attention.push_back(std::move(a));
    return out;
}

// ---------------------------------------------------------------------------
// Accounting

ParamCount count_params(const BlockConfig& cfg) {
    cfg.validate();
    const std::uint64_t c1 = cfg.c1, cs = cfg.cs;
    ParamCount count;
    std::uint64_t maps = (cfg.has_embeddings() ? 2 : 0) + (cfg.has_value_map() ? 1 : 0);
    count.weights = maps * c1 * cs + cfg.output_matrices() * cfg.node_channels() * c1;
    count.batch_norm = cfg.batch_norm ? 2 * c1 : 0;
    return count;
}

std::uint64_t count_flops(const BlockConfig& cfg, std::size_t h, std::size_t w) {
    cfg.validate();
    const std::uint64_t n = static_cast<std::uint64_t>(h) * w;
    const std::uint64_t c1 = cfg.c1, cs = cfg.cs, ch = cfg.node_channels();
    const std::uint64_t maps = (cfg.has_embeddings() ? 2 : 0) + (cfg.has_value_map() ? 1 : 0);
    const std::uint64_t logit_dim = cfg.has_embeddings() ? cs : c1;

    std::uint64_t macs = maps * n * c1 * cs;
    switch (cfg.variant) {
    case Variant::CGNL:
        macs += n * cs;               // s = rᵀ vec(Z); the rank-one graph needs no n² product
        macs += n * cs * c1;
        break;
    case Variant::SNL:
        macs += n * n * logit_dim;
        macs += (cfg.order - 1) * n * n * ch;
        macs += cfg.order * n * ch * c1;
        break;
    default:
        macs += n * n * logit_dim;
        macs += n * n * ch;
        macs += n * ch * c1;
        break;
    }
    return macs;
}

// ---------------------------------------------------------------------------

#define SNL_INSTANTIATE(T)                                                                                      \
    template BlockParams<T> init_block_params<T>(const BlockConfig&, Rng&);                                     \
    template void zero_filter_weights(BlockParams<T>&);                                                         \
    template DenseArray<T> unified_operator(const DenseArray<T>&, const DenseArray<T>&,                         \
                                            const std::vector<DenseArray<T>>&);                                 \
    template BlockOutput<T> forward_block(const DenseArray<T>&, const BlockParams<T>&, const BlockConfig&,      \
                                          ForwardOptions);                                                      \
    template BlockOutput<T> forward_snl(const DenseArray<T>&, const BlockParams<T>&, const BlockConfig&,        \
                                        ForwardOptions);                                                        \
    template BlockGrads<T> block_backward(const DenseArray<T>&, const BlockParams<T>&, const BlockConfig&,      \
                                          const BlockCache<T>&);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

template BlockParams<float> BlockParams<double>::cast<float>() const;
template BlockParams<double> BlockParams<float>::cast<double>() const;
template BlockParams<double> BlockParams<double>::cast<double>() const;

} // namespace snl
