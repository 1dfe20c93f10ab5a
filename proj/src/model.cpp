#include "snl/model.hpp"

#include <cmath>

namespace snl {

std::size_t BackboneConfig::stage_extent(std::size_t s) const {
    std::size_t side = image;
    for (std::size_t i = 0; i < s; ++i) side = (side + 2 - 3) / 2 + 1;
    return side;
}

BackboneConfig BackboneConfig::resolved() const {
    if (image < 1) throw ConfigError("backbone: image size must be positive");
    if (in_channels < 1) throw ConfigError("backbone: need at least one input channel");
    if (classes < 1) throw ConfigError("backbone: need at least one class");
    for (auto wd : widths)
        if (wd < 1) throw ConfigError("backbone: stage widths must be positive");
    BackboneConfig out = *this;
    if (!block) return out;
    if (stage < 1 || stage > 3) throw ConfigError("backbone: insertion stage must be 1, 2 or 3, got " + std::to_string(stage));
    const std::size_t width = widths[stage - 1];
    if (out.block->c1 != 0 && out.block->c1 != width)
        throw ConfigError("backbone: c1 = " + std::to_string(out.block->c1) + " but stage " + std::to_string(stage) +
                          " has " + std::to_string(width) + " channels");
    out.block->c1 = width;
    out.block->h = out.block->w = stage_extent(stage);
    out.block->validate();
    return out;
}

namespace {

template <typename T>
DenseArray<T> he_normal(std::size_t fan_in, std::size_t cols, Rng& rng) {
    DenseArray<T> w({fan_in, cols});
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, sd));
    return w;
}

template <typename U, typename T>
BatchNorm<U> cast_bn(const BatchNorm<T>& bn) {
    BatchNorm<U> out;
    out.gamma = bn.gamma.template cast<U>();
    out.beta = bn.beta.template cast<U>();
    out.running_mean = bn.running_mean.template cast<U>();
    out.running_var = bn.running_var.template cast<U>();
    out.momentum = static_cast<U>(bn.momentum);
    out.eps = static_cast<U>(bn.eps);
    return out;
}

template <typename T>
DenseArray<T> zeros_of(const DenseArray<T>& a) {
    return DenseArray<T>(a.shape());
}

} // namespace

template <typename T>
template <typename U>
BackboneParams<U> BackboneParams<T>::cast() const {
    BackboneParams<U> out;
    for (std::size_t s = 0; s < 3; ++s) {
        out.stages[s].w = stages[s].w.template cast<U>();
        out.stages[s].bn = cast_bn<U>(stages[s].bn);
    }
    if (block) out.block = block->template cast<U>();
    out.head_w = head_w.template cast<U>();
    out.head_b = head_b.template cast<U>();
    return out;
}

template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& raw, Rng& rng) {
    const BackboneConfig cfg = raw.resolved();
    BackboneParams<T> p;
    std::size_t cin = cfg.in_channels;
    for (std::size_t s = 0; s < 3; ++s) {
        p.stages[s].w = he_normal<T>(9 * cin, cfg.widths[s], rng);
        p.stages[s].bn = BatchNorm<T>::identity(cfg.widths[s]);
        cin = cfg.widths[s];
    }
    if (cfg.block) p.block = init_block_params<T>(*cfg.block, rng);
    // Small head so the initial predictions are close to uniform.
    p.head_w = DenseArray<T>({cin, cfg.classes});
    const double sd = 0.1 / std::sqrt(static_cast<double>(cin));
    for (auto& v : p.head_w.values()) v = static_cast<T>(rng.normal(0.0, sd));
    p.head_b = DenseArray<T>({cfg.classes});
    return p;
}

template <typename T>
BackboneParams<T> zeros_like(const BackboneParams<T>& p) {
    BackboneParams<T> out;
    for (std::size_t s = 0; s < 3; ++s) {
        out.stages[s].w = zeros_of(p.stages[s].w);
        out.stages[s].bn.gamma = zeros_of(p.stages[s].bn.gamma);
        out.stages[s].bn.beta = zeros_of(p.stages[s].bn.beta);
        out.stages[s].bn.running_mean = zeros_of(p.stages[s].bn.running_mean);
        out.stages[s].bn.running_var = zeros_of(p.stages[s].bn.running_var);
    }
    if (p.block) {
        BlockParams<T> b;
        b.w_phi = zeros_of(p.block->w_phi);
        b.w_psi = zeros_of(p.block->w_psi);
        b.w_g = zeros_of(p.block->w_g);
        for (const auto& w : p.block->w_out) b.w_out.push_back(zeros_of(w));
        b.bn.gamma = zeros_of(p.block->bn.gamma);
        b.bn.beta = zeros_of(p.block->bn.beta);
        b.bn.running_mean = zeros_of(p.block->bn.running_mean);
        b.bn.running_var = zeros_of(p.block->bn.running_var);
        out.block = std::move(b);
    }
    out.head_w = zeros_of(p.head_w);
    out.head_b = zeros_of(p.head_b);
    return out;
}

namespace {

// One traversal shared by the const and mutable visitors.
template <typename P, typename F>
void visit_params(P& p, F&& fn) {
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string prefix = "stage" + std::to_string(s + 1) + ".";
        fn(prefix + "conv.w", p.stages[s].w);
        fn(prefix + "bn.gamma", p.stages[s].bn.gamma);
        fn(prefix + "bn.beta", p.stages[s].bn.beta);
    }
    if (p.block) {
        auto& b = *p.block;
        if (!b.w_phi.empty()) fn(std::string("block.w_phi"), b.w_phi);
        if (!b.w_psi.empty()) fn(std::string("block.w_psi"), b.w_psi);
        if (!b.w_g.empty()) fn(std::string("block.w_g"), b.w_g);
        for (std::size_t k = 0; k < b.w_out.size(); ++k) fn("block.w_out" + std::to_string(k + 1), b.w_out[k]);
        fn(std::string("block.bn.gamma"), b.bn.gamma);
        fn(std::string("block.bn.beta"), b.bn.beta);
    }
    fn(std::string("head.w"), p.head_w);
    fn(std::string("head.b"), p.head_b);
}

} // namespace

template <typename T>
void for_each_param(BackboneParams<T>& p, const std::function<void(const std::string&, DenseArray<T>&)>& fn) {
    visit_params(p, fn);
}

template <typename T>
void for_each_param(const BackboneParams<T>& p,
                    const std::function<void(const std::string&, const DenseArray<T>&)>& fn) {
    visit_params(p, fn);
}

template <typename T>
void for_each_buffer(BackboneParams<T>& p, const std::function<void(const std::string&, DenseArray<T>&)>& fn) {
    for (std::size_t s = 0; s < 3; ++s) {
        const std::string prefix = "stage" + std::to_string(s + 1) + ".bn.";
        fn(prefix + "running_mean", p.stages[s].bn.running_mean);
        fn(prefix + "running_var", p.stages[s].bn.running_var);
    }
    if (p.block) {
        fn("block.bn.running_mean", p.block->bn.running_mean);
        fn("block.bn.running_var", p.block->bn.running_var);
    }
}

template <typename T>
BackboneOutput<T> backbone_forward(const DenseArray<T>& x, const BackboneParams<T>& p, const BackboneConfig& raw,
                                   BnMode mode, bool keep_attention) {
    const BackboneConfig cfg = raw.resolved();
    if (x.rank() != 4 || x.dim(1) != cfg.image || x.dim(2) != cfg.image || x.dim(3) != cfg.in_channels)
        throw DimensionError("backbone: input " + shape_string(x.shape()) + " is not B×" + std::to_string(cfg.image) + "×" +
                             std::to_string(cfg.image) + "×" + std::to_string(cfg.in_channels));
    const std::size_t batch = x.dim(0);
    BackboneOutput<T> out;
    BackboneCache<T>& cache = out.cache;
    DenseArray<T> h = x;
    for (std::size_t s = 0; s < 3; ++s) {
        DenseArray<T> c = conv3x3_forward(h, p.stages[s].w, 2, &cache.conv[s]);
        const Shape shape = c.shape();
        const std::size_t rows = c.size() / shape[3];
        DenseArray<T> normed = batch_norm_forward(std::move(c).reshaped({rows, shape[3]}), p.stages[s].bn, mode,
                                                  cache.bn[s]);
        h = relu(normed).reshaped(shape);
        cache.activation[s] = h;
        if (cfg.block && s + 1 == cfg.stage) {
            ForwardOptions opts{mode, keep_attention};
            BlockOutput<T> b = forward_block(std::move(h).reshaped({batch, shape[1] * shape[2], shape[3]}), *p.block, *cfg.block, opts);
            h = std::move(b.y).reshaped(shape);
            cache.block = std::move(b.cache);
            out.attention = std::move(b.attention);
        }
    }
    cache.pooled_from = h.shape();
    cache.pooled = global_avg_pool(h);
    out.logits = matmul(cache.pooled, p.head_w);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t k = 0; k < cfg.classes; ++k) out.logits(i, k) += p.head_b[k];
    return out;
}

template <typename T>
BackboneParams<T> backbone_backward(const DenseArray<T>& grad_logits, const BackboneParams<T>& p,
                                    const BackboneConfig& raw, const BackboneCache<T>& cache) {
    const BackboneConfig cfg = raw.resolved();
    BackboneParams<T> g = zeros_like(p);
    g.head_w = matmul_tn(cache.pooled, grad_logits);
    for (std::size_t i = 0; i < grad_logits.rows(); ++i)
        for (std::size_t k = 0; k < grad_logits.cols(); ++k) g.head_b[k] += grad_logits(i, k);
    DenseArray<T> dh = global_avg_pool_backward(matmul_nt(grad_logits, p.head_w), cache.pooled_from);

    for (std::size_t s = 3; s-- > 0;) {
        const Shape shape = cache.activation[s].shape();
        if (cfg.block && s + 1 == cfg.stage) {
            BlockGrads<T> bg = block_backward(std::move(dh).reshaped({shape[0], shape[1] * shape[2], shape[3]}), *p.block,
                                              *cfg.block, *cache.block);
            dh = std::move(bg.dx).reshaped(shape);
            auto& b = *g.block;
            if (!bg.dw_phi.empty()) b.w_phi = std::move(bg.dw_phi);
            if (!bg.dw_psi.empty()) b.w_psi = std::move(bg.dw_psi);
            if (!bg.dw_g.empty()) b.w_g = std::move(bg.dw_g);
            b.w_out = std::move(bg.dw_out);
            b.bn.gamma = std::move(bg.dgamma);
            b.bn.beta = std::move(bg.dbeta);
        }
        DenseArray<T> drelu = relu_backward(dh, cache.activation[s]);
        const std::size_t rows = drelu.size() / shape[3];
        BatchNormGrads<T> bn = batch_norm_backward(std::move(drelu).reshaped({rows, shape[3]}), p.stages[s].bn, cache.bn[s]);
        g.stages[s].bn.gamma = std::move(bn.dgamma);
        g.stages[s].bn.beta = std::move(bn.dbeta);
        ConvGrads<T> cg = conv3x3_backward(std::move(bn.dx).reshaped(shape), p.stages[s].w, cache.conv[s]);
        g.stages[s].w = std::move(cg.dw);
        dh = std::move(cg.dx);
    }
    return g;
}

template <typename T>
void update_backbone_stats(BackboneParams<T>& p, const BackboneCache<T>& cache) {
    for (std::size_t s = 0; s < 3; ++s) update_running_stats(p.stages[s].bn, cache.bn[s], cache.bn[s].normalized.rows());
    if (p.block && cache.block) update_running_stats(p.block->bn, cache.block->bn, cache.block->bn.normalized.rows());
}

#define SNL_INSTANTIATE(T)                                                                                        \
    template BackboneParams<T> init_backbone<T>(const BackboneConfig&, Rng&);                                     \
    template BackboneParams<T> zeros_like(const BackboneParams<T>&);                                              \
    template void for_each_param(BackboneParams<T>&,                                                              \
                                 const std::function<void(const std::string&, DenseArray<T>&)>&);                 \
    template void for_each_param(const BackboneParams<T>&,                                                        \
                                 const std::function<void(const std::string&, const DenseArray<T>&)>&);           \
    template void for_each_buffer(BackboneParams<T>&,                                                             \
                                  const std::function<void(const std::string&, DenseArray<T>&)>&);                \
    template BackboneOutput<T> backbone_forward(const DenseArray<T>&, const BackboneParams<T>&,                   \
                                                const BackboneConfig&, BnMode, bool);                             \
    template BackboneParams<T> backbone_backward(const DenseArray<T>&, const BackboneParams<T>&,                  \
                                                 const BackboneConfig&, const BackboneCache<T>&);                 \
    template void update_backbone_stats(BackboneParams<T>&, const BackboneCache<T>&);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

template BackboneParams<double> BackboneParams<float>::cast<double>() const;
template BackboneParams<float> BackboneParams<double>::cast<float>() const;

} // namespace snl
