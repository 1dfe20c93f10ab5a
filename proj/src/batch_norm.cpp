#include "snl/batch_norm.hpp"

#include <cmath>

namespace snl {

template <typename T>
BatchNorm<T> BatchNorm<T>::identity(std::size_t channels) {
    BatchNorm bn;
    bn.gamma = DenseArray<T>({channels}, T(1));
    bn.beta = DenseArray<T>({channels}, T(0));
    bn.running_mean = DenseArray<T>({channels}, T(0));
    bn.running_var = DenseArray<T>({channels}, T(1));
    return bn;
}

template <typename T>
DenseArray<T> batch_norm_forward(const DenseArray<T>& x, const BatchNorm<T>& bn, BnMode mode,
                                 BatchNormCache<T>& cache) {
    cache.mode = mode;
    if (mode == BnMode::Off) return x;
    require_rank2(x, "batch_norm_forward");
    const std::size_t m = x.rows();
    const std::size_t c = x.cols();
    if (bn.channels() != c)
        throw DimensionError("batch_norm_forward: " + std::to_string(bn.channels()) + " channels vs input " +
                             shape_string(x.shape()));

    cache.batch_mean.assign(c, T(0));
    cache.batch_var.assign(c, T(0));
    cache.inv_std.assign(c, T(0));
    if (mode == BnMode::Train) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) cache.batch_mean[j] += x(i, j);
        for (std::size_t j = 0; j < c; ++j) cache.batch_mean[j] /= static_cast<T>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const T d = x(i, j) - cache.batch_mean[j];
                cache.batch_var[j] += d * d;
            }
        for (std::size_t j = 0; j < c; ++j) {
            cache.batch_var[j] /= static_cast<T>(m);
            cache.inv_std[j] = T(1) / std::sqrt(cache.batch_var[j] + bn.eps);
        }
    } else {
        for (std::size_t j = 0; j < c; ++j) {
            cache.batch_mean[j] = bn.running_mean[j];
            cache.batch_var[j] = bn.running_var[j];
            cache.inv_std[j] = T(1) / std::sqrt(bn.running_var[j] + bn.eps);
        }
    }

    cache.normalized = DenseArray<T>::uninitialized(x.shape());
    auto out = DenseArray<T>::uninitialized(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T xhat = (x(i, j) - cache.batch_mean[j]) * cache.inv_std[j];
            cache.normalized(i, j) = xhat;
            out(i, j) = bn.gamma[j] * xhat + bn.beta[j];
        }
    return out;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const DenseArray<T>& g, const BatchNorm<T>& bn,
                                      const BatchNormCache<T>& cache) {
    if (cache.mode == BnMode::Off) return {g, {}, {}};
    const std::size_t m = g.rows();
    const std::size_t c = g.cols();
    BatchNormGrads<T> out{DenseArray<T>::uninitialized(g.shape()), DenseArray<T>({c}), DenseArray<T>({c})};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            out.dbeta[j] += g(i, j);
            out.dgamma[j] += g(i, j) * cache.normalized(i, j);
        }
    if (cache.mode == BnMode::Inference) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) out.dx(i, j) = g(i, j) * bn.gamma[j] * cache.inv_std[j];
        return out;
    }
    // dx = γ/(m σ) · (m g − Σg − x̂ Σ(g x̂))
    const T rows = static_cast<T>(m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const T k = bn.gamma[j] * cache.inv_std[j] / rows;
            out.dx(i, j) = k * (rows * g(i, j) - out.dbeta[j] - cache.normalized(i, j) * out.dgamma[j]);
        }
    return out;
}

template <typename T>
void update_running_stats(BatchNorm<T>& bn, const BatchNormCache<T>& cache, std::size_t rows) {
    if (cache.mode != BnMode::Train) return;
    const T unbias = rows > 1 ? static_cast<T>(rows) / static_cast<T>(rows - 1) : T(1);
    for (std::size_t j = 0; j < bn.channels(); ++j) {
        bn.running_mean[j] = (T(1) - bn.momentum) * bn.running_mean[j] + bn.momentum * cache.batch_mean[j];
        bn.running_var[j] = (T(1) - bn.momentum) * bn.running_var[j] + bn.momentum * cache.batch_var[j] * unbias;
    }
}

#define SNL_INSTANTIATE(T)                                                                                     \
    template struct BatchNorm<T>;                                                                              \
    template DenseArray<T> batch_norm_forward(const DenseArray<T>&, const BatchNorm<T>&, BnMode,               \
                                              BatchNormCache<T>&);                                             \
    template BatchNormGrads<T> batch_norm_backward(const DenseArray<T>&, const BatchNorm<T>&,                  \
                                                   const BatchNormCache<T>&);                                  \
    template void update_running_stats(BatchNorm<T>&, const BatchNormCache<T>&, std::size_t);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

} // namespace snl
