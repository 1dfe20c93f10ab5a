#pragma once

#include "snl/tensor.hpp"

namespace snl {

enum class BnMode {
    Off,       ///< identity, no parameters touched
    Train,     ///< normalise with the statistics of the current rows
    Inference, ///< normalise with the running statistics
};

/// Per-channel batch normalisation over the rows of an (m × c) matrix.
template <typename T>
struct BatchNorm {
    DenseArray<T> gamma;
    DenseArray<T> beta;
    DenseArray<T> running_mean;
    DenseArray<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    /// γ = 1, β = 0, running mean 0, running variance 1.
    static BatchNorm identity(std::size_t channels);
    std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct BatchNormCache {
    DenseArray<T> normalized; ///< x̂
    std::vector<T> inv_std;
    std::vector<T> batch_mean;
    std::vector<T> batch_var; ///< biased
    BnMode mode = BnMode::Off;
};

template <typename T>
struct BatchNormGrads {
    DenseArray<T> dx;
    DenseArray<T> dgamma;
    DenseArray<T> dbeta;
};

template <typename T>
DenseArray<T> batch_norm_forward(const DenseArray<T>& x, const BatchNorm<T>& bn, BnMode mode,
                                 BatchNormCache<T>& cache);

template <typename T>
BatchNormGrads<T> batch_norm_backward(const DenseArray<T>& grad_out, const BatchNorm<T>& bn,
                                      const BatchNormCache<T>& cache);

/// Folds the batch statistics of a Train-mode forward into the running
/// estimates (unbiased variance, exponential moving average).
template <typename T>
void update_running_stats(BatchNorm<T>& bn, const BatchNormCache<T>& cache, std::size_t rows);

} // namespace snl
