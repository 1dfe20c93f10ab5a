#pragma once

#include "snl/tensor.hpp"

namespace snl {

/// Spatial layers on NHWC activations (B×H×W×C).

/// 3×3 patches with zero padding 1, one row per output position, columns
/// ordered (ky, kx, c).
template <typename T>
DenseArray<T> im2col(const DenseArray<T>& x, std::size_t stride);

/// Adjoint of im2col: scatters column gradients back onto the input grid.
template <typename T>
DenseArray<T> col2im(const DenseArray<T>& cols, const Shape& input_shape, std::size_t stride);

template <typename T>
struct ConvCache {
    DenseArray<T> cols;
    Shape input_shape;
    std::size_t stride = 1;
};

/// 3×3 convolution, padding 1, no bias. w is (9·C_in)×C_out.
template <typename T>
DenseArray<T> conv3x3_forward(const DenseArray<T>& x, const DenseArray<T>& w, std::size_t stride,
                              ConvCache<T>* cache = nullptr);

template <typename T>
struct ConvGrads {
    DenseArray<T> dx;
    DenseArray<T> dw;
};

template <typename T>
ConvGrads<T> conv3x3_backward(const DenseArray<T>& grad_out, const DenseArray<T>& w, const ConvCache<T>& cache);

template <typename T>
DenseArray<T> relu(const DenseArray<T>& x);

/// Passes the gradient where the forward output was positive.
template <typename T>
DenseArray<T> relu_backward(const DenseArray<T>& grad, const DenseArray<T>& output);

/// B×H×W×C → B×C.
template <typename T>
DenseArray<T> global_avg_pool(const DenseArray<T>& x);

template <typename T>
DenseArray<T> global_avg_pool_backward(const DenseArray<T>& grad, const Shape& input_shape);

} // namespace snl
