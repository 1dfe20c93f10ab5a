#include "snl/conv.hpp"

namespace snl {

namespace {

std::size_t out_extent(std::size_t in, std::size_t stride) { return (in + 2 - 3) / stride + 1; }

void require_nhwc(const Shape& s, const char* op) {
    if (s.size() != 4) throw DimensionError(std::string(op) + ": expected B×H×W×C, got " + shape_string(s));
}

} // namespace

template <typename T>
DenseArray<T> im2col(const DenseArray<T>& x, std::size_t stride) {
    require_nhwc(x.shape(), "im2col");
    if (stride == 0) throw DimensionError("im2col: stride must be positive");
    const std::size_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t oh = out_extent(h, stride), ow = out_extent(w, stride);
    DenseArray<T> cols({b * oh * ow, 9 * c});
    const T* src = x.data();
    T* dst = cols.data();
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    for (std::size_t kx = 0; kx < 3; ++kx, dst += c) {
                        const long ix = static_cast<long>(ox * stride + kx) - 1;
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                        const T* p = src + ((n * h + iy) * w + ix) * c;
                        std::copy(p, p + c, dst);
                    }
                }
            }
    return cols;
}

template <typename T>
DenseArray<T> col2im(const DenseArray<T>& cols, const Shape& input_shape, std::size_t stride) {
    require_nhwc(input_shape, "col2im");
    const std::size_t b = input_shape[0], h = input_shape[1], w = input_shape[2], c = input_shape[3];
    const std::size_t oh = out_extent(h, stride), ow = out_extent(w, stride);
    if (cols.rank() != 2 || cols.rows() != b * oh * ow || cols.cols() != 9 * c)
        throw DimensionError("col2im: columns " + shape_string(cols.shape()) + " do not match input " +
                             shape_string(input_shape));
    DenseArray<T> x(input_shape);
    T* dst = x.data();
    const T* src = cols.data();
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    for (std::size_t kx = 0; kx < 3; ++kx, src += c) {
                        const long ix = static_cast<long>(ox * stride + kx) - 1;
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                        T* p = dst + ((n * h + iy) * w + ix) * c;
                        for (std::size_t k = 0; k < c; ++k) p[k] += src[k];
                    }
                }
            }
    return x;
}

template <typename T>
DenseArray<T> conv3x3_forward(const DenseArray<T>& x, const DenseArray<T>& w, std::size_t stride, ConvCache<T>* cache) {
    require_nhwc(x.shape(), "conv3x3_forward");
    if (w.rank() != 2 || w.rows() != 9 * x.dim(3))
        throw DimensionError("conv3x3_forward: weight " + shape_string(w.shape()) + " vs input " + shape_string(x.shape()));
    DenseArray<T> cols = im2col(x, stride);
    DenseArray<T> out = matmul(cols, w);
    const Shape out_shape{x.dim(0), out_extent(x.dim(1), stride), out_extent(x.dim(2), stride), w.cols()};
    if (cache) {
        cache->cols = std::move(cols);
        cache->input_shape = x.shape();
        cache->stride = stride;
    }
    return std::move(out).reshaped(out_shape);
}

template <typename T>
ConvGrads<T> conv3x3_backward(const DenseArray<T>& grad_out, const DenseArray<T>& w, const ConvCache<T>& cache) {
    const DenseArray<T> g = grad_out.reshaped({cache.cols.rows(), w.cols()});
    ConvGrads<T> out;
    out.dw = matmul_tn(cache.cols, g);
    out.dx = col2im(matmul_nt(g, w), cache.input_shape, cache.stride);
    return out;
}

template <typename T>
DenseArray<T> relu(const DenseArray<T>& x) {
    auto out = DenseArray<T>::uninitialized(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return out;
}

template <typename T>
DenseArray<T> relu_backward(const DenseArray<T>& grad, const DenseArray<T>& output) {
    require_same_shape(grad, output, "relu_backward");
    auto out = DenseArray<T>::uninitialized(grad.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = output[i] > T(0) ? grad[i] : T(0);
    return out;
}

template <typename T>
DenseArray<T> global_avg_pool(const DenseArray<T>& x) {
    require_nhwc(x.shape(), "global_avg_pool");
    const std::size_t b = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    DenseArray<T> out({b, c});
    for (std::size_t n = 0; n < b; ++n) {
        const T* p = x.data() + n * hw * c;
        for (std::size_t i = 0; i < hw; ++i)
            for (std::size_t k = 0; k < c; ++k) out(n, k) += p[i * c + k];
        for (std::size_t k = 0; k < c; ++k) out(n, k) /= static_cast<T>(hw);
    }
    return out;
}

template <typename T>
DenseArray<T> global_avg_pool_backward(const DenseArray<T>& grad, const Shape& input_shape) {
    require_nhwc(input_shape, "global_avg_pool_backward");
    const std::size_t b = input_shape[0], hw = input_shape[1] * input_shape[2], c = input_shape[3];
    auto out = DenseArray<T>::uninitialized(input_shape);
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t i = 0; i < hw; ++i)
            for (std::size_t k = 0; k < c; ++k) out.data()[(n * hw + i) * c + k] = grad(n, k) / static_cast<T>(hw);
    return out;
}

#define SNL_INSTANTIATE(T)                                                                                    \
    template DenseArray<T> im2col(const DenseArray<T>&, std::size_t);                                         \
    template DenseArray<T> col2im(const DenseArray<T>&, const Shape&, std::size_t);                           \
    template DenseArray<T> conv3x3_forward(const DenseArray<T>&, const DenseArray<T>&, std::size_t,           \
                                           ConvCache<T>*);                                                    \
    template ConvGrads<T> conv3x3_backward(const DenseArray<T>&, const DenseArray<T>&, const ConvCache<T>&);  \
    template DenseArray<T> relu(const DenseArray<T>&);                                                        \
    template DenseArray<T> relu_backward(const DenseArray<T>&, const DenseArray<T>&);                         \
    template DenseArray<T> global_avg_pool(const DenseArray<T>&);                                             \
    template DenseArray<T> global_avg_pool_backward(const DenseArray<T>&, const Shape&);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

} // namespace snl
