#include "snl/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace snl {

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMajor<T>> view(const DenseArray<T>& a) {
    return {a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}

template <typename T>
Eigen::Map<RowMajor<T>> view(DenseArray<T>& a) {
    return {a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols())};
}

std::size_t product(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void check_rank(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
        throw DimensionError("array rank must be 1..4, got shape " + shape_string(shape));
}

} // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
DenseArray<T>::DenseArray(Shape shape, T fill) : shape_(std::move(shape)) {
    check_rank(shape_);
    data_.assign(product(shape_), fill);
}

template <typename T>
DenseArray<T>::DenseArray(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_rank(shape_);
    if (product(shape_) != data_.size())
        throw DimensionError("shape " + shape_string(shape_) + " needs " + std::to_string(product(shape_)) +
                             " elements, got " + std::to_string(data_.size()));
}

template <typename T>
DenseArray<T> DenseArray<T>::uninitialized(Shape shape) {
    DenseArray out;
    check_rank(shape);
    out.data_.resize(product(shape));
    out.shape_ = std::move(shape);
    return out;
}

template <typename T>
DenseArray<T> DenseArray<T>::identity(std::size_t n) {
    DenseArray out({n, n});
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
}

template <typename T>
DenseArray<T> DenseArray<T>::from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged row list");
        data.insert(data.end(), row.begin(), row.end());
    }
    return DenseArray({r, c}, std::move(data));
}

template <typename T>
DenseArray<T> DenseArray<T>::diagonal(std::span<const T> values) {
    DenseArray out({values.size(), values.size()});
    for (std::size_t i = 0; i < values.size(); ++i) out(i, i) = values[i];
    return out;
}

template <typename T>
DenseArray<T> DenseArray<T>::reshaped(Shape shape) const& {
    return DenseArray(*this).reshaped(std::move(shape));
}

template <typename T>
DenseArray<T> DenseArray<T>::reshaped(Shape shape) && {
    check_rank(shape);
    if (product(shape) != data_.size())
        throw DimensionError("shape " + shape_string(shape) + " needs " + std::to_string(product(shape)) +
                             " elements, got " + std::to_string(data_.size()));
    DenseArray out = std::move(*this);
    out.shape_ = std::move(shape);
    return out;
}

template <typename T>
DenseArray<T> DenseArray<T>::slice(std::size_t b) const {
    if (rank() != 3) throw DimensionError("slice needs a rank-3 array, got " + shape_string(shape_));
    const std::size_t stride = shape_[1] * shape_[2];
    auto out = uninitialized({shape_[1], shape_[2]});
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(b * stride), stride, out.data_.begin());
    return out;
}

template <typename T>
void DenseArray<T>::set_slice(std::size_t b, const DenseArray& item) {
    if (rank() != 3 || item.rank() != 2 || item.rows() != shape_[1] || item.cols() != shape_[2])
        throw DimensionError("set_slice: " + shape_string(item.shape()) + " into " + shape_string(shape_));
    std::copy(item.data_.begin(), item.data_.end(), data_.begin() + static_cast<std::ptrdiff_t>(b * item.size()));
}

template <typename T>
void require_rank2(const DenseArray<T>& a, const char* what) {
    if (a.rank() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_string(a.shape()));
}

template <typename T>
void require_same_shape(const DenseArray<T>& a, const DenseArray<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

template <typename T>
DenseArray<T> matmul(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    if (a.cols() == 0) return DenseArray<T>({a.rows(), b.cols()});
    auto out = DenseArray<T>::uninitialized({a.rows(), b.cols()});
    view(out).noalias() = view(a) * view(b);
    return out;
}

template <typename T>
DenseArray<T> matmul_tn(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_rank2(a, "matmul_tn");
    require_rank2(b, "matmul_tn");
    if (a.rows() != b.rows())
        throw DimensionError("matmul_tn: row extents differ, " + shape_string(a.shape()) + "^T x " +
                             shape_string(b.shape()));
    if (a.rows() == 0) return DenseArray<T>({a.cols(), b.cols()});
    auto out = DenseArray<T>::uninitialized({a.cols(), b.cols()});
    view(out).noalias() = view(a).transpose() * view(b);
    return out;
}

template <typename T>
DenseArray<T> matmul_nt(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw DimensionError("matmul_nt: column extents differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()) + "^T");
    if (a.cols() == 0) return DenseArray<T>({a.rows(), b.rows()});
    auto out = DenseArray<T>::uninitialized({a.rows(), b.rows()});
    view(out).noalias() = view(a) * view(b).transpose();
    return out;
}

template <typename T>
DenseArray<T> transpose(const DenseArray<T>& a) {
    require_rank2(a, "transpose");
    auto out = DenseArray<T>::uninitialized({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
DenseArray<T> add(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_same_shape(a, b, "add");
    DenseArray<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

template <typename T>
DenseArray<T> sub(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_same_shape(a, b, "sub");
    DenseArray<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

template <typename T>
DenseArray<T> hadamard(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_same_shape(a, b, "hadamard");
    DenseArray<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

template <typename T>
DenseArray<T> scale(const DenseArray<T>& a, T factor) {
    DenseArray<T> out = a;
    for (auto& v : out.values()) v *= factor;
    return out;
}

template <typename T>
DenseArray<T> exp_elementwise(const DenseArray<T>& a) {
    DenseArray<T> out = a;
    for (auto& v : out.values()) v = std::exp(v);
    return out;
}

template <typename T>
void accumulate(DenseArray<T>& a, const DenseArray<T>& b) {
    require_same_shape(a, b, "accumulate");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
DenseArray<T> softmax_rows(const DenseArray<T>& m) {
    require_rank2(m, "softmax_rows");
    DenseArray<T> out(m.shape());
    if (m.empty()) return out;
    auto in = view(m);
    auto o = view(out);
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
        const T peak = in.row(i).maxCoeff();
        o.row(i) = (in.row(i).array() - peak).exp().matrix();
        o.row(i) /= o.row(i).sum();
    }
    return out;
}

template <typename T>
DenseArray<T> softmax_cols(const DenseArray<T>& m) {
    return transpose(softmax_rows(transpose(m)));
}

template <typename T>
DenseArray<T> softmax_rows_backward(const DenseArray<T>& y, const DenseArray<T>& g) {
    require_same_shape(y, g, "softmax_rows_backward");
    DenseArray<T> out(y.shape());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = y(i, j) * (g(i, j) - dot);
    }
    return out;
}

template <typename T>
DenseArray<T> softmax_cols_backward(const DenseArray<T>& y, const DenseArray<T>& g) {
    return transpose(softmax_rows_backward(transpose(y), transpose(g)));
}

template <typename T>
double frobenius_norm(const DenseArray<T>& a) {
    double s = 0;
    for (auto v : a.values()) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <typename T>
double max_abs(const DenseArray<T>& a) {
    double m = 0;
    for (auto v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename T>
double max_abs_diff(const DenseArray<T>& a, const DenseArray<T>& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
double scaled_max_error(const DenseArray<T>& a, const DenseArray<T>& b) {
    return max_abs_diff(a, b) / std::max(1.0, max_abs(b));
}

template <typename T>
bool all_finite(const DenseArray<T>& a) {
    // v·0 is NaN exactly for inf and NaN; the sum vectorises where an early-exit scan would not.
    const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> v(a.data(), static_cast<Eigen::Index>(a.size()));
    return std::isfinite((v * T(0)).sum());
}

#define SNL_INSTANTIATE(T)                                                                         \
    template class DenseArray<T>;                                                                  \
    template void require_rank2(const DenseArray<T>&, const char*);                                \
    template void require_same_shape(const DenseArray<T>&, const DenseArray<T>&, const char*);     \
    template DenseArray<T> matmul(const DenseArray<T>&, const DenseArray<T>&);                     \
    template DenseArray<T> matmul_tn(const DenseArray<T>&, const DenseArray<T>&);                  \
    template DenseArray<T> matmul_nt(const DenseArray<T>&, const DenseArray<T>&);                  \
    template DenseArray<T> transpose(const DenseArray<T>&);                                        \
    template DenseArray<T> add(const DenseArray<T>&, const DenseArray<T>&);                        \
    template DenseArray<T> sub(const DenseArray<T>&, const DenseArray<T>&);                        \
    template DenseArray<T> hadamard(const DenseArray<T>&, const DenseArray<T>&);                   \
    template DenseArray<T> scale(const DenseArray<T>&, T);                                         \
    template DenseArray<T> exp_elementwise(const DenseArray<T>&);                                  \
    template void accumulate(DenseArray<T>&, const DenseArray<T>&);                                \
    template DenseArray<T> softmax_rows(const DenseArray<T>&);                                     \
    template DenseArray<T> softmax_cols(const DenseArray<T>&);                                     \
    template DenseArray<T> softmax_rows_backward(const DenseArray<T>&, const DenseArray<T>&);      \
    template DenseArray<T> softmax_cols_backward(const DenseArray<T>&, const DenseArray<T>&);      \
    template double frobenius_norm(const DenseArray<T>&);                                          \
    template double max_abs(const DenseArray<T>&);                                                 \
    template double max_abs_diff(const DenseArray<T>&, const DenseArray<T>&);                      \
    template double scaled_max_error(const DenseArray<T>&, const DenseArray<T>&);                  \
    template bool all_finite(const DenseArray<T>&);

SNL_INSTANTIATE(float)
SNL_INSTANTIATE(double)

#undef SNL_INSTANTIATE

} // namespace snl
