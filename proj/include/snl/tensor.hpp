#pragma once

#include <cstddef>
#include <algorithm>
#include <initializer_list>
#include <memory>
#include <new>
#include <type_traits>
#include <utility>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace snl {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SymmetryError : public std::domain_error {
public:
    SymmetryError(const std::string& what, double max_asymmetry)
        : std::domain_error(what), max_asymmetry_(max_asymmetry) {}
    double max_asymmetry() const noexcept { return max_asymmetry_; }

private:
    double max_asymmetry_;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

namespace detail {
// Cache-line aligned storage that leaves elements default-initialised on
// resize, so buffers about to be overwritten skip the zero fill. Unaligned
// rows cost about 2x on wide vector loads.
template <typename T>
struct ArrayAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    ArrayAllocator() = default;
    template <typename U>
    ArrayAllocator(const ArrayAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) { ::new (static_cast<void*>(p)) U; }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) { ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...); }

    template <typename U>
    bool operator==(const ArrayAllocator<U>&) const noexcept { return true; }
};
} // namespace detail

std::string shape_string(const Shape& shape);

/// Dense row-major array of rank 1 to 4.
///
/// Rank-2 arrays are the workhorse: rows index graph nodes (positions) and
/// columns index channels. Rank-3 arrays stack a batch of such matrices.
template <typename T>
class DenseArray {
public:
    using value_type = T;

    DenseArray() = default;
    explicit DenseArray(Shape shape, T fill = T(0));
    DenseArray(Shape shape, std::vector<T> data);

    /// Contents unspecified; for outputs that are written in full.
    static DenseArray uninitialized(Shape shape);
    static DenseArray zeros(std::size_t rows, std::size_t cols) { return DenseArray({rows, cols}); }
    static DenseArray identity(std::size_t n);
    static DenseArray from_rows(std::initializer_list<std::initializer_list<T>> rows);
    static DenseArray diagonal(std::span<const T> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return data_.empty(); }

    // Rank-2 accessors.
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }
    T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    T& operator[](std::size_t flat) { return data_[flat]; }
    const T& operator[](std::size_t flat) const { return data_[flat]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    /// Same buffer, new shape. Element count must match.
    DenseArray reshaped(Shape shape) const&;
    DenseArray reshaped(Shape shape) &&;

    /// Rank-2 view of batch item `b` of a rank-3 array, copied out.
    DenseArray slice(std::size_t b) const;
    void set_slice(std::size_t b, const DenseArray& item);

    template <typename U>
    DenseArray<U> cast() const {
        auto out = DenseArray<U>::uninitialized(shape_);
        std::copy(data_.begin(), data_.end(), out.data());
        return out;
    }

    bool operator==(const DenseArray& other) const = default;

private:
    Shape shape_;
    std::vector<T, detail::ArrayAllocator<T>> data_;
};

using Array = DenseArray<double>;
using ArrayF = DenseArray<float>;

// Rank-2 linear algebra. Products run through Eigen's single-threaded GEMM
// kernels so reductions happen in a fixed order.
template <typename T>
DenseArray<T> matmul(const DenseArray<T>& a, const DenseArray<T>& b);
/// aᵀ·b
template <typename T>
DenseArray<T> matmul_tn(const DenseArray<T>& a, const DenseArray<T>& b);
/// a·bᵀ
template <typename T>
DenseArray<T> matmul_nt(const DenseArray<T>& a, const DenseArray<T>& b);
template <typename T>
DenseArray<T> transpose(const DenseArray<T>& a);

template <typename T>
DenseArray<T> add(const DenseArray<T>& a, const DenseArray<T>& b);
template <typename T>
DenseArray<T> sub(const DenseArray<T>& a, const DenseArray<T>& b);
template <typename T>
DenseArray<T> hadamard(const DenseArray<T>& a, const DenseArray<T>& b);
template <typename T>
DenseArray<T> scale(const DenseArray<T>& a, T factor);
template <typename T>
DenseArray<T> exp_elementwise(const DenseArray<T>& a);
/// In-place a += b.
template <typename T>
void accumulate(DenseArray<T>& a, const DenseArray<T>& b);

/// Row-wise softmax, stabilised by subtracting each row's maximum.
template <typename T>
DenseArray<T> softmax_rows(const DenseArray<T>& m);
/// Column-wise softmax (each column sums to one).
template <typename T>
DenseArray<T> softmax_cols(const DenseArray<T>& m);

/// Adjoint of softmax_rows given its output y and the output gradient g:
/// dx_ij = y_ij (g_ij - Σ_l g_il y_il).
template <typename T>
DenseArray<T> softmax_rows_backward(const DenseArray<T>& y, const DenseArray<T>& g);
template <typename T>
DenseArray<T> softmax_cols_backward(const DenseArray<T>& y, const DenseArray<T>& g);

template <typename T>
double frobenius_norm(const DenseArray<T>& a);
template <typename T>
double max_abs(const DenseArray<T>& a);
template <typename T>
double max_abs_diff(const DenseArray<T>& a, const DenseArray<T>& b);
/// max |a-b| / max(1, max|b|): relative error against the scale of `b`.
template <typename T>
double scaled_max_error(const DenseArray<T>& a, const DenseArray<T>& b);
template <typename T>
bool all_finite(const DenseArray<T>& a);

template <typename T>
void require_rank2(const DenseArray<T>& a, const char* what);
template <typename T>
void require_same_shape(const DenseArray<T>& a, const DenseArray<T>& b, const char* op);

} // namespace snl
