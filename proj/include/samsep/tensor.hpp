#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "samsep/errors.hpp"

namespace samsep {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

/// Tensor buffers start on the vector-register boundary, so vectorized
/// reductions split the same way wherever the buffer lands on the heap.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major tensor. Rank 0 (scalar), 1 and 2 are used throughout;
/// rank-1 tensors behave as a single row when viewed as a matrix.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() : shape_{0}, data_() {}

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end())) {}

    static Tensor matrix(std::size_t rows, std::size_t cols, T fill = T{0}) {
        return Tensor(Shape{rows, cols}, fill);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, Buffer<T>{v}); }

    /// Builds from nested rows; all rows must have equal length.
    static Tensor from_rows(const std::vector<std::vector<T>>& rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.front().size() : 0;
        Tensor out = matrix(r, c);
        for (std::size_t i = 0; i < r; ++i) {
            if (rows[i].size() != c) throw DimensionError("ragged rows");
            std::copy(rows[i].begin(), rows[i].end(), out.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
        }
        return out;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    Buffer<T>& storage() { return data_; }
    const Buffer<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
    std::span<const T> row(std::size_t r) const { return std::span<const T>(data_).subspan(r * cols(), cols()); }

    Eigen::Map<RowMatrix<T>> mat() {
        return Eigen::Map<RowMatrix<T>>(data_.data(), static_cast<Eigen::Index>(rows()),
                                        static_cast<Eigen::Index>(cols()));
    }
    Eigen::Map<const RowMatrix<T>> mat() const {
        return Eigen::Map<const RowMatrix<T>>(data_.data(), static_cast<Eigen::Index>(rows()),
                                              static_cast<Eigen::Index>(cols()));
    }
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> arr() {
        return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(), static_cast<Eigen::Index>(numel()));
    }
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> arr() const {
        return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(data_.data(),
                                                                    static_cast<Eigen::Index>(numel()));
    }

    /// All elements viewed as a 1 x numel row vector.
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> row_vec() {
        return Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(data_.data(), static_cast<Eigen::Index>(numel()));
    }
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> row_vec() const {
        return Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(data_.data(), static_cast<Eigen::Index>(numel()));
    }
    /// All elements viewed as a numel x 1 column vector.
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> col_vec() {
        return Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(data_.data(), static_cast<Eigen::Index>(numel()));
    }
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> col_vec() const {
        return Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(data_.data(), static_cast<Eigen::Index>(numel()));
    }

    bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols() && numel() == o.numel(); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Buffer<U> d(data_.size());
        std::transform(data_.begin(), data_.end(), d.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(d));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    Buffer<T> data_;
};

/// Copies columns [begin, end) of a matrix.
template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (begin > end || end > x.cols()) throw DimensionError("column slice out of range");
    Tensor<T> out = Tensor<T>::matrix(x.rows(), end - begin);
    out.mat() = x.mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
    return out;
}

/// Copies rows [begin, end) of a matrix.
template <typename T>
Tensor<T> slice_rows_of(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (begin > end || end > x.rows()) throw DimensionError("row slice out of range");
    Tensor<T> out = Tensor<T>::matrix(end - begin, x.cols());
    std::copy(x.storage().begin() + static_cast<std::ptrdiff_t>(begin * x.cols()),
              x.storage().begin() + static_cast<std::ptrdiff_t>(end * x.cols()), out.storage().begin());
    return out;
}

/// Horizontal concatenation of equal-row matrices.
template <typename T>
Tensor<T> concat_columns(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) return Tensor<T>::matrix(0, 0);
    const std::size_t r = parts.front()->rows();
    std::size_t c = 0;
    for (const auto* p : parts) {
        if (p->rows() != r) throw DimensionError("concat row mismatch");
        c += p->cols();
    }
    Tensor<T> out = Tensor<T>::matrix(r, c);
    std::size_t off = 0;
    for (const auto* p : parts) {
        out.mat().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p->cols())) = p->mat();
        off += p->cols();
    }
    return out;
}

}  // namespace samsep
