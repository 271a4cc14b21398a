#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hcnaf/errors.hpp"

namespace hcnaf {

// Dense row-major matrix. Column vectors are n x 1 matrices; batches of
// samples are stored one sample per column.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ArgumentError("Matrix: data length " + std::to_string(data_.size()) +
                          " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  // Row-major nested initializer, e.g. Matrix<double>{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ArgumentError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  // Rejects NaN/Inf entries; the normal constructors do not check.
  static Matrix checked(std::size_t rows, std::size_t cols, std::vector<T> data) {
    Matrix m(rows, cols, std::move(data));
    for (std::size_t i = 0; i < m.data_.size(); ++i) {
      if (!std::isfinite(m.data_[i])) {
        throw ArgumentError("Matrix: non-finite entry at flat index " + std::to_string(i));
      }
    }
    return m;
  }

  static Matrix column(std::span<const T> v) {
    return Matrix(v.size(), 1, std::vector<T>(v.begin(), v.end()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::vector<T> col(std::size_t c) const {
    std::vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <typename U>
  Matrix<U> cast() const {
    return Matrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows(), m.cols());
}

// out = a * b
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ArgumentError("matmul: shape mismatch " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix<T> out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  if (n == 1) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const T* arow = a.data() + i * a.cols();
      T s = T(0);
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * b[k];
      out[i] = s;
    }
    return out;
  }
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* orow = out.data() + i * n;
    const T* arow = a.data() + i * a.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

// out += a^T * b
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  const std::size_t n = b.cols();
  if (n == 1) {
    for (std::size_t k = 0; k < a.rows(); ++k) {
      const T bk = b[k];
      if (bk == T(0)) continue;
      const T* arow = a.data() + k * a.cols();
      T* o = out.data();
      for (std::size_t i = 0; i < a.cols(); ++i) o[i] += arow[i] * bk;
    }
    return;
  }
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const T* arow = a.data() + k * a.cols();
    const T* brow = b.data() + k * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T aki = arow[i];
      if (aki == T(0)) continue;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aki * brow[j];
    }
  }
}

// out += a * b^T
template <typename T>
void matmul_nt_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  const std::size_t inner = a.cols();
  const std::size_t n = b.rows();
  const Matrix<T> bt = b.transposed();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.data() + i * inner;
    T* orow = out.data() + i * out.cols();
    for (std::size_t k = 0; k < inner; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = bt.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
}

}  // namespace hcnaf
