#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hcnaf/logspace.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/tape.hpp"

namespace hcnaf {

// Two interchangeable backends for model code:
//   PlainOps<T>  evaluates directly on matrices (inference);
//   TapeOps<T>   records onto a Tape<T> (training, gradient checks).
// Model code is written once as `template <class Ops>` against this surface.

template <typename T>
struct PlainOps {
  using Real = T;
  using Val = Matrix<T>;

  static constexpr bool records = false;

  const Matrix<T>& value(const Val& v) const { return v; }
  Val constant(Matrix<T> m) const { return m; }

  Val matmul(const Val& a, const Val& b) const { return hcnaf::matmul(a, b); }

  Val add(Val a, const Val& b) const {
    check_same(a, b, "add");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }
  Val sub(Val a, const Val& b) const {
    check_same(a, b, "sub");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
    return a;
  }
  Val mul(Val a, const Val& b) const {
    check_same(a, b, "mul");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] *= b[i];
    return a;
  }
  Val scale(Val a, T s) const {
    for (auto& x : a.flat()) x *= s;
    return a;
  }
  Val add_bias(Val a, const Val& bias) const {
    if (bias.cols() != 1 || bias.rows() != a.rows()) {
      throw ArgumentError("add_bias: bias " + shape_str(bias) + " for " + shape_str(a));
    }
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (auto& x : a.row(r)) x += bias[r];
    return a;
  }
  Val tanh(Val a) const {
    for (auto& x : a.flat()) x = std::tanh(x);
    return a;
  }
  Val relu(Val a) const {
    for (auto& x : a.flat()) x = x > T(0) ? x : T(0);
    return a;
  }
  Val exp(Val a) const {
    for (auto& x : a.flat()) x = std::exp(x);
    return a;
  }
  Val log_dtanh(Val a) const {
    for (auto& x : a.flat()) x = hcnaf::log_dtanh(x);
    return a;
  }
  Val log_matmul_exp(const Val& a, const Val& b) const { return hcnaf::log_matmul_exp(a, b); }

  Val slice_rows(const Val& a, std::size_t r0, std::size_t count) const {
    if (r0 + count > a.rows()) throw ArgumentError("slice_rows: out of range");
    Matrix<T> out(count, a.cols());
    std::copy(a.data() + r0 * a.cols(), a.data() + (r0 + count) * a.cols(), out.data());
    return out;
  }
  Val concat_rows(const std::vector<Val>& parts) const {
    if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
    std::size_t rows = 0;
    for (const auto& p : parts) {
      if (p.cols() != parts[0].cols()) throw ArgumentError("concat_rows: column mismatch");
      rows += p.rows();
    }
    Matrix<T> out(rows, parts[0].cols());
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data(), p.data() + p.size(), out.data() + off);
      off += p.size();
    }
    return out;
  }
  Val segment(const Val& a, std::size_t offset, std::size_t rows, std::size_t cols) const {
    if (offset + rows * cols > a.size()) throw ArgumentError("segment: out of range");
    Matrix<T> out(rows, cols);
    std::copy(a.data() + offset, a.data() + offset + rows * cols, out.data());
    return out;
  }
  Val scatter(const Val& a, std::span<const std::int32_t> map, std::size_t rows,
              std::size_t cols) const {
    if (map.size() != rows * cols) throw ArgumentError("scatter: map size mismatch");
    Matrix<T> out(rows, cols);
    for (std::size_t i = 0; i < map.size(); ++i)
      if (map[i] >= 0) out[i] = a[static_cast<std::size_t>(map[i])];
    return out;
  }
  Val sum_rows(const Val& a) const {
    Matrix<T> out(1, a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a(r, c);
    return out;
  }
  Val normal_logpdf(const Val& z) const {
    Matrix<T> out(1, z.cols());
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c) out[c] += standard_normal_logpdf(z(r, c));
    return out;
  }
  Val sum(const Val& a) const {
    T s = T(0);
    for (T x : a.flat()) s += x;
    return Matrix<T>(1, 1, s);
  }
  Val mean(const Val& a) const {
    if (a.empty()) throw ArgumentError("mean: empty input");
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
  }

 private:
  static void check_same(const Val& a, const Val& b, const char* op) {
    if (!a.same_shape(b)) {
      throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                          shape_str(b));
    }
  }
};

template <typename T>
struct TapeOps {
  using Real = T;
  using Val = typename Tape<T>::Var;

  static constexpr bool records = true;

  Tape<T>& tape;

  const Matrix<T>& value(Val v) const { return tape.value(v); }
  Val constant(Matrix<T> m) const { return tape.constant(std::move(m)); }
  Val matmul(Val a, Val b) const { return tape.matmul(a, b); }
  Val add(Val a, Val b) const { return tape.add(a, b); }
  Val sub(Val a, Val b) const { return tape.sub(a, b); }
  Val mul(Val a, Val b) const { return tape.mul(a, b); }
  Val scale(Val a, T s) const { return tape.scale(a, s); }
  Val add_bias(Val a, Val b) const { return tape.add_bias(a, b); }
  Val tanh(Val a) const { return tape.tanh(a); }
  Val relu(Val a) const { return tape.relu(a); }
  Val exp(Val a) const { return tape.exp(a); }
  Val log_dtanh(Val a) const { return tape.log_dtanh(a); }
  Val log_matmul_exp(Val a, Val b) const { return tape.log_matmul_exp(a, b); }
  Val slice_rows(Val a, std::size_t r0, std::size_t n) const { return tape.slice_rows(a, r0, n); }
  Val concat_rows(const std::vector<Val>& parts) const { return tape.concat_rows(parts); }
  Val segment(Val a, std::size_t off, std::size_t r, std::size_t c) const {
    return tape.segment(a, off, r, c);
  }
  Val scatter(Val a, std::span<const std::int32_t> map, std::size_t r, std::size_t c) const {
    return tape.scatter(a, map, r, c);
  }
  Val sum_rows(Val a) const { return tape.sum_rows(a); }
  Val normal_logpdf(Val z) const { return tape.normal_logpdf(z); }
  Val sum(Val a) const { return tape.sum(a); }
  Val mean(Val a) const { return tape.mean(a); }
};

}  // namespace hcnaf
