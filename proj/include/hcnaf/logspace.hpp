#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/matrix.hpp"

namespace hcnaf {

template <typename T>
T softplus(T x) {
  // log(1 + e^x) without overflow for large x or cancellation for small.
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// log(d tanh(a)/da) = log(1 - tanh^2 a), stable for large |a|.
template <typename T>
T log_dtanh(T a) {
  return T(2) * (std::numbers::ln2_v<T> - a - softplus(T(-2) * a));
}

// log sum_i exp(v_i). Entries may be -inf; all -inf gives -inf.
template <typename T>
T logsumexp(std::span<const T> v) {
  if (v.empty()) throw ArgumentError("logsumexp: empty input");
  T m = -std::numeric_limits<T>::infinity();
  for (T x : v) m = x > m ? x : m;
  if (m == -std::numeric_limits<T>::infinity()) return m;
  T s = T(0);
  for (T x : v) s += std::exp(x - m);
  return m + std::log(s);
}

template <typename T>
T logsumexp(const std::vector<T>& v) {
  return logsumexp(std::span<const T>(v));
}

// log(exp(a_log) * exp(b_log)) evaluated as a plain product of rescaled
// exponentials: with row maxima ma of a_log and column maxima mb of b_log,
//   out_ij = ma_i + mb_j + log sum_k ea_ik eb_kj.
// Entries whose rescaled sum falls near underflow are recomputed with an
// exact per-entry logsumexp and flagged.
template <typename T>
struct LogMatmulExp {
  Matrix<T> out;
  Matrix<T> ea;   // exp(a_log - ma)
  Matrix<T> eb;   // exp(b_log - mb)
  Matrix<T> sum;  // ea * eb; 0 where the entry was computed exactly
  std::vector<unsigned char> exact;  // per output entry
};

template <typename T>
T log_matmul_exp_entry(const Matrix<T>& a_log, const Matrix<T>& b_log, std::size_t i, std::size_t j) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  T m = kNegInf;
  for (std::size_t k = 0; k < a_log.cols(); ++k) m = std::max(m, a_log(i, k) + b_log(k, j));
  if (m == kNegInf) return kNegInf;
  T s = T(0);
  for (std::size_t k = 0; k < a_log.cols(); ++k) s += std::exp(a_log(i, k) + b_log(k, j) - m);
  return m + std::log(s);
}

template <typename T>
LogMatmulExp<T> log_matmul_exp_scaled(const Matrix<T>& a_log, const Matrix<T>& b_log) {
  if (a_log.cols() != b_log.rows()) {
    throw ArgumentError("log_matmul_exp: shape mismatch " + shape_str(a_log) + " * " +
                        shape_str(b_log));
  }
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  const std::size_t m = a_log.rows(), inner = a_log.cols(), n = b_log.cols();
  LogMatmulExp<T> r{Matrix<T>(m, n), Matrix<T>(m, inner), Matrix<T>(inner, n), {}, {}};
  std::vector<T> ma(m, kNegInf), mb(n, kNegInf);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < inner; ++k) ma[i] = std::max(ma[i], a_log(i, k));
  for (std::size_t k = 0; k < inner; ++k)
    for (std::size_t j = 0; j < n; ++j) mb[j] = std::max(mb[j], b_log(k, j));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < inner; ++k)
      r.ea(i, k) = ma[i] == kNegInf ? T(0) : std::exp(a_log(i, k) - ma[i]);
  for (std::size_t k = 0; k < inner; ++k)
    for (std::size_t j = 0; j < n; ++j)
      r.eb(k, j) = mb[j] == kNegInf ? T(0) : std::exp(b_log(k, j) - mb[j]);
  r.sum = matmul(r.ea, r.eb);
  r.exact.assign(m * n, 0);
  const T tiny = std::numeric_limits<T>::min() * T(1 << 20);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const T s = r.sum(i, j);
      if (ma[i] == kNegInf || mb[j] == kNegInf) {
        r.out(i, j) = kNegInf;
      } else if (s > tiny && std::isfinite(ma[i] + mb[j])) {
        r.out(i, j) = ma[i] + mb[j] + std::log(s);
      } else {
        r.out(i, j) = log_matmul_exp_entry(a_log, b_log, i, j);
        r.exact[i * n + j] = 1;
        r.sum(i, j) = T(0);
      }
    }
  }
  return r;
}

// Elementwise log of exp(a_log) * exp(b_log), each entry a logsumexp over
// the inner dimension.
template <typename T>
Matrix<T> log_matmul_exp(const Matrix<T>& a_log, const Matrix<T>& b_log) {
  return log_matmul_exp_scaled(a_log, b_log).out;
}

template <typename T>
T standard_normal_logpdf(T z) {
  return T(-0.5) * z * z - T(0.5) * std::log(T(2) * std::numbers::pi_v<T>);
}

}  // namespace hcnaf
