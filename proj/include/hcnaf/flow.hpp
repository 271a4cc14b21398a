#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/logspace.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/ops.hpp"

namespace hcnaf {

enum class Activation { kTanh };

// Shape of the conditional autoregressive flow. Each flow dimension carries
// one unit at the input and output layers and `width_per_dim` units at each
// of the `hidden_layers` hidden layers.
struct CondAFConfig {
  std::size_t dim = 2;
  std::size_t hidden_layers = 1;
  std::size_t width_per_dim = 1;
  Activation activation = Activation::kTanh;

  void validate() const {
    if (dim < 1) throw ArgumentError("CondAFConfig: dim must be >= 1");
    if (hidden_layers < 1) throw ArgumentError("CondAFConfig: hidden_layers must be >= 1");
    if (width_per_dim < 1) throw ArgumentError("CondAFConfig: width_per_dim must be >= 1");
  }

  friend bool operator==(const CondAFConfig&, const CondAFConfig&) = default;
};

// Where each stored weight and bias lives for one flow layer.
//
// Stored weights for layer k are packed as
//   [ log W_dd for d = 0..D-1 | W_dr for d = 1..D-1, r = 0..d-1 ]
// with every block row-major (out_w x in_w). The full layer matrix is
// (D*out_w) x (D*in_w), block-lower-triangular; blocks above the diagonal
// have no storage at all.
struct FlowLayerLayout {
  std::size_t in_width = 0;   // units per flow dimension feeding this layer
  std::size_t out_width = 0;  // units per flow dimension produced
  std::size_t rows = 0;       // D * out_width
  std::size_t cols = 0;       // D * in_width
  std::size_t diag_offset = 0;
  std::size_t offdiag_offset = 0;
  std::size_t offdiag_count = 0;
  std::size_t bias_offset = 0;
  // rows*cols entries indexing [exp(log diag) | offdiag]; -1 for structural zeros.
  std::vector<std::int32_t> scatter_map;

  std::size_t block_size() const { return out_width * in_width; }
  std::size_t diag_count(std::size_t dim) const { return dim * block_size(); }
};

class FlowLayout {
 public:
  FlowLayout() = default;
  explicit FlowLayout(const CondAFConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const std::size_t D = cfg.dim;
    const std::size_t H = cfg.width_per_dim;
    const std::size_t n_layers = cfg.hidden_layers + 1;
    std::size_t w_off = 0;
    std::size_t b_off = 0;
    for (std::size_t k = 0; k < n_layers; ++k) {
      FlowLayerLayout l;
      l.in_width = k == 0 ? 1 : H;
      l.out_width = k + 1 == n_layers ? 1 : H;
      l.rows = D * l.out_width;
      l.cols = D * l.in_width;
      const std::size_t bs = l.block_size();
      l.diag_offset = w_off;
      l.offdiag_offset = w_off + D * bs;
      l.offdiag_count = D * (D - 1) / 2 * bs;
      l.bias_offset = b_off;
      w_off = l.offdiag_offset + l.offdiag_count;
      b_off += l.rows;

      l.scatter_map.assign(l.rows * l.cols, -1);
      std::size_t off_block = 0;
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t r = 0; r <= d; ++r) {
          std::size_t base;
          if (r == d) {
            base = d * bs;
          } else {
            base = D * bs + off_block * bs;
            ++off_block;
          }
          for (std::size_t i = 0; i < l.out_width; ++i) {
            for (std::size_t j = 0; j < l.in_width; ++j) {
              const std::size_t row = d * l.out_width + i;
              const std::size_t col = r * l.in_width + j;
              l.scatter_map[row * l.cols + col] =
                  static_cast<std::int32_t>(base + i * l.in_width + j);
            }
          }
        }
      }
      layers_.push_back(std::move(l));
    }
    stored_weights_ = w_off;
    biases_ = b_off;
  }

  const CondAFConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  const FlowLayerLayout& layer(std::size_t k) const { return layers_.at(k); }
  const std::vector<FlowLayerLayout>& layers() const noexcept { return layers_; }

  // Weight entries actually stored (structural zeros excluded).
  std::size_t stored_weights() const noexcept { return stored_weights_; }
  std::size_t biases() const noexcept { return biases_; }

  // Weight entries of the full masked matrices, structural zeros included.
  std::size_t full_weights() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.rows * l.cols;
    return n;
  }

 private:
  CondAFConfig cfg_;
  std::vector<FlowLayerLayout> layers_;
  std::size_t stored_weights_ = 0;
  std::size_t biases_ = 0;
};

// Flow parameters emitted for one condition. Diagonal blocks are held as
// logs, so the materialized blocks exp(.) are positive by construction.
template <typename T>
struct FlowParams {
  Matrix<T> weights;  // stored_weights x 1, packed per FlowLayerLayout
  Matrix<T> biases;   // biases x 1

  FlowParams() = default;
  explicit FlowParams(const FlowLayout& layout)
      : weights(layout.stored_weights(), 1), biases(layout.biases(), 1) {}

  // Diagonal logs chosen so every hidden unit starts as the mean of the
  // units feeding it: with width 1 every log is 0 and each dimension
  // reduces to z_d = tanh(... tanh(x_d)).
  static FlowParams identity_like(const FlowLayout& layout) {
    FlowParams p(layout);
    for (const auto& l : layout.layers()) {
      const T v = -std::log(static_cast<T>(l.in_width));
      for (std::size_t i = 0; i < l.diag_count(layout.dim()); ++i) p.weights[l.diag_offset + i] = v;
    }
    return p;
  }

  std::span<const T> log_diag(const FlowLayout& layout, std::size_t k) const {
    const auto& l = layout.layer(k);
    return {weights.data() + l.diag_offset, l.diag_count(layout.dim())};
  }
  std::span<const T> offdiag(const FlowLayout& layout, std::size_t k) const {
    const auto& l = layout.layer(k);
    return {weights.data() + l.offdiag_offset, l.offdiag_count};
  }
  std::span<const T> bias(const FlowLayout& layout, std::size_t k) const {
    const auto& l = layout.layer(k);
    return {biases.data() + l.bias_offset, l.rows};
  }

  // Full (D*out) x (D*in) weight matrix for layer k with exp applied to
  // the diagonal blocks and zeros above them.
  Matrix<T> materialize(const FlowLayout& layout, std::size_t k) const {
    const auto& l = layout.layer(k);
    Matrix<T> out(l.rows, l.cols);
    const std::size_t n_diag = l.diag_count(layout.dim());
    for (std::size_t i = 0; i < l.scatter_map.size(); ++i) {
      const auto m = l.scatter_map[i];
      if (m < 0) continue;
      const auto idx = static_cast<std::size_t>(m);
      out[i] = idx < n_diag ? std::exp(weights[l.diag_offset + idx])
                            : weights[l.offdiag_offset + (idx - n_diag)];
    }
    return out;
  }

  // Throws NumericError if shapes are off, any entry is non-finite, any
  // materialized diagonal entry is not strictly positive, or any block above
  // the diagonal is nonzero.
  void check_invariants(const FlowLayout& layout) const {
    if (weights.rows() != layout.stored_weights() || weights.cols() != 1 ||
        biases.rows() != layout.biases() || biases.cols() != 1) {
      throw ArgumentError("FlowParams: shape does not match layout");
    }
    if (!weights.all_finite() || !biases.all_finite()) {
      throw NumericError("FlowParams: non-finite parameter");
    }
    for (std::size_t k = 0; k < layout.num_layers(); ++k) {
      const auto& l = layout.layer(k);
      const Matrix<T> w = materialize(layout, k);
      for (std::size_t row = 0; row < l.rows; ++row) {
        const std::size_t d = row / l.out_width;
        for (std::size_t col = 0; col < l.cols; ++col) {
          const std::size_t r = col / l.in_width;
          if (r > d && w(row, col) != T(0)) {
            throw NumericError("FlowParams: nonzero entry above the block diagonal", int(k + 1));
          }
          if (r == d && !(w(row, col) > T(0))) {
            throw NumericError("FlowParams: non-positive diagonal block entry", int(k + 1));
          }
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Forward transform

template <typename Ops>
struct FlowOutput {
  typename Ops::Val z;       // D x n
  typename Ops::Val logdet;  // D x n, log dz_d/dx_d per dimension
};

// Runs the flow on a batch x (D x n) whose columns all share the parameters
// (`weights`, `biases`) emitted for one condition.
//
// Hidden layers: h_k = tanh(W_k h_{k-1} + B_k); output layer is linear.
// log dz_d/dx_d is chained per dimension in log space:
//   J_d^k = logphi'(A_d^k) + logsumexp_j(log W_dd^k[:, j] + J_d^{k-1}[j]).
template <typename Ops>
FlowOutput<Ops> flow_forward(const Ops& ops, const FlowLayout& layout,
                             const typename Ops::Val& weights, const typename Ops::Val& biases,
                             const typename Ops::Val& x) {
  using T = typename Ops::Real;
  using Val = typename Ops::Val;
  const std::size_t D = layout.dim();
  const auto& xv = ops.value(x);
  if (xv.rows() != D) {
    throw ArgumentError("flow_forward: input has " + std::to_string(xv.rows()) +
                        " rows, flow dim is " + std::to_string(D));
  }
  const std::size_t n = xv.cols();

  Val h = x;
  std::vector<Val> jac(D, ops.constant(Matrix<T>(1, n)));
  for (std::size_t k = 0; k < layout.num_layers(); ++k) {
    const auto& l = layout.layer(k);
    const bool hidden = k + 1 < layout.num_layers();
    const std::size_t n_diag = l.diag_count(D);

    Val log_diag = ops.segment(weights, l.diag_offset, n_diag, 1);
    Val packed = ops.exp(log_diag);
    if (l.offdiag_count > 0) {
      packed = ops.concat_rows({packed, ops.segment(weights, l.offdiag_offset, l.offdiag_count, 1)});
    }
    Val w = ops.scatter(packed, l.scatter_map, l.rows, l.cols);
    Val b = ops.segment(biases, l.bias_offset, l.rows, 1);
    Val pre = ops.add_bias(ops.matmul(w, h), b);
    if (!ops.value(pre).all_finite()) {
      throw NumericError("flow_forward: non-finite pre-activation at layer " + std::to_string(k + 1),
                         int(k + 1));
    }

    Val log_dphi{};
    if (hidden) {
      log_dphi = ops.log_dtanh(pre);
      h = ops.tanh(pre);
    } else {
      h = pre;
    }
    for (std::size_t d = 0; d < D; ++d) {
      Val block = ops.segment(weights, l.diag_offset + d * l.block_size(), l.out_width, l.in_width);
      Val j = ops.log_matmul_exp(block, jac[d]);
      if (hidden) j = ops.add(j, ops.slice_rows(log_dphi, d * l.out_width, l.out_width));
      jac[d] = j;
    }
  }
  Val logdet = D == 1 ? jac[0] : ops.concat_rows(jac);
  if (!ops.value(logdet).all_finite()) {
    throw NumericError("flow_forward: non-finite log-det", int(layout.num_layers()));
  }
  return {h, logdet};
}

// log p(x | C) for each column: log N(z; 0, I) + sum_d log dz_d/dx_d. (1 x n)
template <typename Ops>
typename Ops::Val flow_log_prob(const Ops& ops, const FlowLayout& layout,
                                const typename Ops::Val& weights, const typename Ops::Val& biases,
                                const typename Ops::Val& x) {
  auto out = flow_forward(ops, layout, weights, biases, x);
  return ops.add(ops.normal_logpdf(out.z), ops.sum_rows(out.logdet));
}

template <typename T>
struct ForwardResult {
  std::vector<T> z;
  T logdet = T(0);
  std::vector<T> per_dim_logdet;
};

template <typename T>
ForwardResult<T> forward(const FlowLayout& layout, const FlowParams<T>& p, std::span<const T> x) {
  if (x.size() != layout.dim()) throw ArgumentError("forward: input length != flow dim");
  PlainOps<T> ops;
  auto out = flow_forward(ops, layout, p.weights, p.biases, Matrix<T>::column(x));
  ForwardResult<T> r;
  r.z = out.z.storage();
  r.per_dim_logdet = out.logdet.storage();
  for (T v : r.per_dim_logdet) r.logdet += v;
  return r;
}

template <typename T>
Matrix<T> log_prob_batch(const FlowLayout& layout, const FlowParams<T>& p, const Matrix<T>& x) {
  PlainOps<T> ops;
  return flow_log_prob(ops, layout, p.weights, p.biases, x);
}

template <typename T>
T log_prob(const FlowLayout& layout, const FlowParams<T>& p, std::span<const T> x) {
  if (x.size() != layout.dim()) throw ArgumentError("log_prob: input length != flow dim");
  return log_prob_batch(layout, p, Matrix<T>::column(x))[0];
}

// ---------------------------------------------------------------------------
// Numeric inversion

struct InvertOptions {
  double tolerance = 1e-8;       // required |f(x) - z|_inf on return
  std::size_t max_bisection = 200;
  std::size_t max_newton = 20;
  double bracket_limit = 1e6;    // largest |x_d| searched
};

// Per-column inversion outcome: -1 when solved, otherwise the first
// dimension whose target was outside the attainable range.
struct InvertStatus {
  std::vector<std::int64_t> failed_dim;
  bool all_ok() const {
    return std::all_of(failed_dim.begin(), failed_dim.end(), [](auto d) { return d < 0; });
  }
};

namespace detail {

// Evaluates (z_d, log dz_d/dx_d) for the listed columns of x.
template <typename T>
void eval_dim(const FlowLayout& layout, const FlowParams<T>& p, const Matrix<T>& x,
              const std::vector<std::size_t>& cols, std::size_t d, std::vector<T>& z,
              std::vector<T>& logdz) {
  const std::size_t D = layout.dim();
  Matrix<T> sub(D, cols.size());
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t i = 0; i < cols.size(); ++i) sub(r, i) = x(r, cols[i]);
  PlainOps<T> ops;
  auto out = flow_forward(ops, layout, p.weights, p.biases, sub);
  z.resize(cols.size());
  logdz.resize(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    z[i] = out.z(d, i);
    logdz[i] = out.logdet(d, i);
  }
}

}  // namespace detail

// Solves f(x) = z column by column, dimension by dimension (x_1 first, since
// z_d depends only on x_1..x_d). Each scalar solve checks the target is
// strictly inside f_d(-limit), f_d(+limit), expands a bracket from 0, then
// alternates safeguarded Newton steps with bisection.
template <typename T>
InvertStatus invert_batch(const FlowLayout& layout, const FlowParams<T>& p, const Matrix<T>& z,
                          Matrix<T>& x, const InvertOptions& opt = {}) {
  const std::size_t D = layout.dim();
  if (z.rows() != D) throw ArgumentError("invert: target has wrong number of rows");
  const std::size_t n = z.cols();
  x = Matrix<T>(D, n);
  InvertStatus status{std::vector<std::int64_t>(n, -1)};
  std::vector<T> fz, flog;

  for (std::size_t d = 0; d < D; ++d) {
    std::vector<std::size_t> cols;
    for (std::size_t j = 0; j < n; ++j)
      if (status.failed_dim[j] < 0) cols.push_back(j);
    if (cols.empty()) break;
    const std::size_t m = cols.size();
    auto target = [&](std::size_t i) { return z(d, cols[i]); };

    // Attainable range.
    const T limit = static_cast<T>(opt.bracket_limit);
    for (std::size_t i = 0; i < m; ++i) x(d, cols[i]) = -limit;
    detail::eval_dim(layout, p, x, cols, d, fz, flog);
    std::vector<T> lower = fz;
    for (std::size_t i = 0; i < m; ++i) x(d, cols[i]) = limit;
    detail::eval_dim(layout, p, x, cols, d, fz, flog);
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < m; ++i) {
      const T t = target(i);
      if (!(t > lower[i] && t < fz[i])) {
        status.failed_dim[cols[i]] = static_cast<std::int64_t>(d);
      } else {
        live.push_back(i);
      }
    }

    // Bracket expansion from 0 in steps 1, 2, 4, ... towards the target.
    std::vector<T> lo(m, -limit), hi(m, limit), xc(m, T(0)), step(m, T(1));
    std::vector<int> dir(m, 0);
    std::vector<std::size_t> pending = live;
    while (!pending.empty()) {
      std::vector<std::size_t> sub_cols;
      for (std::size_t i : pending) {
        x(d, cols[i]) = xc[i];
        sub_cols.push_back(cols[i]);
      }
      detail::eval_dim(layout, p, x, sub_cols, d, fz, flog);
      std::vector<std::size_t> next;
      for (std::size_t q = 0; q < pending.size(); ++q) {
        const std::size_t i = pending[q];
        const T f = fz[q];
        const T t = target(i);
        if (f == t) {
          lo[i] = hi[i] = xc[i];
          continue;
        }
        if (dir[i] == 0) dir[i] = f < t ? 1 : -1;
        const bool short_of_target = dir[i] > 0 ? f < t : f > t;
        if (!short_of_target) {
          (dir[i] > 0 ? hi[i] : lo[i]) = xc[i];
          continue;
        }
        (dir[i] > 0 ? lo[i] : hi[i]) = xc[i];
        const T nx = xc[i] + T(dir[i]) * step[i];
        step[i] *= T(2);
        if (std::abs(nx) >= limit) continue;  // the range bound closes the bracket
        xc[i] = nx;
        next.push_back(i);
      }
      pending = std::move(next);
    }

    // Safeguarded Newton / bisection.
    std::vector<std::size_t> newton_used(m, 0), bisect_used(m, 0);
    for (std::size_t i : live) xc[i] = lo[i] + (hi[i] - lo[i]) / T(2);
    pending.clear();
    for (std::size_t i : live)
      if (lo[i] < hi[i]) pending.push_back(i);
    while (!pending.empty()) {
      std::vector<std::size_t> sub_cols;
      for (std::size_t i : pending) {
        x(d, cols[i]) = xc[i];
        sub_cols.push_back(cols[i]);
      }
      detail::eval_dim(layout, p, x, sub_cols, d, fz, flog);
      std::vector<std::size_t> next;
      for (std::size_t q = 0; q < pending.size(); ++q) {
        const std::size_t i = pending[q];
        const T f = fz[q];
        const T t = target(i);
        const T resid = f - t;
        if (resid < T(0)) lo[i] = xc[i]; else hi[i] = xc[i];
        const T scale = std::max(T(1), std::abs(t));
        const bool tiny_resid = std::abs(resid) <= T(16) * std::numeric_limits<T>::epsilon() * scale;
        const bool tiny_bracket =
            hi[i] - lo[i] <= T(4) * std::numeric_limits<T>::epsilon() * std::max(T(1), std::abs(xc[i]));
        if (resid == T(0) || tiny_resid || tiny_bracket) continue;
        if (bisect_used[i] >= opt.max_bisection && newton_used[i] >= opt.max_newton) continue;
        T nx = std::numeric_limits<T>::quiet_NaN();
        if (newton_used[i] < opt.max_newton) {
          const T deriv = std::exp(flog[q]);
          if (deriv > T(0) && std::isfinite(deriv)) nx = xc[i] - resid / deriv;
          if (std::isfinite(nx) && nx > lo[i] && nx < hi[i]) {
            ++newton_used[i];
          } else {
            nx = std::numeric_limits<T>::quiet_NaN();
          }
        }
        if (!std::isfinite(nx)) {
          if (bisect_used[i] >= opt.max_bisection) continue;
          nx = lo[i] + (hi[i] - lo[i]) / T(2);
          ++bisect_used[i];
        }
        xc[i] = nx;
        next.push_back(i);
      }
      pending = std::move(next);
    }
    for (std::size_t i : live) x(d, cols[i]) = xc[i];
  }

  // Dimensions after a failure are left at 0.
  for (std::size_t j = 0; j < n; ++j) {
    if (status.failed_dim[j] >= 0) {
      for (std::size_t r = static_cast<std::size_t>(status.failed_dim[j]); r < D; ++r) x(r, j) = T(0);
    }
  }
  return status;
}

template <typename T>
std::vector<T> invert(const FlowLayout& layout, const FlowParams<T>& p, std::span<const T> z,
                      const InvertOptions& opt = {}) {
  if (z.size() != layout.dim()) throw ArgumentError("invert: target length != flow dim");
  Matrix<T> x;
  auto status = invert_batch(layout, p, Matrix<T>::column(z), x, opt);
  if (!status.all_ok()) {
    const auto d = static_cast<std::size_t>(status.failed_dim[0]);
    throw RangeError("invert: z_" + std::to_string(d + 1) +
                         " is outside the attainable range of the flow",
                     d);
  }
  auto check = forward(layout, p, std::span<const T>(x.storage()));
  for (std::size_t d = 0; d < z.size(); ++d) {
    if (!(std::abs(check.z[d] - z[d]) < static_cast<T>(opt.tolerance))) {
      throw NumericError("invert: did not converge in dimension " + std::to_string(d + 1));
    }
  }
  return x.storage();
}

// ---------------------------------------------------------------------------
// Sampling

template <typename T>
struct SampleSet {
  Matrix<T> x;              // D x n
  std::vector<T> log_prob;  // log p(x_i | C) re-evaluated by the forward pass
  std::size_t rejected = 0; // base draws outside the attainable range
};

// Draws z ~ N(0, I) in rounds of at least `window` draws, inverts them, and
// keeps accepted columns in draw order. A round rejecting more than half of
// its draws raises SaturationError.
template <typename T>
SampleSet<T> sample(const FlowLayout& layout, const FlowParams<T>& p, std::size_t n,
                    std::uint64_t seed, std::size_t window = 256, const InvertOptions& opt = {}) {
  if (n < 1) throw ArgumentError("sample: n must be >= 1");
  const std::size_t D = layout.dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SampleSet<T> out;
  out.x = Matrix<T>(D, n);
  std::size_t have = 0;
  while (have < n) {
    const std::size_t draws = std::max(n - have, window);
    Matrix<T> z(D, draws);
    for (std::size_t j = 0; j < draws; ++j)
      for (std::size_t d = 0; d < D; ++d) z(d, j) = static_cast<T>(normal(rng));
    Matrix<T> x;
    const auto status = invert_batch(layout, p, z, x, opt);
    std::size_t rejected = 0;
    for (std::size_t j = 0; j < draws; ++j) {
      if (status.failed_dim[j] >= 0) {
        ++rejected;
        continue;
      }
      if (have < n) {
        for (std::size_t d = 0; d < D; ++d) out.x(d, have) = x(d, j);
        ++have;
      }
    }
    out.rejected += rejected;
    if (2 * rejected > draws) {
      throw SaturationError("sample: " + std::to_string(rejected) + " of " +
                            std::to_string(draws) +
                            " base draws fell outside the attainable range of the flow");
    }
  }
  out.log_prob = log_prob_batch(layout, p, out.x).storage();
  return out;
}

// ---------------------------------------------------------------------------
// Affine transform: z_d = (x_d - mu_d) / sigma_d, density-direction log-det.

template <typename T>
struct AffineResult {
  std::vector<T> z;
  T logdet = T(0);
};

template <typename T>
AffineResult<T> affine_forward(std::span<const T> mu, std::span<const T> log_sigma,
                               std::span<const T> x) {
  if (mu.size() != x.size() || log_sigma.size() != x.size()) {
    throw ArgumentError("affine_forward: length mismatch");
  }
  AffineResult<T> r;
  r.z.resize(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) {
    if (!std::isfinite(x[d]) || !std::isfinite(mu[d]) || !std::isfinite(log_sigma[d])) {
      throw NumericError("affine_forward: non-finite input in dimension " + std::to_string(d + 1));
    }
    r.z[d] = (x[d] - mu[d]) * std::exp(-log_sigma[d]);
    r.logdet -= log_sigma[d];
  }
  return r;
}

}  // namespace hcnaf
