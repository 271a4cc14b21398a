#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/flow.hpp"
#include "hcnaf/hypernet.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/ops.hpp"
#include "hcnaf/parallel.hpp"

namespace hcnaf {

// Columns of `c` grouped by exact value, groups in order of first appearance.
template <typename T>
std::vector<std::pair<std::vector<T>, std::vector<std::size_t>>> group_columns(const Matrix<T>& c) {
  std::vector<std::pair<std::vector<T>, std::vector<std::size_t>>> groups;
  std::map<std::vector<T>, std::size_t> index;
  for (std::size_t j = 0; j < c.cols(); ++j) {
    auto key = c.col(j);
    auto [it, fresh] = index.try_emplace(key, groups.size());
    if (fresh) groups.push_back({std::move(key), {}});
    groups[it->second].second.push_back(j);
  }
  return groups;
}

template <typename T>
Matrix<T> gather_columns(const Matrix<T>& m, std::span<const std::size_t> cols) {
  Matrix<T> out(m.rows(), cols.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t i = 0; i < cols.size(); ++i) out(r, i) = m(r, cols[i]);
  return out;
}

namespace detail {

inline void check_batch(std::size_t dim, std::size_t cond_dim, std::size_t xr, std::size_t xc,
                        std::size_t cr, std::size_t cc) {
  if (xr != dim) throw ArgumentError("model: x has " + std::to_string(xr) + " rows, expected " + std::to_string(dim));
  if (cr != cond_dim) {
    throw ArgumentError("model: condition has length " + std::to_string(cr) + ", expected " +
                        std::to_string(cond_dim));
  }
  if (xc != cc) throw ArgumentError("model: x and condition column counts differ");
}

constexpr std::size_t kEvalChunk = 2048;

}  // namespace detail

// HCNAF: hyper-network emitting the parameters of the conditional flow.
template <typename T>
class HcnafModel {
 public:
  using Real = T;

  HcnafModel() = default;
  HcnafModel(HyperNetConfig hc, CondAFConfig fc) : net_(std::move(hc), fc) {}

  static constexpr const char* kind() { return "hcnaf"; }

  HyperNet<T>& net() noexcept { return net_; }
  const HyperNet<T>& net() const noexcept { return net_; }
  std::size_t dim() const noexcept { return net_.dim(); }
  std::size_t cond_dim() const noexcept { return net_.cond_dim(); }
  std::vector<Matrix<T>>& params() noexcept { return net_.params(); }
  const std::vector<Matrix<T>>& params() const noexcept { return net_.params(); }
  const std::vector<std::string>& param_names() const noexcept { return net_.param_names(); }
  void init(std::uint64_t seed) { net_.init(seed); }

  FlowParams<T> flow_params(std::span<const T> c) const { return net_.forward(c); }

  // Sum over columns of log p(x_j | c_j), recorded on `ops`. The
  // hyper-network runs once per distinct condition in the batch.
  template <typename Ops>
  typename Ops::Val sum_log_prob(const Ops& ops, const std::vector<typename Ops::Val>& p,
                                 const Matrix<T>& x, const Matrix<T>& c) const {
    detail::check_batch(dim(), cond_dim(), x.rows(), x.cols(), c.rows(), c.cols());
    std::vector<typename Ops::Val> parts;
    for (const auto& [cond, cols] : group_columns(c)) {
      auto cv = ops.constant(Matrix<T>::column(cond));
      auto [w, b] = net_.forward_ops(ops, p, cv);
      auto xv = ops.constant(gather_columns(x, cols));
      parts.push_back(ops.sum(flow_log_prob(ops, net_.layout(), w, b, xv)));
    }
    if (parts.size() == 1) return parts[0];
    return ops.sum(ops.concat_rows(parts));
  }

  // log p(x_j | c_j) for each column, 1 x n.
  Matrix<T> log_prob(const Matrix<T>& x, const Matrix<T>& c) const {
    detail::check_batch(dim(), cond_dim(), x.rows(), x.cols(), c.rows(), c.cols());
    Matrix<T> out(1, x.cols());
    for (const auto& [cond, cols] : group_columns(c)) {
      const FlowParams<T> fp = net_.forward(cond);
      const std::size_t chunks = (cols.size() + detail::kEvalChunk - 1) / detail::kEvalChunk;
      parallel_for(chunks, [&](std::size_t k) {
        const std::size_t lo = k * detail::kEvalChunk;
        const std::size_t hi = std::min(cols.size(), lo + detail::kEvalChunk);
        std::span<const std::size_t> part(cols.data() + lo, hi - lo);
        const Matrix<T> lp = log_prob_batch(net_.layout(), fp, gather_columns(x, part));
        for (std::size_t i = 0; i < part.size(); ++i) out[part[i]] = lp[i];
      });
    }
    return out;
  }

  // log p(x | c) for many points sharing one condition.
  Matrix<T> log_prob_shared(const Matrix<T>& x, std::span<const T> c) const {
    Matrix<T> cm(cond_dim(), x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j)
      for (std::size_t r = 0; r < cond_dim(); ++r) cm(r, j) = c[r];
    return log_prob(x, cm);
  }

  SampleSet<T> sample(std::span<const T> c, std::size_t n, std::uint64_t seed) const {
    return hcnaf::sample(net_.layout(), net_.forward(c), n, seed);
  }

 private:
  HyperNet<T> net_;
};

// Conditional affine autoregressive baseline:
//   x_d = mu_d(x_{<d}, C) + sigma_d(x_{<d}, C) z_d
// with mu and log sigma from a masked MLP over [x; C] (degree masks keep
// output d blind to x_d, ..., x_D).
struct AffineConfig {
  std::size_t dim = 2;
  std::size_t cond_dim = 1;
  std::size_t hidden_layers = 2;
  std::size_t width = 64;

  void validate() const {
    if (dim < 1 || cond_dim < 1 || hidden_layers < 1 || width < 1) {
      throw ArgumentError("AffineConfig: all sizes must be >= 1");
    }
  }
  friend bool operator==(const AffineConfig&, const AffineConfig&) = default;
};

template <typename T>
class AffineModel {
 public:
  using Real = T;

  AffineModel() = default;
  explicit AffineModel(AffineConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.dim;
    std::vector<std::size_t> in_deg(D + cfg_.cond_dim, 0);
    for (std::size_t d = 0; d < D; ++d) in_deg[d] = d + 1;
    std::vector<std::size_t> prev = in_deg;
    for (std::size_t l = 0; l < cfg_.hidden_layers; ++l) {
      std::vector<std::size_t> deg(cfg_.width);
      for (std::size_t u = 0; u < cfg_.width; ++u) deg[u] = u % D;
      Matrix<T> mask(cfg_.width, prev.size());
      for (std::size_t u = 0; u < cfg_.width; ++u)
        for (std::size_t i = 0; i < prev.size(); ++i) mask(u, i) = prev[i] <= deg[u] ? T(1) : T(0);
      add_layer("hidden." + std::to_string(l), std::move(mask));
      prev = std::move(deg);
    }
    Matrix<T> mask(2 * D, prev.size());
    for (std::size_t o = 0; o < 2 * D; ++o) {
      const std::size_t d = o % D + 1;  // rows: mu_1..mu_D, logsig_1..logsig_D
      for (std::size_t i = 0; i < prev.size(); ++i) mask(o, i) = prev[i] < d ? T(1) : T(0);
    }
    add_layer("out", std::move(mask));
  }

  static constexpr const char* kind() { return "affine"; }

  const AffineConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::size_t cond_dim() const noexcept { return cfg_.cond_dim; }
  std::vector<Matrix<T>>& params() noexcept { return params_; }
  const std::vector<Matrix<T>>& params() const noexcept { return params_; }
  const std::vector<std::string>& param_names() const noexcept { return names_; }

  // Hidden layers uniform in +-1/sqrt(fan_in); output layer zero, so the
  // initial model is the identity map (standard normal density).
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < params_.size(); i += 2) {
      auto& w = params_[i];
      auto& b = params_[i + 1];
      if (i + 2 == params_.size()) {
        w.fill(T(0));
        b.fill(T(0));
        continue;
      }
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& x : w.flat()) x = static_cast<T>(u(rng));
      for (auto& x : b.flat()) x = static_cast<T>(u(rng));
    }
  }

  // (mu; log sigma) stacked, 2D x n.
  template <typename Ops>
  typename Ops::Val shift_log_scale(const Ops& ops, const std::vector<typename Ops::Val>& p,
                                    const typename Ops::Val& x, const typename Ops::Val& c) const {
    typename Ops::Val h = ops.concat_rows({x, c});
    const std::size_t n_layers = params_.size() / 2;
    for (std::size_t l = 0; l < n_layers; ++l) {
      auto w = ops.mul(p[2 * l], ops.constant(masks_[l]));
      h = ops.add_bias(ops.matmul(w, h), p[2 * l + 1]);
      if (l + 1 < n_layers) h = ops.tanh(h);
    }
    return h;
  }

  template <typename Ops>
  typename Ops::Val log_prob_ops(const Ops& ops, const std::vector<typename Ops::Val>& p,
                                 const Matrix<T>& x, const Matrix<T>& c) const {
    detail::check_batch(dim(), cond_dim(), x.rows(), x.cols(), c.rows(), c.cols());
    const std::size_t D = dim();
    auto xv = ops.constant(x);
    auto out = shift_log_scale(ops, p, xv, ops.constant(c));
    auto mu = ops.slice_rows(out, 0, D);
    auto log_sigma = ops.slice_rows(out, D, D);
    auto z = ops.mul(ops.sub(xv, mu), ops.exp(ops.scale(log_sigma, T(-1))));
    return ops.sub(ops.normal_logpdf(z), ops.sum_rows(log_sigma));
  }

  template <typename Ops>
  typename Ops::Val sum_log_prob(const Ops& ops, const std::vector<typename Ops::Val>& p,
                                 const Matrix<T>& x, const Matrix<T>& c) const {
    return ops.sum(log_prob_ops(ops, p, x, c));
  }

  Matrix<T> log_prob(const Matrix<T>& x, const Matrix<T>& c) const {
    detail::check_batch(dim(), cond_dim(), x.rows(), x.cols(), c.rows(), c.cols());
    PlainOps<T> ops;
    Matrix<T> out(1, x.cols());
    const std::size_t chunks = (x.cols() + detail::kEvalChunk - 1) / detail::kEvalChunk;
    parallel_for(chunks, [&](std::size_t k) {
      const std::size_t lo = k * detail::kEvalChunk;
      const std::size_t hi = std::min(x.cols(), lo + detail::kEvalChunk);
      std::vector<std::size_t> cols(hi - lo);
      for (std::size_t i = 0; i < cols.size(); ++i) cols[i] = lo + i;
      const Matrix<T> lp = log_prob_ops(ops, params_, gather_columns(x, cols), gather_columns(c, cols));
      for (std::size_t i = 0; i < cols.size(); ++i) out[lo + i] = lp[i];
    });
    return out;
  }

  Matrix<T> log_prob_shared(const Matrix<T>& x, std::span<const T> c) const {
    Matrix<T> cm(cond_dim(), x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j)
      for (std::size_t r = 0; r < cond_dim(); ++r) cm(r, j) = c[r];
    return log_prob(x, cm);
  }

  // Exact inverse: x_d = mu_d + sigma_d z_d, one dimension at a time.
  Matrix<T> invert(const Matrix<T>& z, std::span<const T> c) const {
    const std::size_t D = dim();
    if (z.rows() != D) throw ArgumentError("affine invert: wrong target rows");
    Matrix<T> cm(cond_dim(), z.cols());
    for (std::size_t j = 0; j < z.cols(); ++j)
      for (std::size_t r = 0; r < cond_dim(); ++r) cm(r, j) = c[r];
    PlainOps<T> ops;
    Matrix<T> x(D, z.cols());
    for (std::size_t d = 0; d < D; ++d) {
      const Matrix<T> out = shift_log_scale(ops, params_, x, cm);
      for (std::size_t j = 0; j < z.cols(); ++j) x(d, j) = out(d, j) + std::exp(out(D + d, j)) * z(d, j);
    }
    return x;
  }

  SampleSet<T> sample(std::span<const T> c, std::size_t n, std::uint64_t seed) const {
    if (n < 1) throw ArgumentError("sample: n must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix<T> z(dim(), n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t d = 0; d < dim(); ++d) z(d, j) = static_cast<T>(normal(rng));
    SampleSet<T> s;
    s.x = invert(z, c);
    s.log_prob = log_prob_shared(s.x, c).storage();
    return s;
  }

 private:
  void add_layer(const std::string& name, Matrix<T> mask) {
    names_.push_back(name + ".weight");
    params_.emplace_back(mask.rows(), mask.cols());
    names_.push_back(name + ".bias");
    params_.emplace_back(mask.rows(), 1);
    masks_.push_back(std::move(mask));
  }

  AffineConfig cfg_;
  std::vector<Matrix<T>> params_;
  std::vector<std::string> names_;
  std::vector<Matrix<T>> masks_;
};

}  // namespace hcnaf
