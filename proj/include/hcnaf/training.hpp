#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/ops.hpp"
#include "hcnaf/tape.hpp"

namespace hcnaf {

// A set of conditioned samples stored column-wise: x is D x n, c is Dc x n.
template <typename T>
struct Dataset {
  Matrix<T> x;
  Matrix<T> c;

  std::size_t size() const noexcept { return x.cols(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{Matrix<T>(x.rows(), idx.size()), Matrix<T>(c.rows(), idx.size())};
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t r = 0; r < x.rows(); ++r) out.x(r, i) = x(r, idx[i]);
      for (std::size_t r = 0; r < c.rows(); ++r) out.c(r, i) = c(r, idx[i]);
    }
    return out;
  }

  template <typename U>
  Dataset<U> cast() const {
    return {x.template cast<U>(), c.template cast<U>()};
  }
};

template <typename T>
Dataset<T> concat(const Dataset<T>& a, const Dataset<T>& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  Dataset<T> out{Matrix<T>(a.x.rows(), a.size() + b.size()), Matrix<T>(a.c.rows(), a.size() + b.size())};
  for (std::size_t j = 0; j < a.size(); ++j) {
    for (std::size_t r = 0; r < a.x.rows(); ++r) out.x(r, j) = a.x(r, j);
    for (std::size_t r = 0; r < a.c.rows(); ++r) out.c(r, j) = a.c(r, j);
  }
  for (std::size_t j = 0; j < b.size(); ++j) {
    for (std::size_t r = 0; r < b.x.rows(); ++r) out.x(r, a.size() + j) = b.x(r, j);
    for (std::size_t r = 0; r < b.c.rows(); ++r) out.c(r, a.size() + j) = b.c(r, j);
  }
  return out;
}

struct TrainConfig {
  double learning_rate = 5e-3;
  double decay_factor = 0.5;
  std::size_t patience_iters = 2000;
  std::size_t batch_size = 64;
  std::size_t max_iters = 10000;
  std::uint64_t seed = 1;
  int precision = 64;
  double val_fraction = 0.1;
  std::size_t val_every = 100;
  std::size_t val_max = 4096;          // validation samples evaluated per check
  double improvement_threshold = 1e-4;  // absolute NLL
  double grad_clip = 10.0;              // global norm; <= 0 disables
  double divergence_limit = 1e6;

  void validate() const {
    if (!(learning_rate > 0)) throw ArgumentError("TrainConfig: learning_rate must be > 0");
    if (!(decay_factor > 0 && decay_factor < 1)) {
      throw ArgumentError("TrainConfig: decay_factor must be in (0, 1)");
    }
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (precision != 32 && precision != 64) throw ArgumentError("TrainConfig: precision must be 32 or 64");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ArgumentError("TrainConfig: val_fraction in [0, 1)");
    if (val_every < 1) throw ArgumentError("TrainConfig: val_every must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Objective

// Mean negative log-likelihood over the batch; every sample's flow comes
// from the hyper-network evaluated on that sample's own condition.
template <typename Model, typename T = typename Model::Real>
T nll_loss(const Model& model, const Dataset<T>& batch) {
  if (batch.size() == 0) throw ArgumentError("nll_loss: empty batch");
  const Matrix<T> lp = model.log_prob(batch.x, batch.c);
  double s = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (!std::isfinite(lp[i])) {
      throw NumericError("nll_loss: non-finite log-probability at sample " + std::to_string(i));
    }
    s -= static_cast<double>(lp[i]);
  }
  return static_cast<T>(s / static_cast<double>(lp.size()));
}

// Loss and gradients for every model parameter.
template <typename Model, typename T = typename Model::Real>
T nll_loss_and_grad(const Model& model, const Dataset<T>& batch, std::vector<Matrix<T>>& grads) {
  if (batch.size() == 0) throw ArgumentError("nll_loss: empty batch");
  Tape<T> tape;
  TapeOps<T> ops{tape};
  std::vector<typename Tape<T>::Var> p;
  p.reserve(model.params().size());
  for (const auto& m : model.params()) p.push_back(tape.parameter(m));
  auto total = model.sum_log_prob(ops, p, batch.x, batch.c);
  auto loss = tape.scale(total, T(-1) / static_cast<T>(batch.size()));
  const T value = tape.value(loss)[0];
  if (!std::isfinite(value)) {
    // Locate the offending sample for the diagnostic.
    const Matrix<T> lp = model.log_prob(batch.x, batch.c);
    for (std::size_t i = 0; i < lp.size(); ++i)
      if (!std::isfinite(lp[i])) {
        throw NumericError("nll_loss: non-finite log-probability at sample " + std::to_string(i));
      }
    throw NumericError("nll_loss: non-finite loss");
  }
  tape.backward(loss);
  grads.clear();
  for (auto v : p) grads.push_back(tape.grad(v));
  return value;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix<T>> m;
  std::vector<Matrix<T>> v;
};

// Standard Adam with bias correction, in place on `params`.
template <typename T>
void adam_step(AdamState<T>& s, std::vector<Matrix<T>>& params, const std::vector<Matrix<T>>& grads,
               double lr) {
  if (grads.size() != params.size()) throw ArgumentError("adam_step: gradient count mismatch");
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.rows(), p.cols());
      s.v.emplace_back(p.rows(), p.cols());
    }
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  const double b1 = s.beta1, b2 = s.beta2, eps = s.eps;
  const double step1 = lr / bc1, inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
  const double tiny = static_cast<double>(std::numeric_limits<T>::min());
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto& g = grads[k];
    if (!g.same_shape(p)) throw ArgumentError("adam_step: gradient shape mismatch");
    T* pd = p.data();
    T* md = s.m[k].data();
    T* vd = s.v[k].data();
    const T* gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(gd[i]);
      double mi = b1 * static_cast<double>(md[i]) + (1.0 - b1) * gi;
      double vi = b2 * static_cast<double>(vd[i]) + (1.0 - b2) * gi * gi;
      // moments of never-updated entries decay into subnormals, which are slow
      if (std::abs(mi) < tiny) mi = 0.0;
      if (vi < tiny) vi = 0.0;
      md[i] = static_cast<T>(mi);
      vd[i] = static_cast<T>(vi);
      pd[i] = static_cast<T>(static_cast<double>(pd[i]) - step1 * mi / (std::sqrt(vi) * inv_sqrt_bc2 + eps));
    }
  }
}

// Scales grads so their global L2 norm is at most max_norm; returns the
// norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<Matrix<T>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T x : g.flat()) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& g : grads)
      for (auto& x : g.flat()) x *= s;
  }
  return norm;
}

// Halves (by `factor`) the learning rate once `patience` iterations pass
// without the validation loss improving on the best seen by more than
// `threshold`. A decay restarts the patience window.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, std::size_t patience, double threshold)
      : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {}

  double lr() const noexcept { return lr_; }
  std::size_t decays() const noexcept { return decays_; }
  double best() const noexcept { return best_; }

  // Records the validation loss measured at iteration `iter`; returns true
  // when it is a new best.
  bool observe(std::size_t iter, double val_loss) {
    if (!seen_ || val_loss < best_ - threshold_) {
      seen_ = true;
      best_ = val_loss;
      window_start_ = iter;
      return true;
    }
    if (iter - window_start_ >= patience_) {
      lr_ *= factor_;
      ++decays_;
      window_start_ = iter;
    }
    return false;
  }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double threshold_;
  bool seen_ = false;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t window_start_ = 0;
  std::size_t decays_ = 0;
};

// Learning rate after replaying a history of validation losses observed at
// iterations 0, 1, 2, ...
inline double lr_schedule(double lr, double factor, std::size_t patience, double threshold,
                          std::span<const double> val_history) {
  PlateauSchedule s(lr, factor, patience, threshold);
  for (std::size_t i = 0; i < val_history.size(); ++i) s.observe(i, val_history[i]);
  return s.lr();
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricsRow {
  std::size_t iter = 0;
  double train_nll = 0;
  double val_nll = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<MetricsRow> log;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_iter = 0;
};

// Splits off a seeded validation set, runs Adam on shuffled mini-batches,
// checks validation NLL every `val_every` iterations and leaves the model
// holding the best-validation parameters.
template <typename Model, typename T = typename Model::Real>
TrainResult train(Model& model, const Dataset<T>& data, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_eval = {}) {
  cfg.validate();
  if (data.size() < 2) throw ArgumentError("train: need at least 2 samples");
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * double(data.size())));
  if (cfg.val_fraction > 0 && n_val == 0) n_val = 1;
  const std::size_t n_train = data.size() - n_val;
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> val_idx(order.begin() + n_train, order.end());
  if (val_idx.size() > cfg.val_max) val_idx.resize(cfg.val_max);
  const Dataset<T> val = n_val > 0 ? data.subset(val_idx) : Dataset<T>{};

  PlateauSchedule sched(cfg.learning_rate, cfg.decay_factor, cfg.patience_iters,
                        cfg.improvement_threshold);
  AdamState<T> adam;
  TrainResult result;
  std::vector<Matrix<T>> best = model.params();
  std::vector<Matrix<T>> grads;
  std::vector<std::size_t> batch_idx(std::min(cfg.batch_size, n_train));
  std::size_t cursor = n_train;  // forces a shuffle on the first batch
  double train_acc = 0.0;
  std::size_t train_count = 0;

  auto evaluate = [&](std::size_t iter) {
    const double v = n_val > 0 ? static_cast<double>(nll_loss(model, val)) : train_acc / double(train_count);
    MetricsRow row{iter, train_count ? train_acc / double(train_count) : v, v, sched.lr()};
    sched.observe(iter, v);
    if (v < result.best_val) {
      result.best_val = v;
      result.best_iter = iter;
      best = model.params();
    }
    result.log.push_back(row);
    if (on_eval) on_eval(row);
    train_acc = 0.0;
    train_count = 0;
  };

  for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
    for (auto& b : batch_idx) {
      if (cursor >= n_train) {
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        cursor = 0;
      }
      b = train_idx[cursor++];
    }
    const Dataset<T> batch = data.subset(batch_idx);
    const double loss = static_cast<double>(nll_loss_and_grad(model, batch, grads));
    if (!(loss < cfg.divergence_limit)) {
      throw NumericError("train: loss " + std::to_string(loss) + " exceeded divergence limit at iteration " +
                         std::to_string(iter));
    }
    train_acc += loss;
    ++train_count;
    clip_grad_norm(grads, cfg.grad_clip);
    adam_step(adam, model.params(), grads, sched.lr());
    if (iter % cfg.val_every == 0 || iter == cfg.max_iters) evaluate(iter);
  }
  model.params() = best;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;  // index into params()
  std::size_t worst_entry = 0;
};

// Relative error used by grad_check: |a - n| / max(|a|, |n|, floor).
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares the tape gradient of nll_loss with central finite differences
// on a seeded random `fraction` of the scalar parameters (at least one per
// parameter tensor). `step` defaults to 1e-4 at 64-bit, 5e-3 at 32-bit;
// `floor` (the smallest denominator of the relative error) to 1e-6 and
// 1e-3.
template <typename Model, typename T = typename Model::Real>
GradCheckResult grad_check(Model& model, const Dataset<T>& batch, double fraction = 0.05,
                           std::uint64_t seed = 0, double step = 0.0, double floor = 0.0) {
  if (step <= 0.0) step = sizeof(T) >= 8 ? 1e-4 : 5e-3;
  if (floor <= 0.0) floor = sizeof(T) >= 8 ? 1e-6 : 1e-3;
  std::vector<Matrix<T>> grads;
  nll_loss_and_grad(model, batch, grads);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GradCheckResult r;
  auto& params = model.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<std::size_t> picks;
    for (std::size_t i = 0; i < params[k].size(); ++i)
      if (u(rng) < fraction) picks.push_back(i);
    if (picks.empty()) picks.push_back(static_cast<std::size_t>(u(rng) * double(params[k].size())) % params[k].size());
    for (std::size_t i : picks) {
      const T orig = params[k][i];
      params[k][i] = static_cast<T>(static_cast<double>(orig) + step);
      const double up = static_cast<double>(nll_loss(model, batch));
      params[k][i] = static_cast<T>(static_cast<double>(orig) - step);
      const double down = static_cast<double>(nll_loss(model, batch));
      params[k][i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = grad_rel_error(static_cast<double>(grads[k][i]), numeric, floor);
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst_param = k;
        r.worst_entry = i;
      }
    }
  }
  return r;
}

}  // namespace hcnaf
