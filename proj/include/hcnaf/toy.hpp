#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "hcnaf/errors.hpp"
#include "hcnaf/logspace.hpp"
#include "hcnaf/matrix.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Toy 1: k x k grids of isotropic Gaussians

// Means on an even k x k lattice spanning [lo, hi]^2. sigma defaults to a
// sixth of the lattice spacing.
struct GridGaussianSpec {
  std::size_t k = 2;
  double sigma = 0.0;
  double lo = -4.0;
  double hi = 4.0;

  static GridGaussianSpec for_grid(std::size_t k) {
    if (k < 2) throw ArgumentError("GridGaussianSpec: k must be >= 2");
    GridGaussianSpec s;
    s.k = k;
    s.sigma = s.spacing() / 6.0;
    return s;
  }

  double spacing() const { return (hi - lo) / double(k - 1); }

  std::vector<std::array<double, 2>> means() const {
    std::vector<std::array<double, 2>> m;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) m.push_back({lo + spacing() * double(i), lo + spacing() * double(j)});
    return m;
  }

  void validate() const {
    if (k < 2) throw ArgumentError("GridGaussianSpec: k must be >= 2");
    if (!(sigma > 0)) throw ArgumentError("GridGaussianSpec: sigma must be > 0");
    if (!(hi > lo)) throw ArgumentError("GridGaussianSpec: empty extent");
  }
};

// The three toy-1 grids and their scalar condition values.
inline constexpr std::array<std::size_t, 3> kToy1Grids{2, 5, 10};

inline double grid_condition(std::size_t k) {
  for (std::size_t i = 0; i < kToy1Grids.size(); ++i)
    if (kToy1Grids[i] == k) return double(i);
  throw ArgumentError("grid_condition: k must be 2, 5 or 10");
}

// n draws from the uniform mixture; every sample carries condition `cond`.
inline Dataset<double> gen_grid_gaussians(const GridGaussianSpec& spec, std::size_t n, std::uint64_t seed,
                                          double cond) {
  spec.validate();
  const auto means = spec.means();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, means.size() - 1);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset<double> d{Matrix<double>(2, n), Matrix<double>(1, n, cond)};
  for (std::size_t j = 0; j < n; ++j) {
    const auto& m = means[pick(rng)];
    d.x(0, j) = m[0] + spec.sigma * g(rng);
    d.x(1, j) = m[1] + spec.sigma * g(rng);
  }
  return d;
}

inline Dataset<double> gen_grid_gaussians(const GridGaussianSpec& spec, std::size_t n, std::uint64_t seed) {
  return gen_grid_gaussians(spec, n, seed, grid_condition(spec.k));
}

// All three toy-1 grids, n samples each, conditions 0, 1, 2.
inline Dataset<double> toy1_dataset(std::size_t n_per_grid, std::uint64_t seed) {
  Dataset<double> all{Matrix<double>(2, 0), Matrix<double>(1, 0)};
  for (std::size_t i = 0; i < kToy1Grids.size(); ++i) {
    all = concat(all, gen_grid_gaussians(GridGaussianSpec::for_grid(kToy1Grids[i]), n_per_grid, seed + 7919 * i));
  }
  return all;
}

inline double grid_log_density(const GridGaussianSpec& spec, double x, double y) {
  const auto means = spec.means();
  std::vector<double> terms(means.size());
  const double s2 = spec.sigma * spec.sigma;
  const double norm = -std::log(2 * kPi * s2) - std::log(double(means.size()));
  for (std::size_t i = 0; i < means.size(); ++i) {
    const double dx = x - means[i][0], dy = y - means[i][1];
    terms[i] = norm - 0.5 * (dx * dx + dy * dy) / s2;
  }
  return logsumexp(terms);
}

// Mean with its standard error.
struct Estimate {
  double mean = 0;
  double se = 0;
  std::size_t n = 0;
};

inline Estimate mean_and_se(std::span<const double> v) {
  Estimate e;
  e.n = v.size();
  if (v.empty()) return e;
  for (double x : v) e.mean += x;
  e.mean /= double(v.size());
  if (v.size() > 1) {
    double sq = 0;
    for (double x : v) sq += (x - e.mean) * (x - e.mean);
    e.se = std::sqrt(sq / double(v.size() - 1) / double(v.size()));
  }
  return e;
}

// Monte Carlo differential entropy of the mixture (the NLL floor).
inline Estimate mixture_entropy_mc(const GridGaussianSpec& spec, std::size_t n = 1000000, std::uint64_t seed = 12345) {
  const auto d = gen_grid_gaussians(spec, n, seed, 0.0);
  std::vector<double> nll(n);
  for (std::size_t j = 0; j < n; ++j) nll[j] = -grid_log_density(spec, d.x(0, j), d.x(1, j));
  return mean_and_se(nll);
}

// ---------------------------------------------------------------------------
// Toy 2: one Gaussian whose mean is the condition

struct CondGaussianSpec {
  double sigma = 0.5;
  std::vector<std::array<double, 2>> c_train{{0, 0}, {2, 2}, {2, -2}, {-2, 2}, {-2, -2}};
  std::vector<std::array<double, 2>> c_unseen{{2, 0}, {-2, 0}, {0, 2}, {0, -2}};
};

// Draws from N(C, sigma^2 I); every sample carries C as its condition.
inline Dataset<double> gen_conditional_gaussian(const CondGaussianSpec& spec, std::array<double, 2> c,
                                                std::size_t n, std::uint64_t seed) {
  if (!(spec.sigma > 0)) throw ArgumentError("CondGaussianSpec: sigma must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Dataset<double> d{Matrix<double>(2, n), Matrix<double>(2, n)};
  for (std::size_t j = 0; j < n; ++j) {
    d.x(0, j) = c[0] + spec.sigma * g(rng);
    d.x(1, j) = c[1] + spec.sigma * g(rng);
    d.c(0, j) = c[0];
    d.c(1, j) = c[1];
  }
  return d;
}

inline Dataset<double> toy2_dataset(const CondGaussianSpec& spec, std::size_t n_per_cond, std::uint64_t seed) {
  Dataset<double> all{Matrix<double>(2, 0), Matrix<double>(2, 0)};
  for (std::size_t i = 0; i < spec.c_train.size(); ++i)
    all = concat(all, gen_conditional_gaussian(spec, spec.c_train[i], n_per_cond, seed + 104729 * i));
  return all;
}

// Differential entropy of an isotropic bivariate Gaussian: 0.5 ln((2 pi e sigma^2)^2).
inline double gaussian_entropy(double sigma) {
  if (!(sigma > 0)) throw ArgumentError("gaussian_entropy: sigma must be > 0");
  return 0.5 * std::log(std::pow(2 * kPi * std::exp(1.0) * sigma * sigma, 2));
}

// ---------------------------------------------------------------------------
// Metrics

// Mean NLL with per-sample conditions.
template <typename Model>
Estimate eval_nll(const Model& model, const Dataset<double>& data) {
  using T = typename Model::Real;
  const auto lp = model.log_prob(data.x.template cast<T>(), data.c.template cast<T>());
  std::vector<double> nll(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) nll[i] = -double(lp[i]);
  return mean_and_se(nll);
}

struct KlEstimate {
  double cross_entropy = 0;
  double se = 0;
  double entropy = 0;
  double kl = 0;
};

// H(p, p_model) by Monte Carlo under the true N(C, sigma^2 I);
// KL = H(p, p_model) - H(p).
template <typename Model>
KlEstimate kl_estimate(const Model& model, const CondGaussianSpec& spec, std::array<double, 2> c,
                       std::size_t n, std::uint64_t seed) {
  const auto ce = eval_nll(model, gen_conditional_gaussian(spec, c, n, seed));
  KlEstimate r;
  r.cross_entropy = ce.mean;
  r.se = ce.se;
  r.entropy = gaussian_entropy(spec.sigma);
  r.kl = r.cross_entropy - r.entropy;
  return r;
}

// ---------------------------------------------------------------------------
// Density grids

struct Bounds {
  double x0 = -3, x1 = 3, y0 = -3, y1 = 3;

  void validate() const {
    if (!(x1 > x0) || !(y1 > y0) || !std::isfinite(x0) || !std::isfinite(x1) || !std::isfinite(y0) ||
        !std::isfinite(y1)) {
      throw ArgumentError("Bounds: need x0 < x1 and y0 < y1");
    }
  }
};

// Densities at cell centres. values[iy * res_x + ix], iy = 0 is the
// bottom row (smallest y).
struct DensityGrid {
  Bounds bounds;
  std::size_t res_x = 0;
  std::size_t res_y = 0;
  std::vector<double> values;

  double dx() const { return (bounds.x1 - bounds.x0) / double(res_x); }
  double dy() const { return (bounds.y1 - bounds.y0) / double(res_y); }
  double x_at(std::size_t ix) const { return bounds.x0 + (double(ix) + 0.5) * dx(); }
  double y_at(std::size_t iy) const { return bounds.y0 + (double(iy) + 0.5) * dy(); }
  double at(std::size_t ix, std::size_t iy) const { return values[iy * res_x + ix]; }

  double riemann_sum() const {
    double s = 0;
    for (double v : values) s += v;
    return s * dx() * dy();
  }

  // Mass of the cells whose centres satisfy pred(x, y).
  template <typename Pred>
  double mass_where(Pred&& pred) const {
    double s = 0;
    for (std::size_t iy = 0; iy < res_y; ++iy)
      for (std::size_t ix = 0; ix < res_x; ++ix)
        if (pred(x_at(ix), y_at(iy))) s += at(ix, iy);
    return s * dx() * dy();
  }
};

// exp(log p(x, y | C)) at every cell centre of a res x res lattice.
template <typename Model>
DensityGrid density_grid(const Model& model, std::span<const double> c, const Bounds& b, std::size_t res_x,
                         std::size_t res_y) {
  using T = typename Model::Real;
  b.validate();
  if (res_x < 1 || res_y < 1) throw ArgumentError("density_grid: resolution must be >= 1");
  if (model.dim() != 2) throw ArgumentError("density_grid: model must be 2-dimensional");
  if (c.size() != model.cond_dim()) throw ArgumentError("density_grid: condition length mismatch");
  DensityGrid g{b, res_x, res_y, std::vector<double>(res_x * res_y)};
  Matrix<T> pts(2, res_x * res_y);
  for (std::size_t iy = 0; iy < res_y; ++iy)
    for (std::size_t ix = 0; ix < res_x; ++ix) {
      pts(0, iy * res_x + ix) = static_cast<T>(g.x_at(ix));
      pts(1, iy * res_x + ix) = static_cast<T>(g.y_at(iy));
    }
  std::vector<T> cv(c.begin(), c.end());
  const auto lp = model.log_prob_shared(pts, cv);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = std::exp(double(lp[i]));
  return g;
}

template <typename Model>
DensityGrid density_grid(const Model& model, std::span<const double> c, const Bounds& b, std::size_t res) {
  return density_grid(model, c, b, res, res);
}

}  // namespace hcnaf
