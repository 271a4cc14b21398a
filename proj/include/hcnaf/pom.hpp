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
#include "hcnaf/toy.hpp"
#include "hcnaf/training.hpp"

namespace hcnaf {

// Toy occupancy forecasting: a point actor drives up the y axis towards an
// intersection at y = 1 and leaves it left, straight or right.
//
// Condition vector: [32x32 road raster | 5 past positions (x, y) | dt].

inline constexpr std::size_t kPomGrid = 32;
inline constexpr std::size_t kPomHistory = 5;
inline constexpr std::size_t kPomCondDim = kPomGrid * kPomGrid + 2 * kPomHistory + 1;
inline constexpr std::size_t kPomScenarios = 4;
inline constexpr double kPomSpeed = 1.0;
inline constexpr double kPomJunction = 1.0;  // y of the intersection
inline constexpr double kPomRoadHalfWidth = 0.75;
inline constexpr Bounds kPomExtent{-6.0, 6.0, -4.0, 8.0};

enum class Maneuver { kLeft = 0, kStraight = 1, kRight = 2 };

// Maneuver probabilities (left, straight, right) per scenario:
// 0 T-junction 0.5/0/0.5, 1 left or straight 0.4/0.6/0,
// 2 straight or right 0/0.6/0.4, 3 four-way 0.25/0.5/0.25.
inline std::array<double, 3> pom_maneuver_weights(std::size_t scenario) {
  switch (scenario) {
    case 0: return {0.5, 0.0, 0.5};
    case 1: return {0.4, 0.6, 0.0};
    case 2: return {0.0, 0.6, 0.4};
    case 3: return {0.25, 0.5, 0.25};
    default: throw ArgumentError("pom: scenario must be 0..3");
  }
}

inline double pom_sigma(double dt) { return 0.05 + 0.1 * dt; }

// Noise-free position after dt seconds.
inline std::array<double, 2> pom_mean(Maneuver m, double dt) {
  const double s = kPomSpeed * dt;
  if (m == Maneuver::kStraight || s <= kPomJunction) return {0.0, s};
  const double lateral = s - kPomJunction;
  return {m == Maneuver::kLeft ? -lateral : lateral, kPomJunction};
}

// Road raster, row 0 = top (largest y), 1 on road cells.
inline std::vector<double> pom_road_grid(std::size_t scenario) {
  const auto w = pom_maneuver_weights(scenario);
  const auto& e = kPomExtent;
  const double cw = (e.x1 - e.x0) / double(kPomGrid), ch = (e.y1 - e.y0) / double(kPomGrid);
  std::vector<double> g(kPomGrid * kPomGrid, 0.0);
  for (std::size_t r = 0; r < kPomGrid; ++r) {
    const double y = e.y1 - (double(r) + 0.5) * ch;
    for (std::size_t c = 0; c < kPomGrid; ++c) {
      const double x = e.x0 + (double(c) + 0.5) * cw;
      const bool approach = std::abs(x) <= kPomRoadHalfWidth && y <= kPomJunction + kPomRoadHalfWidth;
      const bool cross = std::abs(y - kPomJunction) <= kPomRoadHalfWidth;
      const bool left = cross && x <= 0 && w[0] > 0;
      const bool right = cross && x >= 0 && w[2] > 0;
      const bool straight = std::abs(x) <= kPomRoadHalfWidth && y >= kPomJunction && w[1] > 0;
      if (approach || left || right || straight) g[r * kPomGrid + c] = 1.0;
    }
  }
  return g;
}

struct ToyScene {
  std::size_t scenario = 0;
  Maneuver maneuver = Maneuver::kStraight;
  double dt = 1.0;
  std::array<double, 2> target{};

  std::vector<double> condition() const { return pom_condition(scenario, dt); }

  static std::vector<double> pom_condition(std::size_t scenario, double dt) {
    std::vector<double> c = pom_road_grid(scenario);
    for (std::size_t k = 0; k < kPomHistory; ++k) {
      c.push_back(0.0);
      c.push_back(-kPomSpeed * double(kPomHistory - 1 - k));
    }
    c.push_back(dt);
    return c;
  }
};

inline std::vector<double> pom_condition(std::size_t scenario, double dt) {
  return ToyScene::pom_condition(scenario, dt);
}

namespace detail {

inline Maneuver draw_maneuver(std::size_t scenario, std::mt19937_64& rng) {
  const auto w = pom_maneuver_weights(scenario);
  std::discrete_distribution<int> pick({w[0], w[1], w[2]});
  return static_cast<Maneuver>(pick(rng));
}

inline std::array<double, 2> draw_target(Maneuver m, double dt, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  const auto mu = pom_mean(m, dt);
  const double s = pom_sigma(dt);
  const auto& e = kPomExtent;
  for (;;) {
    const std::array<double, 2> t{mu[0] + s * g(rng), mu[1] + s * g(rng)};
    if (t[0] > e.x0 && t[0] < e.x1 && t[1] > e.y0 && t[1] < e.y1) return t;
  }
}

}  // namespace detail

// n scenes, each with a uniformly drawn scenario and horizon from
// `horizons` (default 1..4 s).
inline std::vector<ToyScene> gen_toy_pom(std::size_t n_scenes, std::uint64_t seed,
                                         std::span<const double> horizons = {}) {
  static constexpr std::array<double, 4> kDefault{1, 2, 3, 4};
  if (horizons.empty()) horizons = kDefault;
  for (double h : horizons)
    if (!(h >= 0)) throw ArgumentError("gen_toy_pom: horizons must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_s(0, kPomScenarios - 1);
  std::uniform_int_distribution<std::size_t> pick_t(0, horizons.size() - 1);
  std::vector<ToyScene> out(n_scenes);
  for (auto& s : out) {
    s.scenario = pick_s(rng);
    s.dt = horizons[pick_t(rng)];
    s.maneuver = detail::draw_maneuver(s.scenario, rng);
    s.target = detail::draw_target(s.maneuver, s.dt, rng);
  }
  return out;
}

// Episodes of T = 4 consecutive scenes (dt = 1..4) sharing one maneuver.
inline std::vector<ToyScene> gen_toy_pom_episodes(std::size_t n_episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_s(0, kPomScenarios - 1);
  std::vector<ToyScene> out;
  out.reserve(4 * n_episodes);
  for (std::size_t e = 0; e < n_episodes; ++e) {
    const std::size_t scenario = pick_s(rng);
    const Maneuver m = detail::draw_maneuver(scenario, rng);
    for (int t = 1; t <= 4; ++t) {
      ToyScene s;
      s.scenario = scenario;
      s.maneuver = m;
      s.dt = t;
      s.target = detail::draw_target(m, s.dt, rng);
      out.push_back(s);
    }
  }
  return out;
}

inline Dataset<double> pom_dataset(std::span<const ToyScene> scenes) {
  Dataset<double> d{Matrix<double>(2, scenes.size()), Matrix<double>(kPomCondDim, scenes.size())};
  // Conditions repeat across scenes; build each distinct one once.
  std::vector<std::vector<double>> cache;
  std::vector<std::pair<std::size_t, double>> keys;
  for (std::size_t j = 0; j < scenes.size(); ++j) {
    const auto& s = scenes[j];
    std::size_t idx = keys.size();
    for (std::size_t i = 0; i < keys.size(); ++i)
      if (keys[i].first == s.scenario && keys[i].second == s.dt) idx = i;
    if (idx == keys.size()) {
      keys.push_back({s.scenario, s.dt});
      cache.push_back(s.condition());
    }
    d.x(0, j) = s.target[0];
    d.x(1, j) = s.target[1];
    for (std::size_t r = 0; r < kPomCondDim; ++r) d.c(r, j) = cache[idx][r];
  }
  return d;
}

// Analytic log-density of the scenario's future position (extent
// truncation ignored; it removes < 1e-9 of the mass for dt <= 4).
inline double pom_log_density(std::size_t scenario, double dt, double x, double y) {
  const auto w = pom_maneuver_weights(scenario);
  const double s = pom_sigma(dt);
  std::vector<double> terms;
  for (int m = 0; m < 3; ++m) {
    if (w[m] <= 0) continue;
    const auto mu = pom_mean(static_cast<Maneuver>(m), dt);
    const double dx = x - mu[0], dy = y - mu[1];
    terms.push_back(std::log(w[m]) - std::log(2 * kPi * s * s) - 0.5 * (dx * dx + dy * dy) / (s * s));
  }
  return logsumexp(terms);
}

// KL(p_true || p_model) for one (scenario, dt) by Monte Carlo under p_true.
template <typename Model>
Estimate pom_kl(const Model& model, std::size_t scenario, double dt, std::size_t n, std::uint64_t seed) {
  using T = typename Model::Real;
  std::mt19937_64 rng(seed);
  Matrix<T> x(2, n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto t = detail::draw_target(detail::draw_maneuver(scenario, rng), dt, rng);
    x(0, j) = static_cast<T>(t[0]);
    x(1, j) = static_cast<T>(t[1]);
  }
  const auto c = pom_condition(scenario, dt);
  const auto lp = model.log_prob_shared(x, std::vector<T>(c.begin(), c.end()));
  std::vector<double> diff(n);
  for (std::size_t j = 0; j < n; ++j)
    diff[j] = pom_log_density(scenario, dt, double(x(0, j)), double(x(1, j))) - double(lp[j]);
  return mean_and_se(diff);
}

// Extra nats: e = [H(p', p_model) - H(eta)] / (T A D), where p' is the
// ground truth perturbed by eta ~ N(0, eta_sigma^2 I) and
// H(eta) = 0.5 T A D ln(2 pi e eta_sigma^2). Columns of `truth` come in
// episodes of T * A consecutive rows.
template <typename Model>
Estimate extra_nats(const Model& model, const Dataset<double>& truth, double eta_sigma, std::size_t T,
                    std::size_t A, std::size_t D, std::uint64_t seed) {
  using R = typename Model::Real;
  if (!(eta_sigma > 0)) throw ArgumentError("extra_nats: eta_sigma must be > 0");
  const std::size_t per = T * A;
  if (per == 0 || D == 0 || truth.size() % per != 0 || truth.size() == 0) {
    throw ArgumentError("extra_nats: sample count must be a positive multiple of T * A");
  }
  if (truth.x.rows() != D) throw ArgumentError("extra_nats: D does not match the data");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, eta_sigma);
  Matrix<R> xp(D, truth.size());
  for (std::size_t j = 0; j < truth.size(); ++j)
    for (std::size_t r = 0; r < D; ++r) xp(r, j) = static_cast<R>(truth.x(r, j) + g(rng));
  const auto lp = model.log_prob(xp, truth.c.template cast<R>());
  const double tad = double(T * A * D);
  const double h_eta = 0.5 * tad * std::log(2 * kPi * std::exp(1.0) * eta_sigma * eta_sigma);
  std::vector<double> per_episode(truth.size() / per, 0.0);
  for (std::size_t j = 0; j < truth.size(); ++j) per_episode[j / per] -= double(lp[j]);
  for (auto& v : per_episode) v = (v - h_eta) / tad;
  return mean_and_se(per_episode);
}

// Per-scalar entropy of eta.
inline double eta_entropy_per_dim(double eta_sigma) {
  return 0.5 * std::log(2 * kPi * std::exp(1.0) * eta_sigma * eta_sigma);
}

}  // namespace hcnaf
