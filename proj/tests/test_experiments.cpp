#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>

#include "hcnaf/mnist.hpp"
#include "hcnaf/model.hpp"
#include "hcnaf/pom.hpp"
#include "hcnaf/toy.hpp"

using namespace hcnaf;

namespace {

// Model with a closed-form log-density f(x, c).
struct StubModel {
  using Real = double;
  std::size_t d = 2;
  std::size_t cd = 2;
  std::function<double(std::span<const double>, std::span<const double>)> f;

  std::size_t dim() const { return d; }
  std::size_t cond_dim() const { return cd; }

  Matrix<double> log_prob(const Matrix<double>& x, const Matrix<double>& c) const {
    Matrix<double> out(1, x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const auto xj = x.col(j);
      const auto cj = c.col(j);
      out[j] = f(xj, cj);
    }
    return out;
  }

  Matrix<double> log_prob_shared(const Matrix<double>& x, std::span<const double> c) const {
    Matrix<double> cm(cd, x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j)
      for (std::size_t r = 0; r < cd; ++r) cm(r, j) = c[r];
    return log_prob(x, cm);
  }
};

double iso_gauss(std::span<const double> x, std::span<const double> mu, double s) {
  double q = 0;
  for (std::size_t i = 0; i < x.size(); ++i) q += (x[i] - mu[i]) * (x[i] - mu[i]);
  return -0.5 * q / (s * s) - double(x.size()) * (std::log(s) + 0.5 * std::log(2 * kPi));
}

std::vector<double> vec(const Matrix<double>& m) { return {m.flat().begin(), m.flat().end()}; }

std::string data_path(const std::string& f) { return std::string(HCNAF_TEST_DATA) + "/" + f; }

}  // namespace

// ---------------------------------------------------------------------------
// Toy 1

TEST(GridGaussians, MeansAndSpacing) {
  const auto s = GridGaussianSpec::for_grid(5);
  EXPECT_DOUBLE_EQ(s.spacing(), 2.0);
  EXPECT_DOUBLE_EQ(s.sigma, 2.0 / 6.0);
  const auto m = s.means();
  ASSERT_EQ(m.size(), 25u);
  EXPECT_DOUBLE_EQ(m.front()[0], -4.0);
  EXPECT_DOUBLE_EQ(m.back()[1], 4.0);
  EXPECT_THROW(GridGaussianSpec::for_grid(1), ArgumentError);
  EXPECT_THROW(grid_condition(3), ArgumentError);
}

TEST(GridGaussians, EmptyDraw) {
  const auto d = gen_grid_gaussians(GridGaussianSpec::for_grid(2), 0, 1);
  EXPECT_EQ(d.size(), 0u);
  EXPECT_EQ(d.x.rows(), 2u);
}

TEST(GridGaussians, SampleMeanNearCentre) {
  const std::size_t n = 20000;
  for (std::size_t k : kToy1Grids) {
    const auto spec = GridGaussianSpec::for_grid(k);
    const auto d = gen_grid_gaussians(spec, n, 3);
    // per-axis variance of the mixture
    double var = spec.sigma * spec.sigma;
    for (std::size_t i = 0; i < k; ++i) {
      const double v = spec.lo + spec.spacing() * double(i);
      var += v * v / double(k);
    }
    for (std::size_t r = 0; r < 2; ++r) {
      double m = 0;
      for (std::size_t j = 0; j < n; ++j) m += d.x(r, j);
      m /= double(n);
      EXPECT_LT(std::abs(m), 4 * std::sqrt(var / double(n))) << "k=" << k;
    }
    for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(d.c(0, j), grid_condition(k));
  }
}

TEST(GridGaussians, DeterministicPerSeed) {
  const auto a = toy1_dataset(100, 5);
  const auto b = toy1_dataset(100, 5);
  const auto c = toy1_dataset(100, 6);
  ASSERT_EQ(a.size(), 300u);
  EXPECT_EQ(vec(a.x), vec(b.x));
  EXPECT_NE(vec(a.x), vec(c.x));
  EXPECT_EQ(a.c(0, 0), 0.0);
  EXPECT_EQ(a.c(0, 150), 1.0);
  EXPECT_EQ(a.c(0, 299), 2.0);
}

TEST(GridGaussians, LogDensityMatchesDirectSum) {
  const auto s = GridGaussianSpec::for_grid(2);
  const double x = 0.3, y = -3.1;
  double p = 0;
  for (const auto& m : s.means()) {
    const double q = (x - m[0]) * (x - m[0]) + (y - m[1]) * (y - m[1]);
    p += std::exp(-0.5 * q / (s.sigma * s.sigma)) / (2 * kPi * s.sigma * s.sigma) / 4.0;
  }
  EXPECT_NEAR(grid_log_density(s, x, y), std::log(p), 1e-12);
}

TEST(GridGaussians, EntropyNearSeparatedLimit) {
  // Well separated components: H ~ ln(2 pi e sigma^2) + ln(k^2), slightly
  // lower because of the overlap between neighbours.
  for (std::size_t k : kToy1Grids) {
    const auto s = GridGaussianSpec::for_grid(k);
    const auto h = mixture_entropy_mc(s, 100000, 9);
    const double sep = std::log(2 * kPi * std::exp(1.0) * s.sigma * s.sigma) + std::log(double(k * k));
    EXPECT_LT(h.mean, sep + 3 * h.se) << "k=" << k;
    EXPECT_GT(h.mean, sep - 0.03) << "k=" << k;
  }
}

TEST(Estimates, MeanAndSe) {
  const std::vector<double> v{1, 2, 3, 4};
  const auto e = mean_and_se(v);
  EXPECT_DOUBLE_EQ(e.mean, 2.5);
  EXPECT_NEAR(e.se, std::sqrt((1.25 * 4 / 3.0) / 4.0), 1e-15);
  EXPECT_EQ(mean_and_se(std::vector<double>{}).n, 0u);
}

// ---------------------------------------------------------------------------
// Toy 2

TEST(CondGaussian, EntropyValues) {
  EXPECT_NEAR(gaussian_entropy(0.5), 1.4515827, 1e-6);
  EXPECT_NEAR(gaussian_entropy(1.0 / std::sqrt(2 * kPi * std::exp(1.0))), 0.0, 1e-12);
  EXPECT_NEAR(gaussian_entropy(1.0) - gaussian_entropy(0.5), 2 * std::log(2.0), 1e-12);
  EXPECT_THROW(gaussian_entropy(0.0), ArgumentError);
}

TEST(CondGaussian, CovarianceAndMean) {
  const CondGaussianSpec spec;
  const std::size_t n = 40000;
  const auto d = gen_conditional_gaussian(spec, {2, -2}, n, 11);
  double m[2] = {0, 0}, cov[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t j = 0; j < n; ++j)
    for (int r = 0; r < 2; ++r) m[r] += d.x(r, j) / double(n);
  for (std::size_t j = 0; j < n; ++j)
    for (int r = 0; r < 2; ++r)
      for (int s = 0; s < 2; ++s) cov[r][s] += (d.x(r, j) - m[r]) * (d.x(s, j) - m[s]) / double(n - 1);
  EXPECT_NEAR(m[0], 2.0, 4 * 0.5 / std::sqrt(double(n)));
  EXPECT_NEAR(m[1], -2.0, 4 * 0.5 / std::sqrt(double(n)));
  EXPECT_NEAR(cov[0][0], 0.25, 0.05 * 0.25);
  EXPECT_NEAR(cov[1][1], 0.25, 0.05 * 0.25);
  EXPECT_LT(std::abs(cov[0][1]), 0.05 * 0.25);
  EXPECT_EQ(d.c(0, 7), 2.0);
  EXPECT_EQ(d.c(1, 7), -2.0);
}

TEST(CondGaussian, TranslationEquivariantDraws) {
  const CondGaussianSpec spec;
  const auto a = gen_conditional_gaussian(spec, {0, 0}, 50, 4);
  const auto b = gen_conditional_gaussian(spec, {-2, 2}, 50, 4);
  for (std::size_t j = 0; j < 50; ++j) {
    EXPECT_NEAR(b.x(0, j) - a.x(0, j), -2.0, 1e-12);
    EXPECT_NEAR(b.x(1, j) - a.x(1, j), 2.0, 1e-12);
  }
}

TEST(CondGaussian, Toy2Dataset) {
  const CondGaussianSpec spec;
  const auto d = toy2_dataset(spec, 10, 1);
  EXPECT_EQ(d.size(), 50u);
  EXPECT_EQ(d.c(0, 10), 2.0);
  EXPECT_EQ(d.c(1, 49), -2.0);
}

TEST(CondGaussian, KlOfTrueModelIsZero) {
  const CondGaussianSpec spec;
  StubModel truth{2, 2, [&](auto x, auto c) { return iso_gauss(x, c, spec.sigma); }};
  for (auto c : spec.c_unseen) {
    const auto r = kl_estimate(truth, spec, c, 20000, 3);
    EXPECT_NEAR(r.entropy, gaussian_entropy(0.5), 1e-12);
    EXPECT_LT(std::abs(r.kl), 3 * r.se);
  }
}

TEST(CondGaussian, KlOfWiderModel) {
  // KL(N(0, a^2) || N(0, b^2)) per axis = ln(b/a) + a^2/(2b^2) - 1/2.
  const CondGaussianSpec spec;
  StubModel wide{2, 2, [&](auto x, auto c) { return iso_gauss(x, c, 1.0); }};
  const auto r = kl_estimate(wide, spec, {0, 2}, 20000, 3);
  const double want = 2 * (std::log(2.0) + 0.25 / 2 - 0.5);
  EXPECT_NEAR(r.kl, want, 4 * r.se);
}

TEST(Metrics, EvalNllOfStandardNormal) {
  AffineModel<double> m(AffineConfig{2, 1, 1, 8});
  m.init(1);
  const auto d = gen_grid_gaussians(GridGaussianSpec::for_grid(2), 50, 2);
  double want = 0;
  for (std::size_t j = 0; j < 50; ++j)
    want += (0.5 * (d.x(0, j) * d.x(0, j) + d.x(1, j) * d.x(1, j)) + std::log(2 * kPi)) / 50.0;
  EXPECT_NEAR(eval_nll(m, d).mean, want, 1e-12);
}

// ---------------------------------------------------------------------------
// Density grids

TEST(DensityGrid, StandardNormalIntegratesToOne) {
  AffineModel<double> m(AffineConfig{2, 1, 1, 8});
  m.init(1);
  const std::vector<double> c{0.0};
  const auto g = density_grid(m, c, Bounds{-7, 7, -7, 7}, 200, 150);
  EXPECT_EQ(g.values.size(), 200u * 150u);
  EXPECT_NEAR(g.riemann_sum(), 1.0, 1e-3);
  EXPECT_NEAR(g.mass_where([](double x, double) { return x > 0; }), 0.5, 1e-3);
  // row 0 is the bottom
  EXPECT_NEAR(g.y_at(0), -7 + 7.0 / 150, 1e-12);
  EXPECT_NEAR(g.at(100, 75), 1 / (2 * kPi) * std::exp(-0.5 * (g.x_at(100) * g.x_at(100) + g.y_at(75) * g.y_at(75))),
              1e-12);
}

TEST(DensityGrid, RejectsBadArguments) {
  AffineModel<double> m(AffineConfig{2, 1, 1, 8});
  m.init(1);
  const std::vector<double> c{0.0}, c2{0.0, 1.0};
  EXPECT_THROW(density_grid(m, c, Bounds{1, 0, 0, 1}, 10), ArgumentError);
  EXPECT_THROW(density_grid(m, c, Bounds{}, 0), ArgumentError);
  EXPECT_THROW(density_grid(m, c2, Bounds{}, 10), ArgumentError);
}

// ---------------------------------------------------------------------------
// Toy POM

TEST(Pom, ConditionLayout) {
  const auto c = pom_condition(2, 3.0);
  ASSERT_EQ(c.size(), kPomCondDim);
  EXPECT_EQ(kPomCondDim, 1035u);
  EXPECT_EQ(c.back(), 3.0);
  // history ends at the origin, one unit per step
  EXPECT_EQ(c[kPomGrid * kPomGrid + 2 * kPomHistory - 1], 0.0);
  EXPECT_EQ(c[kPomGrid * kPomGrid + 1], -4.0);
  // road grids differ between scenarios
  EXPECT_NE(pom_road_grid(0), pom_road_grid(1));
  EXPECT_NE(pom_road_grid(1), pom_road_grid(2));
  EXPECT_THROW(pom_road_grid(4), ArgumentError);
}

TEST(Pom, RoadGridMirror) {
  // scenarios 1 and 2 are mirror images about x = 0
  const auto a = pom_road_grid(1), b = pom_road_grid(2);
  for (std::size_t r = 0; r < kPomGrid; ++r)
    for (std::size_t c = 0; c < kPomGrid; ++c) EXPECT_EQ(a[r * kPomGrid + c], b[r * kPomGrid + kPomGrid - 1 - c]);
}

TEST(Pom, DensitySymmetry) {
  for (double dt : {1.0, 2.5, 4.0}) {
    for (double x : {0.3, 1.2, 2.0})
      for (double y : {0.5, 1.0, 1.7}) {
        EXPECT_NEAR(pom_log_density(0, dt, x, y), pom_log_density(0, dt, -x, y), 1e-12);
        EXPECT_NEAR(pom_log_density(3, dt, x, y), pom_log_density(3, dt, -x, y), 1e-12);
        EXPECT_NEAR(pom_log_density(1, dt, x, y), pom_log_density(2, dt, -x, y), 1e-12);
      }
  }
}

TEST(Pom, ZeroHorizonCollapses) {
  const double s = pom_sigma(0.0);
  EXPECT_DOUBLE_EQ(s, 0.05);
  for (std::size_t sc = 0; sc < kPomScenarios; ++sc)
    EXPECT_NEAR(pom_log_density(sc, 0.0, 0.0, 0.0), -std::log(2 * kPi * s * s), 1e-12);
  const std::vector<double> zero{0.0};
  const auto scenes = gen_toy_pom(2000, 1, zero);
  double m = 0;
  for (const auto& sc : scenes) m += std::hypot(sc.target[0], sc.target[1]) / 2000.0;
  // mean radius of N(0, s^2 I) is s sqrt(pi / 2)
  EXPECT_NEAR(m, s * std::sqrt(kPi / 2), 0.003);
}

TEST(Pom, ManeuverMeans) {
  const auto l = pom_mean(Maneuver::kLeft, 3.0);
  const auto r = pom_mean(Maneuver::kRight, 3.0);
  const auto s = pom_mean(Maneuver::kStraight, 3.0);
  EXPECT_DOUBLE_EQ(l[0], -2.0);
  EXPECT_DOUBLE_EQ(r[0], 2.0);
  EXPECT_DOUBLE_EQ(l[1], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 3.0);
  EXPECT_DOUBLE_EQ(pom_mean(Maneuver::kLeft, 0.5)[1], 0.5);
}

TEST(Pom, DensityNormalised) {
  for (std::size_t sc = 0; sc < kPomScenarios; ++sc) {
    StubModel truth{2, kPomCondDim, [&](auto x, auto) { return pom_log_density(sc, 2.0, x[0], x[1]); }};
    const auto c = pom_condition(sc, 2.0);
    const auto g = density_grid(truth, c, Bounds{-3, 3, -1, 4}, 300, 250);
    EXPECT_NEAR(g.riemann_sum(), 1.0, 1e-3) << "scenario " << sc;
  }
}

TEST(Pom, GeneratorFollowsScenarioWeights) {
  const auto scenes = gen_toy_pom(8000, 7);
  std::array<std::array<double, 3>, 4> counts{};
  std::array<double, 4> per{};
  for (const auto& s : scenes) {
    counts[s.scenario][int(s.maneuver)] += 1;
    per[s.scenario] += 1;
    EXPECT_TRUE(s.dt == 1 || s.dt == 2 || s.dt == 3 || s.dt == 4);
  }
  for (std::size_t sc = 0; sc < 4; ++sc) {
    const auto w = pom_maneuver_weights(sc);
    for (int m = 0; m < 3; ++m) {
      const double p = counts[sc][m] / per[sc];
      EXPECT_NEAR(p, w[m], 4 * std::sqrt(0.25 / per[sc]));
    }
  }
}

TEST(Pom, EpisodesShareManeuver) {
  const auto eps = gen_toy_pom_episodes(50, 3);
  ASSERT_EQ(eps.size(), 200u);
  for (std::size_t e = 0; e < 50; ++e)
    for (int t = 0; t < 4; ++t) {
      EXPECT_EQ(eps[4 * e + t].maneuver, eps[4 * e].maneuver);
      EXPECT_EQ(eps[4 * e + t].scenario, eps[4 * e].scenario);
      EXPECT_EQ(eps[4 * e + t].dt, double(t + 1));
    }
  const auto d = pom_dataset(eps);
  EXPECT_EQ(d.c.rows(), kPomCondDim);
  EXPECT_EQ(d.c(kPomCondDim - 1, 3), 4.0);
  EXPECT_EQ(d.x(1, 5), eps[5].target[1]);
}

TEST(Pom, KlOfTrueModelIsZero) {
  StubModel truth{2, kPomCondDim, [](auto x, auto c) {
                    std::size_t sc = 0;
                    for (std::size_t s = 0; s < kPomScenarios; ++s)
                      if (std::equal(c.begin(), c.begin() + kPomGrid * kPomGrid, pom_road_grid(s).begin())) sc = s;
                    return pom_log_density(sc, c.back(), x[0], x[1]);
                  }};
  for (std::size_t sc = 0; sc < kPomScenarios; ++sc) {
    const auto k = pom_kl(truth, sc, 3.0, 2000, 5);
    EXPECT_LT(std::abs(k.mean), 1e-12);
  }
}

TEST(Pom, ExtraNatsOfPerturbationModelIsZero) {
  // Model = the eta kernel around the true point, so its cross-entropy
  // against p' equals H(eta).
  const double eta = 0.1;
  const auto eps = gen_toy_pom_episodes(500, 2);
  Dataset<double> d{pom_dataset(eps).x, pom_dataset(eps).x};
  StubModel kernel{2, 2, [&](auto x, auto c) { return iso_gauss(x, c, eta); }};
  const auto e = extra_nats(kernel, d, eta, 4, 1, 2, 9);
  EXPECT_LT(std::abs(e.mean), 3 * e.se);
  EXPECT_NEAR(eta_entropy_per_dim(eta), 0.5 * std::log(2 * kPi * std::exp(1.0) * 0.01), 1e-15);
  EXPECT_THROW(extra_nats(kernel, d, eta, 3, 1, 2, 9), ArgumentError);
  EXPECT_THROW(extra_nats(kernel, d, 0.0, 4, 1, 2, 9), ArgumentError);
}

TEST(Pom, ExtraNatsOfWiderModel) {
  // Model N(x, b^2) against p' = N(x, eta^2): e = ln(b/eta) + eta^2/(2b^2) - 1/2.
  const double eta = 0.1, b = 0.3;
  const auto eps = gen_toy_pom_episodes(500, 2);
  const auto x = pom_dataset(eps).x;
  Dataset<double> d{x, x};
  StubModel kernel{2, 2, [&](auto xx, auto c) { return iso_gauss(xx, c, b); }};
  const auto e = extra_nats(kernel, d, eta, 4, 1, 2, 9);
  EXPECT_NEAR(e.mean, std::log(b / eta) + eta * eta / (2 * b * b) - 0.5, 4 * e.se);
}

// ---------------------------------------------------------------------------
// Digits

TEST(Idx, RoundTrip) {
  IdxImages im{2, 2, 3, {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255}};
  const auto tmp = std::filesystem::temp_directory_path() / "hcnaf_idx_rt";
  save_idx_images(tmp.string() + "-images", im);
  const std::vector<std::uint8_t> lab{7, 9};
  save_idx_labels(tmp.string() + "-labels", lab);
  const auto back = load_idx_images(tmp.string() + "-images");
  EXPECT_EQ(back.count, 2u);
  EXPECT_EQ(back.cols, 3u);
  EXPECT_EQ(back.pixels, im.pixels);
  EXPECT_EQ(load_idx_labels(tmp.string() + "-labels"), lab);
}

TEST(Idx, ParseErrors) {
  std::vector<std::uint8_t> b{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4};
  EXPECT_NO_THROW(parse_idx_images(b));
  auto bad = b;
  bad[3] = 1;
  EXPECT_THROW(parse_idx_images(bad), FormatError);
  auto shortb = b;
  shortb.pop_back();
  EXPECT_THROW(parse_idx_images(shortb), FormatError);
  auto longb = b;
  longb.push_back(0);
  EXPECT_THROW(parse_idx_images(longb), FormatError);
  EXPECT_THROW(parse_idx_images({0, 0, 8}), FormatError);
  EXPECT_THROW(parse_idx_labels({0, 0, 8, 1, 0, 0, 0, 2, 5}), FormatError);
  EXPECT_THROW(load_idx_images("/nonexistent/hcnaf"), FormatError);
}

TEST(Idx, BundledDigits) {
  const auto im = load_idx_images(data_path("digits8x8-images-idx3-ubyte"));
  const auto lab = load_idx_labels(data_path("digits8x8-labels-idx1-ubyte"));
  EXPECT_EQ(im.count, 1797u);
  EXPECT_EQ(im.rows, 8u);
  EXPECT_EQ(lab.size(), im.count);
  EXPECT_LE(*std::max_element(lab.begin(), lab.end()), 9);
}

TEST(Digits, DownsampleBlocks) {
  IdxImages im{1, 28, 28, std::vector<std::uint8_t>(28 * 28, 0)};
  // 28 -> 8: factor 3 after cropping two rows/cols each side
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 2; c < 5; ++c) im.pixels[r * 28 + c] = 90;
  im.pixels[2 * 28 + 2] = 91;  // block sum 811 -> 90.1 -> 90
  im.pixels[0] = 255;          // cropped away
  const auto d = downsample(im, 8);
  EXPECT_EQ(d.rows, 8u);
  EXPECT_EQ(d.pixels[0], 90);
  EXPECT_EQ(std::accumulate(d.pixels.begin() + 1, d.pixels.end(), 0), 0);
  IdxImages flat{1, 28, 28, std::vector<std::uint8_t>(28 * 28, 37)};
  for (auto v : downsample(flat, 7).pixels) EXPECT_EQ(v, 37);
  EXPECT_EQ(downsample(flat, 28).pixels, flat.pixels);
  EXPECT_THROW(downsample(flat, 29), ArgumentError);
}

TEST(Digits, DequantizeRoundTrip) {
  const std::vector<std::uint8_t> px{0, 1, 17, 128, 254, 255};
  const std::vector<double> noise{0.0, 0.5, 0.25, 0.999, 0.1, 0.999999};
  const auto y = dequantize_logit(px, noise);
  const auto u = logit_to_unit(y);
  for (std::size_t i = 0; i < px.size(); ++i) {
    EXPECT_TRUE(std::isfinite(y[i]));
    EXPECT_NEAR(u[i] * 256 - px[i], noise[i], 1e-10);
  }
  // pixel 0 with zero noise lands on logit(lambda)
  EXPECT_NEAR(y[0], std::log(1e-6 / (1 - 1e-6)), 1e-9);
  EXPECT_THROW(dequantize_logit(px, std::vector<double>(3)), ArgumentError);
  EXPECT_THROW(dequantize_logit(px, std::vector<double>(6, 1.0)), ArgumentError);
}

TEST(Digits, LogJacobianMatchesFiniteDifference) {
  const double lam = 1e-6;
  for (double u : {0.01, 0.3, 0.5, 0.97}) {
    auto logit = [&](double v) {
      const double s = lam + (1 - 2 * lam) * v;
      return std::log(s / (1 - s));
    };
    const double h = 1e-6;
    const double fd = (logit(u + h) - logit(u - h)) / (2 * h);
    const std::vector<double> y{logit(u)};
    EXPECT_NEAR(logit_log_jacobian(y, lam), std::log(fd), 1e-7);
  }
}

TEST(Digits, UniformDensityIsEightBits) {
  // p(u) = 1 on the unit cube means log p(y) = -sum log|dy/du|.
  const std::vector<std::uint8_t> px{3, 200, 77, 0};
  const std::vector<double> noise{0.2, 0.4, 0.6, 0.8};
  const auto y = dequantize_logit(px, noise);
  const double lj = logit_log_jacobian(y);
  EXPECT_NEAR(bits_per_pixel(-lj, lj, 4), 8.0, 1e-12);
  EXPECT_NEAR(bits_per_pixel(-lj + 4 * std::log(2.0), lj, 4), 7.0, 1e-12);
}

TEST(Digits, DatasetOneHot) {
  IdxImages im{3, 2, 2, {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110}};
  const std::vector<std::uint8_t> lab{2, 0, 9};
  const auto a = digits_dataset(im, lab, 10, 1e-6, 4);
  const auto b = digits_dataset(im, lab, 10, 1e-6, 4);
  EXPECT_EQ(vec(a.data.x), vec(b.data.x));
  EXPECT_EQ(a.data.c(2, 0), 1.0);
  EXPECT_EQ(a.data.c(9, 2), 1.0);
  double s = 0;
  for (double v : a.data.c.flat()) s += v;
  EXPECT_EQ(s, 3.0);
  const auto y0 = a.data.x.col(0);
  EXPECT_NEAR(a.log_jacobian[0], logit_log_jacobian(y0), 1e-12);
  const std::vector<std::uint8_t> bad{2, 0, 10};
  EXPECT_THROW(digits_dataset(im, bad, 10, 1e-6, 4), FormatError);
}

TEST(Digits, MixtureUsesUniformPrior) {
  // log p(x | C_i) = -i, so the mixture is logsumexp(-i) - ln 10.
  StubModel m{1, 10, [](auto, auto c) {
                for (std::size_t i = 0; i < c.size(); ++i)
                  if (c[i] == 1.0) return -double(i);
                return 0.0;
              }};
  Matrix<double> x(1, 2, 0.5);
  const auto lp = mixture_log_prob(m, x, 10);
  double s = 0;
  for (int i = 0; i < 10; ++i) s += std::exp(-double(i)) * 0.1;
  EXPECT_NEAR(lp[0], std::log(s), 1e-12);
  EXPECT_NEAR(lp[1], std::log(s), 1e-12);
  EXPECT_THROW(mixture_log_prob(m, x, 9), ArgumentError);
}
