#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hcnaf/flow.hpp"
#include "test_util.hpp"

using hcnaf::CondAFConfig;
using hcnaf::FlowLayout;
using hcnaf::FlowParams;
using hcnaf::Matrix;
using testutil::random_flow_params;

namespace {

FlowLayout make_layout(std::size_t D, std::size_t L, std::size_t H) {
  return FlowLayout(CondAFConfig{D, L, H, hcnaf::Activation::kTanh});
}

std::vector<double> random_point(std::size_t D, std::mt19937_64& rng, double lo = -3, double hi = 3) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> x(D);
  for (auto& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST(FlowLayout, CountsMatchClosedForm) {
  for (std::size_t D : {1, 2, 3, 5}) {
    for (std::size_t L : {1, 2, 3}) {
      for (std::size_t H : {1, 4, 7}) {
        const auto layout = make_layout(D, L, H);
        EXPECT_EQ(layout.full_weights(), D * D * H * (2 + (L - 1) * H));
        EXPECT_EQ(layout.biases(), D * (H * L + 1));
        // Lower triangle plus diagonal blocks only.
        std::size_t stored = 0;
        for (std::size_t k = 0; k <= L; ++k) {
          const std::size_t in = k == 0 ? 1 : H, out = k == L ? 1 : H;
          stored += D * (D + 1) / 2 * in * out;
        }
        EXPECT_EQ(layout.stored_weights(), stored);
      }
    }
  }
}

TEST(FlowLayout, RejectsZeroSizes) {
  EXPECT_THROW(make_layout(0, 1, 1), hcnaf::ArgumentError);
  EXPECT_THROW(make_layout(2, 0, 1), hcnaf::ArgumentError);
  EXPECT_THROW(make_layout(2, 1, 0), hcnaf::ArgumentError);
}

TEST(FlowParams, MaskAndPositivityHoldForRandomParams) {
  std::mt19937_64 rng(3);
  const auto layout = make_layout(4, 2, 3);
  const auto p = random_flow_params(layout, rng, 0.0, 3.0);
  EXPECT_NO_THROW(p.check_invariants(layout));
  for (std::size_t k = 0; k < layout.num_layers(); ++k) {
    const auto& l = layout.layer(k);
    const auto w = p.materialize(layout, k);
    for (std::size_t row = 0; row < l.rows; ++row)
      for (std::size_t col = 0; col < l.cols; ++col) {
        const std::size_t d = row / l.out_width, r = col / l.in_width;
        if (r > d) {
          EXPECT_EQ(w(row, col), 0.0);
        } else if (r == d) {
          EXPECT_GT(w(row, col), 0.0);
        }
      }
  }
}

TEST(FlowParams, CheckInvariantsRejectsNonFinite) {
  const auto layout = make_layout(2, 1, 2);
  auto p = FlowParams<double>::identity_like(layout);
  p.biases[1] = std::nan("");
  EXPECT_THROW(p.check_invariants(layout), hcnaf::NumericError);
  FlowParams<double> wrong(make_layout(3, 1, 2));
  EXPECT_THROW(wrong.check_invariants(layout), hcnaf::ArgumentError);
}

TEST(Forward, ZeroParamsAtOrigin) {
  const auto layout = make_layout(2, 1, 1);
  const FlowParams<double> p(layout);  // every log-diag, offdiag and bias 0
  const auto r = hcnaf::forward<double>(layout, p, std::vector<double>{0, 0});
  EXPECT_EQ(r.z[0], 0.0);
  EXPECT_EQ(r.z[1], 0.0);
  EXPECT_EQ(r.per_dim_logdet[0], 0.0);
  EXPECT_EQ(r.per_dim_logdet[1], 0.0);
  EXPECT_EQ(r.logdet, 0.0);
}

TEST(Forward, ZeroParamsOffOriginMatchesDenseJacobian) {
  const auto layout = make_layout(2, 1, 1);
  const FlowParams<double> p(layout);
  const std::vector<double> x{0.5, -0.3};
  const auto r = hcnaf::forward<double>(layout, p, x);
  EXPECT_NEAR(r.z[0], std::tanh(0.5), 1e-15);
  EXPECT_NEAR(r.z[1], std::tanh(-0.3), 1e-15);
  const double oracle = testutil::log_abs_det(testutil::fd_jacobian(layout, p, x));
  EXPECT_NEAR(r.logdet, oracle, 1e-8);
}

TEST(Forward, LogdetMatchesFiniteDifferenceJacobian) {
  std::mt19937_64 rng(17);
  const auto layout = make_layout(3, 2, 4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_flow_params(layout, rng);
    const auto x = random_point(3, rng, -2, 2);
    const auto r = hcnaf::forward<double>(layout, p, x);
    const double oracle = testutil::log_abs_det(testutil::fd_jacobian(layout, p, x));
    EXPECT_NEAR(r.logdet, oracle, 1e-8) << "trial " << trial;
    double sum = 0;
    for (double v : r.per_dim_logdet) sum += v;
    EXPECT_DOUBLE_EQ(r.logdet, sum);
  }
}

TEST(Forward, LogdetRelativeErrorUpToFiveDims) {
  std::mt19937_64 rng(29);
  for (std::size_t D = 1; D <= 5; ++D) {
    for (std::size_t L : {1, 3}) {
      const auto layout = make_layout(D, L, 3);
      const auto p = random_flow_params(layout, rng);
      const auto x = random_point(D, rng, -1.5, 1.5);
      const auto r = hcnaf::forward<double>(layout, p, x);
      const double oracle = testutil::log_abs_det(testutil::fd_jacobian(layout, p, x));
      EXPECT_LE(std::abs(r.logdet - oracle), 1e-6 * std::max(1.0, std::abs(oracle)));
    }
  }
}

TEST(Forward, JacobianIsLowerTriangularWithPositiveDiagonal) {
  std::mt19937_64 rng(41);
  const auto layout = make_layout(4, 2, 3);
  const auto p = random_flow_params(layout, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_point(4, rng);
    const auto base = hcnaf::forward<double>(layout, p, x).z;
    for (std::size_t j = 0; j < 4; ++j) {
      auto xp = x;
      xp[j] += 0.37;
      const auto moved = hcnaf::forward<double>(layout, p, xp).z;
      for (std::size_t d = 0; d < j; ++d) EXPECT_LT(std::abs(moved[d] - base[d]), 1e-12);
      EXPECT_GT(moved[j], base[j]);
    }
  }
}

TEST(Forward, MonotoneInOwnCoordinate) {
  std::mt19937_64 rng(43);
  const auto layout = make_layout(3, 2, 5);
  const auto p = random_flow_params(layout, rng, 0.0, 2.0);
  for (std::size_t d = 0; d < 3; ++d) {
    auto x = random_point(3, rng);
    double prev = -1e300;
    for (int i = 0; i <= 400; ++i) {
      x[d] = -8.0 + 16.0 * i / 400.0;
      const double z = hcnaf::forward<double>(layout, p, x).z[d];
      EXPECT_GT(z, prev);
      prev = z;
    }
  }
}

TEST(Forward, OverflowReportsLayer) {
  const auto layout = make_layout(2, 2, 2);
  auto p = FlowParams<double>::identity_like(layout);
  const auto& l2 = layout.layer(1);
  p.weights[l2.diag_offset] = 800.0;  // exp overflows in layer 2
  try {
    hcnaf::forward<double>(layout, p, std::vector<double>{0.5, 0.5});
    FAIL() << "expected NumericError";
  } catch (const hcnaf::NumericError& e) {
    EXPECT_EQ(e.layer(), 2);
  }
  const std::vector<double> bad{std::nan(""), 0.0};
  EXPECT_THROW(hcnaf::forward<double>(layout, FlowParams<double>::identity_like(layout), bad),
               hcnaf::NumericError);
  EXPECT_THROW(hcnaf::forward<double>(layout, p, std::vector<double>{1.0}), hcnaf::ArgumentError);
}

TEST(Forward, LargeInputsKeepFiniteLogdet) {
  const auto layout = make_layout(1, 2, 3);
  const auto p = FlowParams<double>::identity_like(layout);
  const auto r = hcnaf::forward<double>(layout, p, std::vector<double>{50.0});
  EXPECT_TRUE(std::isfinite(r.logdet));
  EXPECT_LT(r.logdet, -50.0);
}

TEST(LogProb, IdentityLikeAtOrigin) {
  const auto layout = make_layout(2, 1, 1);
  const auto p = FlowParams<double>::identity_like(layout);
  EXPECT_NEAR(hcnaf::log_prob<double>(layout, p, std::vector<double>{0, 0}), -std::log(2 * M_PI), 1e-15);
}

TEST(LogProb, OneDimClosedForm) {
  // z = w3 tanh(w2 tanh(w1 x + b1) + b2) + b3 with scalar weights.
  std::mt19937_64 rng(7);
  const auto layout = make_layout(1, 2, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_flow_params(layout, rng, std::log(4.0), 1.0);
    const double w1 = std::exp(p.weights[layout.layer(0).diag_offset]);
    const double w2 = std::exp(p.weights[layout.layer(1).diag_offset]);
    const double w3 = std::exp(p.weights[layout.layer(2).diag_offset]);
    const double b1 = p.biases[0], b2 = p.biases[1], b3 = p.biases[2];
    const double x = std::uniform_real_distribution<double>(-3, 3)(rng);
    const double a1 = w1 * x + b1, h1 = std::tanh(a1);
    const double a2 = w2 * h1 + b2, h2 = std::tanh(a2);
    const double z = w3 * h2 + b3;
    const double dz = w3 * (1 - h2 * h2) * w2 * (1 - h1 * h1) * w1;
    const double expected = -0.5 * z * z - 0.5 * std::log(2 * M_PI) + std::log(dz);
    EXPECT_NEAR(hcnaf::log_prob<double>(layout, p, std::vector<double>{x}), expected, 1e-8);
  }
}

TEST(LogProb, IntegratesToAttainableMass) {
  // The flow maps R^2 onto a bounded box, so the density integrates to the
  // N(0, I) mass of that box. With an output scale of ~6 that is 1 - O(1e-8).
  std::mt19937_64 rng(101);
  const auto layout = make_layout(2, 2, 4);
  const auto p = random_flow_params(layout, rng, std::log(6.0), 0.3);
  const int n = 400;
  const double lo = -6, hi = 6, h = (hi - lo) / (n - 1);
  Matrix<double> pts(2, std::size_t(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      pts(0, i * n + j) = lo + h * i;
      pts(1, i * n + j) = lo + h * j;
    }
  const auto lp = hcnaf::log_prob_batch(layout, p, pts);
  double mass = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double wi = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      const double wj = (j == 0 || j == n - 1) ? 0.5 : 1.0;
      mass += wi * wj * std::exp(lp[i * n + j]);
    }
  mass *= h * h;
  EXPECT_NEAR(mass, 1.0, 0.02);
}

TEST(LogProb, BatchMatchesSingle) {
  std::mt19937_64 rng(5);
  const auto layout = make_layout(3, 2, 3);
  const auto p = random_flow_params(layout, rng);
  const auto x = testutil::random_matrix(3, 17, rng, -2, 2);
  const auto batch = hcnaf::log_prob_batch(layout, p, x);
  for (std::size_t j = 0; j < 17; ++j) {
    const std::vector<double> col{x(0, j), x(1, j), x(2, j)};
    EXPECT_NEAR(batch[j], hcnaf::log_prob<double>(layout, p, col), 1e-13);
  }
}

TEST(Invert, IdentityLikeOrigin) {
  const auto layout = make_layout(2, 1, 1);
  const auto p = FlowParams<double>::identity_like(layout);
  const auto x = hcnaf::invert<double>(layout, p, std::vector<double>{0, 0});
  EXPECT_NEAR(x[0], 0.0, 1e-12);
  EXPECT_NEAR(x[1], 0.0, 1e-12);
}

TEST(Invert, RoundTrip) {
  std::mt19937_64 rng(13);
  for (std::size_t D : {1, 2, 3, 5}) {
    const auto layout = make_layout(D, 2, 4);
    const auto p = random_flow_params(layout, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_point(D, rng);
      const auto z = hcnaf::forward<double>(layout, p, x).z;
      const auto back = hcnaf::invert<double>(layout, p, z);
      const auto z2 = hcnaf::forward<double>(layout, p, back).z;
      for (std::size_t d = 0; d < D; ++d) {
        EXPECT_NEAR(back[d], x[d], 1e-6);
        EXPECT_LT(std::abs(z2[d] - z[d]), 1e-8);
      }
    }
  }
}

TEST(Invert, OutOfRangeNamesDimension) {
  const auto layout = make_layout(2, 1, 1);
  const auto p = FlowParams<double>::identity_like(layout);  // z_d = tanh(x_d) in (-1, 1)
  try {
    hcnaf::invert<double>(layout, p, std::vector<double>{0.2, 1.5});
    FAIL() << "expected RangeError";
  } catch (const hcnaf::RangeError& e) {
    EXPECT_EQ(e.dim(), 1u);
  }
  try {
    hcnaf::invert<double>(layout, p, std::vector<double>{-3.0, 0.0});
    FAIL() << "expected RangeError";
  } catch (const hcnaf::RangeError& e) {
    EXPECT_EQ(e.dim(), 0u);
  }
}

TEST(Invert, BatchReportsPerColumnFailures) {
  const auto layout = make_layout(2, 1, 1);
  const auto p = FlowParams<double>::identity_like(layout);
  Matrix<double> z{{0.5, 2.0, 0.1}, {0.0, 0.0, -1.2}};
  Matrix<double> x;
  const auto status = hcnaf::invert_batch(layout, p, z, x);
  EXPECT_EQ(status.failed_dim[0], -1);
  EXPECT_EQ(status.failed_dim[1], 0);
  EXPECT_EQ(status.failed_dim[2], 1);
  EXPECT_NEAR(x(0, 0), std::atanh(0.5), 1e-9);
}

TEST(Sample, WideRangeFlowIsSymmetricAndDeterministic) {
  // z_d = 8 tanh(x_d): attainable range covers N(0, 1) and x is symmetric.
  const auto layout = make_layout(2, 1, 1);
  auto p = FlowParams<double>::identity_like(layout);
  const auto& out = layout.layer(1);
  for (std::size_t i = 0; i < out.diag_count(2); ++i) p.weights[out.diag_offset + i] = std::log(8.0);
  const std::size_t n = 4000;
  const auto a = hcnaf::sample(layout, p, n, 99);
  const auto b = hcnaf::sample(layout, p, n, 99);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.log_prob, b.log_prob);
  EXPECT_EQ(a.rejected, 0u);
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += a.x(d, j);
    mean /= double(n);
    EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(double(n)));
  }
  for (std::size_t j = 0; j < n; ++j) {
    const std::vector<double> col{a.x(0, j), a.x(1, j)};
    EXPECT_NEAR(a.log_prob[j], hcnaf::log_prob<double>(layout, p, col), 1e-12);
  }
  const auto c = hcnaf::sample(layout, p, n, 100);
  EXPECT_NE(a.x, c.x);
}

TEST(Sample, SaturatedFlowRaises) {
  // z_d = tanh(x_d): only ~47% of 2-D standard normal draws land in (-1, 1)^2.
  const auto layout = make_layout(2, 1, 1);
  const auto p = FlowParams<double>::identity_like(layout);
  EXPECT_THROW(hcnaf::sample(layout, p, 500, 1), hcnaf::SaturationError);
}

TEST(Sample, CountsRejectionsAndRedraws) {
  // z = 2.5 tanh(x) in 1-D rejects ~1.2% of draws.
  const auto layout = make_layout(1, 1, 1);
  auto p = FlowParams<double>::identity_like(layout);
  p.weights[layout.layer(1).diag_offset] = std::log(2.5);
  const auto s = hcnaf::sample(layout, p, 5000, 8);
  EXPECT_EQ(s.x.cols(), 5000u);
  EXPECT_GT(s.rejected, 20u);
  EXPECT_LT(s.rejected, 150u);
  EXPECT_THROW(hcnaf::sample(layout, p, 0, 8), hcnaf::ArgumentError);
}

TEST(Affine, Identity) {
  const std::vector<double> mu{0, 0}, ls{0, 0}, x{0.7, -1.1};
  const auto r = hcnaf::affine_forward<double>(mu, ls, x);
  EXPECT_EQ(r.z, x);
  EXPECT_EQ(r.logdet, 0.0);
}

TEST(Affine, ClosedForm) {
  const std::vector<double> mu{1, 1}, ls{std::log(2.0), std::log(2.0)}, x{1, 1};
  const auto r = hcnaf::affine_forward<double>(mu, ls, x);
  EXPECT_EQ(r.z[0], 0.0);
  EXPECT_EQ(r.z[1], 0.0);
  EXPECT_NEAR(r.logdet, -2 * std::log(2.0), 1e-15);
}

TEST(Affine, MatchesDiagonalGaussian) {
  std::mt19937_64 rng(71);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> mu(3), ls(3), x(3);
    double expected = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      mu[d] = u(rng);
      ls[d] = 0.5 * u(rng);
      x[d] = u(rng);
      expected += testutil::gaussian_logpdf(x[d], mu[d], std::exp(ls[d]));
    }
    const auto r = hcnaf::affine_forward<double>(mu, ls, x);
    double lp = r.logdet;
    for (double z : r.z) lp += -0.5 * z * z - 0.5 * std::log(2 * M_PI);
    EXPECT_NEAR(lp, expected, 1e-12);
  }
}

TEST(Affine, RejectsBadInput) {
  const std::vector<double> mu{0}, ls{0}, bad{std::numeric_limits<double>::infinity()};
  EXPECT_THROW(hcnaf::affine_forward<double>(mu, ls, bad), hcnaf::NumericError);
  EXPECT_THROW(hcnaf::affine_forward<double>(mu, ls, std::vector<double>{1, 2}), hcnaf::ArgumentError);
}
