#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "oracles/oracle_values.hpp"
#include "test_support.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/scalar_math.hpp"
#include "vmddpm/ssm_core.hpp"

using namespace vmddpm;
using namespace vmddpm::ssm;
using testing_support::grad_check;
using testing_support::project;

namespace {

ContinuousSsmParams scalar_system(double a, double b, double c = 1.0, double d = 0.0) {
  return {Tensor({1, 1}, a), Tensor({1, 1}, b), Tensor({1, 1}, c), Tensor({1}, d)};
}

/// Discrete params with A_bar, B_bar given directly (one channel, one state).
DiscreteSsmParams direct(double abar, double bbar, double c, double d) {
  DiscreteSsmParams p;
  p.A_bar = Tensor({1, 1, 1}, abar);
  p.B_bar = Tensor({1, 1, 1}, bbar);
  p.C = Tensor({1, 1}, c);
  p.D = Tensor({1}, d);
  p.delta = Tensor({1, 1}, 1.0);
  return p;
}

DiscreteSsmParams random_invariant(std::size_t ch, std::size_t n, Rng& rng) {
  ContinuousSsmParams p;
  p.A = uniform_tensor({ch, n}, -3.0, -0.05, rng);
  p.B = normal_tensor({1, n}, rng);
  p.C = normal_tensor({1, n}, rng);
  p.D = normal_tensor({ch}, rng);
  return discretize(p, uniform_tensor({1, ch}, 0.01, 1.0, rng));
}

double rel_l2(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

TEST(Discretize, ClosedFormCases) {
  auto d = discretize(scalar_system(-1.0, 1.0), Tensor({1, 1}, std::log(2.0)));
  EXPECT_NEAR(d.A_bar[0], oracle::kZohAbarLn2, 1e-10);
  EXPECT_NEAR(d.B_bar[0], oracle::kZohBbarLn2, 1e-10);
  d = discretize(scalar_system(-2.0, 3.0), Tensor({1, 1}, 1.0));
  EXPECT_NEAR(d.A_bar[0], oracle::kZohAbarA2, 1e-14);
  EXPECT_NEAR(d.B_bar[0], oracle::kZohBbarA2, 1e-14);
}

TEST(Discretize, SmallStepLimit) {
  auto d = discretize(scalar_system(-1.0, 1.0), Tensor({1, 1}, 1e-9));
  EXPECT_NEAR(d.A_bar[0], 1.0, 1e-8);
  EXPECT_NEAR(d.B_bar[0], 1e-9, 1e-17);

  const double dt = 1e-6;
  for (double a : {-0.5, -2.0, -7.0}) {
    for (double b : {0.3, -4.0}) {
      d = discretize(scalar_system(a, b), Tensor({1, 1}, dt));
      EXPECT_LE(std::abs(d.A_bar[0] - 1.0), std::abs(a) * dt + 1e-10);
      EXPECT_LE(std::abs(d.B_bar[0] - dt * b) / std::abs(dt * b), 1e-5);
    }
  }
}

TEST(Discretize, InputFactorSeriesIsContinuous) {
  for (double x : {-1e-6, -1e-7, 1e-7, -2e-6, -1e-3}) {
    EXPECT_NEAR(zoh_input_factor(x), std::expm1(x) / x, 1e-15);
  }
  EXPECT_EQ(zoh_input_factor(0.0), 1.0);
  for (double x : {-3.0, -0.5, -1e-5, -1e-7}) {
    const double h = 1e-5 * std::max(1.0, std::abs(x));
    const double fd = (zoh_input_factor(x + h) - zoh_input_factor(x - h)) / (2 * h);
    EXPECT_NEAR(zoh_input_factor_derivative(x), fd, 1e-7);
  }
}

TEST(Discretize, RejectsBadStepsAndShapes) {
  EXPECT_THROW(discretize(scalar_system(-1, 1), Tensor({1, 1}, 0.0)), DomainError);
  EXPECT_THROW(discretize(scalar_system(-1, 1), Tensor({1, 1}, -1.0)), DomainError);
  EXPECT_THROW(discretize(scalar_system(-1, 1), Tensor({1, 2}, 1.0)), ShapeError);
}

TEST(SelectiveScan, HandRecurrence) {
  const Tensor y = selective_scan(Tensor({2, 1}, 1.0), direct(0.5, 1.0, 1.0, 0.0));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 1.5);
}

TEST(SelectiveScan, SkipOnlyAndZeroInput) {
  Rng rng(1);
  const Tensor u = normal_tensor({6, 1}, rng);
  EXPECT_EQ(selective_scan(u, direct(0.9, 0.7, 0.0, 1.0)), u);
  const Tensor zero({6, 1});
  EXPECT_EQ(selective_scan(zero, direct(0.9, 0.7, 1.3, 0.4)), zero);
}

TEST(SelectiveScan, LinearInInput) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    // Time-varying parameters: one step per token.
    ContinuousSsmParams p;
    p.A = uniform_tensor({3, 4}, -2.0, -0.1, rng);
    p.B = normal_tensor({9, 4}, rng);
    p.C = normal_tensor({9, 4}, rng);
    p.D = normal_tensor({3}, rng);
    const auto d = discretize(p, uniform_tensor({9, 3}, 0.01, 1.0, rng));
    const Tensor u1 = normal_tensor({9, 3}, rng), u2 = normal_tensor({9, 3}, rng);
    const double a = 1.7, b = -0.6;
    Tensor mix({9, 3});
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * u1[i] + b * u2[i];
    const Tensor y = selective_scan(mix, d), y1 = selective_scan(u1, d), y2 = selective_scan(u2, d);
    Tensor expect({9, 3});
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = a * y1[i] + b * y2[i];
    EXPECT_LT(rel_l2(y, expect), 1e-10);
  }
}

TEST(SelectiveScan, BoundedOverLongSequences) {
  Rng rng(3);
  const std::size_t L = 10000;
  ContinuousSsmParams p;
  p.A = uniform_tensor({2, 4}, -1.0, -0.01, rng);
  p.B = normal_tensor({1, 4}, rng);
  p.C = Tensor({1, 4}, 1.0);
  p.D = Tensor({2});
  const auto d = discretize(p, Tensor({1, 2}, 0.1));
  const Tensor u = uniform_tensor({L, 2}, -1.0, 1.0, rng);
  const Tensor y = selective_scan(u, d);
  double bound = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < 4; ++k) {
      bound += std::abs(d.B_bar.at(0, c, k)) / (1.0 - d.A_bar.at(0, c, k));
    }
  }
  ASSERT_TRUE(y.all_finite());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_LE(std::abs(y[i]), bound);
}

TEST(SelectiveScan, RecurrenceMatchesKernel) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t ch = 1 + rng() % 4, n = 1 + rng() % 8, L = 1 + rng() % 32;
    const auto d = random_invariant(ch, n, rng);
    const Tensor u = normal_tensor({L, ch}, rng);
    const Tensor rec = selective_scan(u, d);
    const Tensor conv = ssm_conv_apply(u, ssm_kernel(d, L), d.D);
    EXPECT_LT(rel_l2(conv, rec), 1e-6) << "trial " << trial;
  }
}

TEST(SelectiveScan, LinearTimeComplexity) {
  Rng rng(5);
  const auto d = random_invariant(4, 8, rng);
  auto time_at = [&](std::size_t L) {
    const Tensor u = normal_tensor({L, 4}, rng);
    double best = 1e9;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor y = selective_scan(u, d);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      EXPECT_TRUE(y.all_finite());
    }
    return best;
  };
  EXPECT_LT(time_at(65536) / time_at(32768), 2.5);
}

TEST(Kernel, GeometricPowers) {
  const Tensor k = ssm_kernel(direct(0.5, 1.0, 1.0, 0.0), 3);
  EXPECT_EQ(k[0], 1.0);
  EXPECT_EQ(k[1], 0.5);
  EXPECT_EQ(k[2], 0.25);
  EXPECT_EQ(ssm_kernel(direct(0.3, 2.0, 1.5, 0.0), 1)[0], 3.0);
  const Tensor zero = ssm_kernel(direct(0.3, 2.0, 0.0, 0.0), 5);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(Kernel, RequiresTimeInvariantParams) {
  ContinuousSsmParams p = scalar_system(-1, 1);
  const auto varying = discretize(p, Tensor({3, 1}, 0.5));
  EXPECT_THROW(ssm_kernel(varying, 3), ContractError);
}

TEST(ConvApply, HandCases) {
  Tensor y = ssm_conv_apply(Tensor({2, 1}, 1.0), Tensor({2, 1}, std::vector<double>{1.0, 0.5}), Tensor({1}));
  EXPECT_EQ(y[0], 1.0);
  EXPECT_EQ(y[1], 1.5);
  const Tensor u({3, 1}, std::vector<double>{2, 0, 0});
  y = ssm_conv_apply(u, Tensor({3, 1}, std::vector<double>{0, 0, 1}), Tensor({1}));
  EXPECT_EQ(y, Tensor({3, 1}, std::vector<double>{0, 0, 2}));
  EXPECT_EQ(ssm_conv_apply(u, Tensor({1, 1}, 1.0), Tensor({1})), u);
}

TEST(FusedScan, MatchesIndependentOracle) {
  auto tensor = [](const Shape& s, const double* v) { return Tensor(s, std::vector<double>(v, v + numel(s))); };
  ag::Tape tape(false);
  const Tensor y = selective_scan_zoh(tape.constant(tensor({3, 2}, oracle::kScanU)),
                                      tape.constant(tensor({3, 2}, oracle::kScanDelta)),
                                      tape.constant(tensor({2, 2}, oracle::kScanA)),
                                      tape.constant(tensor({3, 2}, oracle::kScanB)),
                                      tape.constant(tensor({3, 2}, oracle::kScanC)), tape.constant(tensor({2}, oracle::kScanD)))
                       .value();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(y[i], oracle::kScanY[i], 1e-14 * (1 + std::abs(oracle::kScanY[i])));
}

TEST(FusedScan, MatchesReferenceScan) {
  Rng rng(6);
  const std::size_t L = 12, ch = 3, n = 5;
  const Tensor u = normal_tensor({L, ch}, rng);
  // Mix of tiny and ordinary steps exercises both branches of the hold factor.
  Tensor dt = uniform_tensor({L, ch}, 1e-5, 1.5, rng);
  dt[0] = 1e-9;
  dt[4] = 3e-3;
  const Tensor A = uniform_tensor({ch, n}, -4.0, -0.2, rng);
  const Tensor B = normal_tensor({L, n}, rng), C = normal_tensor({L, n}, rng), D = normal_tensor({ch}, rng);
  ag::Tape tape(false);
  const Tensor fused =
      selective_scan_zoh(tape.constant(u), tape.constant(dt), tape.constant(A), tape.constant(B), tape.constant(C),
                         tape.constant(D))
          .value();
  const Tensor ref = selective_scan(u, discretize({A, B, C, D}, dt));
  EXPECT_LT(max_abs_diff(fused, ref), 1e-13);
}

TEST(FusedScan, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  const std::size_t L = 5, ch = 2, n = 3;
  Tensor dt = uniform_tensor({L, ch}, 0.05, 1.2, rng);
  dt[3] = 2e-3;  // series branch
  const double err = grad_check(
      [](ag::Tape&, const auto& v) { return project(selective_scan_zoh(v[0], v[1], v[2], v[3], v[4], v[5])); },
      {normal_tensor({L, ch}, rng), dt, uniform_tensor({ch, n}, -2.0, -0.3, rng), normal_tensor({L, n}, rng),
       normal_tensor({L, n}, rng), normal_tensor({ch}, rng)},
      1e-6);
  EXPECT_LT(err, 1e-6);
}

TEST(S6, ScalarExample) {
  S6Weights w = zero_s6_weights(1, 1, 1);
  w.in_proj.fill(1.0);
  w.gate_proj.fill(1.0);
  w.delta_proj.fill(1.0);
  w.B_proj.fill(1.0);
  w.C_proj.fill(1.0);
  w.out_proj.fill(1.0);
  const Tensor y = s6_forward(Tensor({1, 1}, 1.0), w);
  EXPECT_NEAR(softplus(1.0), oracle::kS6ScalarDelta, 1e-15);
  EXPECT_NEAR(y[0], oracle::kS6ScalarOutput, 1e-14);
}

TEST(S6, ZeroWeightsGiveZeroOutput) {
  S6Weights w = zero_s6_weights(3, 6, 4);
  Rng rng(8);
  w.out_proj = normal_tensor(w.out_proj.shape(), rng);
  const Tensor y = s6_forward(normal_tensor({7, 3}, rng), w);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(S6, IdentityWeightsAreExact) {
  Rng rng(9);
  for (std::size_t token_dim : {1, 3, 8}) {
    const Tensor x = normal_tensor({11, token_dim}, rng);
    EXPECT_EQ(s6_forward(x, identity_s6_weights(token_dim, 4)), x);
  }
}

TEST(S6, ShapeContract) {
  Rng rng(10);
  const auto w = init_s6_weights(4, 8, 3, rng);
  EXPECT_EQ(s6_forward(normal_tensor({7, 4}, rng), w).shape(), (Shape{7, 4}));
  EXPECT_THROW(s6_forward(normal_tensor({7, 3}, rng), w), ShapeError);
  S6Weights bad = w;
  bad.B_proj = Tensor({3, 5});
  EXPECT_THROW(s6_forward(normal_tensor({7, 4}, rng), bad), ShapeError);
}

TEST(S6, InitialStepSizesInRange) {
  Rng rng(11);
  const auto w = init_s6_weights(4, 16, 3, rng);
  for (double b : w.delta_bias.values()) {
    EXPECT_GE(softplus(b), 1e-3 * (1 - 1e-12));
    EXPECT_LE(softplus(b), 1e-1 * (1 + 1e-12));
  }
  for (std::size_t c = 0; c < 16; ++c) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(-std::exp(w.A_log.at(c, k)), -(double(k) + 1), 1e-12);
  }
}

TEST(S6, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  const auto w = init_s6_weights(2, 2, 2, rng);
  // Every weight tensor and the input take part in the check.
  std::vector<Tensor> inputs{normal_tensor({3, 2}, rng)};
  S6Weights::visit(w, "", [&](const std::string&, const Tensor& t) { inputs.push_back(t); });
  const double err = grad_check(
      [&](ag::Tape&, const std::vector<ag::Var>& v) {
        // Rebuild the block from the variables in visit order.
        ag::Var x = v[0];
        ag::Var z = ag::linear(x, v[2], v[3]);
        ag::Var u = ag::linear(x, v[1]);
        ag::Var dt = ag::softplus(ag::linear(u, v[4], v[5]));
        ag::Var y = selective_scan_zoh(u, dt, ag::neg_exp(v[8]), ag::linear(u, v[6]), ag::linear(u, v[7]), v[9]);
        return project(ag::linear(ag::mul(y, ag::silu(z)), v[10]));
      },
      inputs, 1e-6);
  EXPECT_LT(err, 1e-4);

  // And the library's own composition against the same finite differences.
  const double err2 = grad_check([&](ag::Tape&, const auto& v) { return project(s6_forward(v[0], w)); },
                                 {normal_tensor({3, 2}, rng)}, 1e-6);
  EXPECT_LT(err2, 1e-4);
}
