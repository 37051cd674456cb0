#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles/oracle_values.hpp"
#include "vmddpm/diffusion.hpp"
#include "vmddpm/errors.hpp"

using namespace vmddpm;
using namespace vmddpm::diffusion;

namespace {

struct Moments {
  double mean = 0, var = 0;
};

Moments moments(const Tensor& x) {
  Moments m;
  for (double v : x.values()) m.mean += v;
  m.mean /= double(x.size());
  for (double v : x.values()) m.var += (v - m.mean) * (v - m.mean);
  m.var /= double(x.size() - 1);
  return m;
}

/// Exact noise predictor for a dataset holding the single image x0.
EpsilonModel point_oracle(const Tensor& x0, const NoiseSchedule& s) {
  return [x0, &s](const Tensor& x_t, std::size_t t) {
    Tensor eps(x_t.shape());
    const double a = std::sqrt(s.alpha_bar_at(t)), b = std::sqrt(1 - s.alpha_bar_at(t));
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (x_t[i] - a * x0[i]) / b;
    return eps;
  };
}

Tensor point_image() {
  Tensor x0({1, 4, 4});
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = std::sin(double(i)) * 0.9;
  return x0;
}

double mad(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

}  // namespace

TEST(Schedule, SmallHandCases) {
  auto s = make_schedule(1, 0.5, 0.5);
  EXPECT_EQ(s.beta, std::vector<double>{0.5});
  EXPECT_EQ(s.alpha_bar, std::vector<double>{0.5});
  s = make_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1], oracle::kAlphaBarT2, 1e-15);
  EXPECT_EQ(s.alpha_bar_at(0), 1.0);
}

TEST(Schedule, StandardLinearSchedule) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  EXPECT_NEAR(s.alpha_bar.back(), oracle::kAlphaBarT1000, 1e-15);
  for (std::size_t t = 1; t <= s.T; ++t) {
    for (double v : {s.beta_at(t), s.alpha_at(t), s.alpha_bar_at(t), s.sqrt_alpha_bar[t - 1],
                     s.sqrt_one_minus_alpha_bar[t - 1]}) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    // The first reverse step has nothing left to be uncertain about.
    if (t == 1) EXPECT_EQ(s.posterior_variance_at(t), 0.0);
    else EXPECT_GT(s.posterior_variance_at(t), 0.0);
    EXPECT_LE(s.posterior_variance_at(t), s.beta_at(t));
    if (t > 1) {
      EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
      const double snr = s.alpha_bar_at(t) / (1 - s.alpha_bar_at(t));
      const double snr_prev = s.alpha_bar_at(t - 1) / (1 - s.alpha_bar_at(t - 1));
      EXPECT_LT(snr, snr_prev);
    }
  }
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST(SamplerConfig, ParsingAndValidation) {
  EXPECT_EQ(parse_sampler_kind("ddim"), SamplerKind::Ddim);
  EXPECT_EQ(parse_variance_mode(to_string(VarianceMode::FixedPosterior)), VarianceMode::FixedPosterior);
  EXPECT_THROW(parse_sampler_kind("euler"), ConfigError);
  const auto s = make_schedule(100, 1e-4, 0.02);
  SamplerConfig c;
  c.kind = SamplerKind::Ddim;
  c.ddim_steps = 101;
  EXPECT_THROW(c.validate(s), ConfigError);
  c.ddim_steps = 10;
  c.eta = 1.5;
  EXPECT_THROW(c.validate(s), ConfigError);
}

TEST(QSample, NoiselessAndScalarCases) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const Tensor x0 = point_image();
  const Tensor x = q_sample(x0, 500, Tensor(x0.shape()), s);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], std::sqrt(s.alpha_bar_at(500)) * x0[i]);
  const auto s1 = make_schedule(1, 0.5, 0.5);
  EXPECT_NEAR(q_sample(Tensor({1}, 1.0), 1, Tensor({1}, 1.0), s1)[0], oracle::kQSampleT1, 1e-15);
  EXPECT_THROW(q_sample(x0, 0, x0, s), DomainError);
  EXPECT_THROW(q_sample(x0, 1001, x0, s), DomainError);
}

TEST(QSample, MonteCarloMoments) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(1);
  const double x0 = 0.8;
  // At large t the mean shrinks below what 1e6 draws can resolve to 1%.
  for (std::size_t t : {10, 100, 250}) {
    const Tensor eps = normal_tensor({1000000}, rng);
    const auto m = moments(q_sample(Tensor({1000000}, x0), t, eps, s));
    EXPECT_LT(std::abs(m.mean - std::sqrt(s.alpha_bar_at(t)) * x0), 0.01 * std::sqrt(s.alpha_bar_at(t)) * x0);
    EXPECT_LT(std::abs(m.var - (1 - s.alpha_bar_at(t))), 0.02 * (1 - s.alpha_bar_at(t)));
  }
}

TEST(QStep, IteratedStepsMatchClosedFormMarginal) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(2);
  const double x0 = -0.6;
  const std::size_t t = 200;
  Tensor x({100000}, x0);
  for (std::size_t k = 1; k <= t; ++k) x = q_step(x, k, s, rng);
  const auto iterated = moments(x);
  const auto closed = moments(q_sample(Tensor({100000}, x0), t, normal_tensor({100000}, rng), s));
  EXPECT_LT(std::abs(iterated.mean - closed.mean), 0.02 * std::abs(closed.mean));
  EXPECT_LT(std::abs(iterated.var - closed.var), 0.02 * closed.var);
}

TEST(Loss, OracleAndZeroPredictors) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(3);
  std::vector<Tensor> x0s, eps;
  std::vector<std::size_t> ts;
  for (int i = 0; i < 64; ++i) {
    x0s.push_back(point_image());
    eps.push_back(normal_tensor({1, 4, 4}, rng));
    ts.push_back(1 + rng() % 1000);
  }
  const double exact = loss_simple(point_oracle(point_image(), s), x0s, ts, eps, s);
  EXPECT_NEAR(exact, 0.0, 1e-18);
  const double zero = loss_simple([](const Tensor& x, std::size_t) { return Tensor(x.shape()); }, x0s, ts, eps, s);
  EXPECT_NEAR(zero, 1.0, 0.15);
  EXPECT_GE(zero, 0.0);
  EXPECT_THROW(loss_simple(point_oracle(point_image(), s), x0s, {1}, eps, s), ShapeError);
}

TEST(PSample, FinalStepIsDeterministicMean) {
  const auto s1 = make_schedule(1, 0.5, 0.5);
  Rng rng(4);
  const auto zero = [](const Tensor& x, std::size_t) { return Tensor(x.shape()); };
  const Tensor x0 = p_sample_step(zero, Tensor({1}, 1.0), 1, s1, VarianceMode::FixedBeta, rng);
  EXPECT_NEAR(x0[0], oracle::kPosteriorMeanT1, 1e-15);
  EXPECT_EQ(rng, Rng(4));

  const auto s = make_schedule(1000, 1e-4, 0.02);
  Rng a(1), b(2);
  const Tensor x = point_image();
  EXPECT_EQ(p_sample_step(zero, x, 1, s, VarianceMode::FixedPosterior, a),
            p_sample_step(zero, x, 1, s, VarianceMode::FixedPosterior, b));
}

TEST(ClipX0, InRangeEstimateLeavesStepsUnchanged) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const Tensor x0 = point_image();
  const auto model = point_oracle(x0, s);
  Rng noise(3);
  for (std::size_t t : {1, 2, 40, 500, 1000}) {
    const Tensor x_t = q_sample(x0, t, normal_tensor(x0.shape(), noise), s);
    Rng a(9), b(9);
    EXPECT_LT(max_abs_diff(p_sample_step(model, x_t, t, s, VarianceMode::FixedBeta, a),
                           p_sample_step(model, x_t, t, s, VarianceMode::FixedBeta, b, true)),
              1e-12)
        << t;
    Rng c(9), d(9);
    EXPECT_LT(max_abs_diff(ddim_step(model, x_t, t, t / 2, s, 0.5, c), ddim_step(model, x_t, t, t / 2, s, 0.5, d, true)),
              1e-12)
        << t;
  }
}

TEST(ClipX0, OutOfRangeEstimateIsClamped) {
  const auto s1 = make_schedule(1, 0.5, 0.5);
  const auto zero = [](const Tensor& x, std::size_t) { return Tensor(x.shape()); };
  Rng rng(4);
  // the unclipped final mean is sqrt(2); the clamped x0 estimate is 1
  EXPECT_EQ(p_sample_step(zero, Tensor({1}, 1.0), 1, s1, VarianceMode::FixedBeta, rng, true)[0], 1.0);
  EXPECT_EQ(ddim_step(zero, Tensor({1}, -1.0), 1, 0, s1, 0.0, rng, true)[0], -1.0);
}

TEST(Ddim, TimestepGrid) {
  EXPECT_EQ(ddim_timesteps(1000, 4), (std::vector<std::size_t>{751, 501, 251, 1}));
  const auto full = ddim_timesteps(10, 10);
  EXPECT_EQ(full.front(), 10u);
  EXPECT_EQ(full.back(), 1u);
  EXPECT_THROW(ddim_timesteps(10, 11), ConfigError);
  const auto s = make_schedule(10, 1e-4, 0.02);
  Rng rng(1);
  EXPECT_THROW(ddim_step(point_oracle(point_image(), s), point_image(), 5, 5, s, 0.0, rng), DomainError);
}

TEST(Ddim, OracleRecoversPointExactlyAtEveryStep) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const Tensor x0 = point_image();
  const auto model = point_oracle(x0, s);
  Rng rng(5);
  for (std::size_t steps : {1, 7, 50}) {
    Tensor x = normal_tensor(x0.shape(), rng);
    const auto ts = ddim_timesteps(s.T, steps);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const std::size_t t = ts[k];
      const Tensor eps = model(x, t);
      Tensor x0_hat(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        x0_hat[i] = (x[i] - std::sqrt(1 - s.alpha_bar_at(t)) * eps[i]) / std::sqrt(s.alpha_bar_at(t));
      }
      EXPECT_LT(max_abs_diff(x0_hat, x0), 1e-9);
      x = ddim_step(model, x, t, k + 1 < ts.size() ? ts[k + 1] : 0, s, 0.0, rng);
    }
    EXPECT_LT(max_abs_diff(x, x0), 1e-9);
  }
}

TEST(Sampler, OracleChainsRecoverThePoint) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const Tensor x0 = point_image();
  const auto model = point_oracle(x0, s);
  for (auto kind : {SamplerKind::Ddpm, SamplerKind::Ddim}) {
    for (auto mode : {VarianceMode::FixedBeta, VarianceMode::FixedPosterior}) {
      SamplerConfig c;
      c.kind = kind;
      c.variance_mode = mode;
      Rng rng(6);
      for (const Tensor& x : sample(model, 8, x0.shape(), c, s, rng)) EXPECT_LT(mad(x, x0), 0.05);
    }
  }
}

TEST(Sampler, DdimEtaZeroIsBitwiseDeterministic) {
  const auto s = make_schedule(100, 1e-4, 0.02);
  const Tensor x0 = point_image();
  // A predictor that is not the oracle, so the chain actually moves.
  const EpsilonModel model = [](const Tensor& x, std::size_t t) {
    Tensor e = x;
    for (double& v : e.values()) v = std::tanh(v * 0.3 + double(t) * 1e-3);
    return e;
  };
  SamplerConfig c;
  c.kind = SamplerKind::Ddim;
  c.ddim_steps = 20;
  Rng a(7), b(7);
  EXPECT_EQ(sample(model, 3, x0.shape(), c, s, a), sample(model, 3, x0.shape(), c, s, b));
  // eta = 0 draws only x_T.
  Rng c1(7), c2(7);
  sample(model, 3, x0.shape(), c, s, c1);
  for (int i = 0; i < 3; ++i) normal_tensor(x0.shape(), c2);
  EXPECT_EQ(c1, c2);
}

TEST(Sampler, EmptyRequestMakesNoModelCalls) {
  const auto s = make_schedule(10, 1e-4, 0.02);
  int calls = 0;
  const EpsilonModel model = [&](const Tensor& x, std::size_t) {
    ++calls;
    return Tensor(x.shape());
  };
  Rng rng(8);
  EXPECT_TRUE(sample(model, 0, {1, 2, 2}, SamplerConfig{}, s, rng).empty());
  EXPECT_EQ(calls, 0);
}

TEST(Sampler, SameSeedSameBatch) {
  const auto s = make_schedule(50, 1e-4, 0.02);
  const EpsilonModel model = [](const Tensor& x, std::size_t) {
    Tensor e = x;
    for (double& v : e.values()) v *= 0.5;
    return e;
  };
  Rng a(9), b(9);
  const auto xa = sample(model, 4, {1, 3, 3}, SamplerConfig{}, s, a);
  EXPECT_EQ(xa, sample(model, 4, {1, 3, 3}, SamplerConfig{}, s, b));
  for (const auto& x : xa) {
    for (double v : x.values()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Ddim, EtaOneSingleStepMatchesAncestralStep) {
  const auto s = make_schedule(1000, 1e-4, 0.02);
  const EpsilonModel model = [](const Tensor& x, std::size_t) {
    Tensor e = x;
    for (double& v : e.values()) v = 0.3 * v + 0.1;
    return e;
  };
  Rng rng(10);
  for (std::size_t t : {2, 40, 600}) {
    const Tensor x_t({10000}, 0.4);
    const auto ddim = moments(ddim_step(model, x_t, t, t - 1, s, 1.0, rng));
    const auto ddpm = moments(p_sample_step(model, x_t, t, s, VarianceMode::FixedPosterior, rng));
    EXPECT_NEAR(ddim.mean, ddpm.mean, 0.02 * std::abs(ddpm.mean));
    EXPECT_NEAR(ddim.var, ddpm.var, 0.02 * ddpm.var + 1e-3 * std::sqrt(ddpm.var));
  }
}

TEST(Ddim, EtaOneFullChainMatchesAncestralMoments) {
  const auto s = make_schedule(100, 1e-4, 0.05);
  const EpsilonModel model = [](const Tensor& x, std::size_t) {
    Tensor e = x;
    for (double& v : e.values()) v = 0.2 * v;
    return e;
  };
  SamplerConfig ddim;
  ddim.kind = SamplerKind::Ddim;
  ddim.ddim_steps = 100;
  ddim.eta = 1.0;
  SamplerConfig ddpm;
  ddpm.variance_mode = VarianceMode::FixedPosterior;
  Rng a(11), b(12);
  // One image of 10^4 pixels acts as 10^4 independent scalar chains. Both
  // samplers clamp the same way, so the clamped moments stay comparable.
  auto pooled = [](const std::vector<Tensor>& xs) {
    Tensor all({xs.size() * xs[0].size()});
    std::size_t k = 0;
    for (const auto& x : xs) {
      for (double v : x.values()) all[k++] = v;
    }
    return moments(all);
  };
  const auto m1 = pooled(sample(model, 1, {1, 100, 100}, ddim, s, a));
  const auto m2 = pooled(sample(model, 1, {1, 100, 100}, ddpm, s, b));
  EXPECT_NEAR(m1.mean, m2.mean, 0.02);
  EXPECT_NEAR(m1.var, m2.var, 0.02 * m2.var);
}
