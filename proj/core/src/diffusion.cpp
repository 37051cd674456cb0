#include "vmddpm/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "vmddpm/errors.hpp"

namespace vmddpm::diffusion {
namespace {

void require_timestep(std::size_t t, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.T) {
    throw DomainError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) + "]");
  }
}

Tensor predict(const EpsilonModel& model, const Tensor& x_t, std::size_t t) {
  Tensor eps = model(x_t, t);
  require_shape(eps, x_t.shape(), "noise prediction");
  return eps;
}

}  // namespace

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
  }
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    const double a = 1.0 - s.beta[i];
    const double prev = prod;
    prod *= a;
    s.alpha.push_back(a);
    s.alpha_bar.push_back(prod);
    s.sqrt_alpha_bar.push_back(std::sqrt(prod));
    s.sqrt_one_minus_alpha_bar.push_back(std::sqrt(1.0 - prod));
    s.posterior_variance.push_back(s.beta[i] * (1.0 - prev) / (1.0 - prod));
  }
  return s;
}

std::string to_string(SamplerKind kind) { return kind == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

std::string to_string(VarianceMode mode) {
  return mode == VarianceMode::FixedBeta ? "fixed_beta" : "fixed_posterior";
}

SamplerKind parse_sampler_kind(const std::string& text) {
  if (text == "ddpm") return SamplerKind::Ddpm;
  if (text == "ddim") return SamplerKind::Ddim;
  throw ConfigError("unknown sampler '" + text + "' (expected ddpm or ddim)");
}

VarianceMode parse_variance_mode(const std::string& text) {
  if (text == "fixed_beta") return VarianceMode::FixedBeta;
  if (text == "fixed_posterior") return VarianceMode::FixedPosterior;
  throw ConfigError("unknown variance mode '" + text + "' (expected fixed_beta or fixed_posterior)");
}

void SamplerConfig::validate(const NoiseSchedule& schedule) const {
  if (kind == SamplerKind::Ddim && (ddim_steps < 1 || ddim_steps > schedule.T)) {
    throw ConfigError("ddim_steps must be in [1, T]");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must be in [0, 1]");
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule) {
  require_timestep(t, schedule);
  require_shape(eps, x0.shape(), "q_sample noise");
  const double a = schedule.sqrt_alpha_bar[t - 1];
  const double b = schedule.sqrt_one_minus_alpha_bar[t - 1];
  Tensor x_t(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) x_t[i] = a * x0[i] + b * eps[i];
  return x_t;
}

Tensor q_step(const Tensor& x_prev, std::size_t t, const NoiseSchedule& schedule, Rng& rng) {
  require_timestep(t, schedule);
  const double keep = std::sqrt(1.0 - schedule.beta_at(t));
  const double sd = std::sqrt(schedule.beta_at(t));
  std::normal_distribution<double> normal;
  Tensor x(x_prev.shape());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = keep * x_prev[i] + sd * normal(rng);
  return x;
}

double loss_simple(const EpsilonModel& model, const std::vector<Tensor>& x0, const std::vector<std::size_t>& t,
                   const std::vector<Tensor>& eps, const NoiseSchedule& schedule) {
  if (x0.size() != t.size() || x0.size() != eps.size()) {
    throw ShapeError("loss_simple: batch sizes differ (x0 " + std::to_string(x0.size()) + ", t " +
                     std::to_string(t.size()) + ", eps " + std::to_string(eps.size()) + ")");
  }
  if (x0.empty()) throw ShapeError("loss_simple: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const Tensor pred = predict(model, q_sample(x0[i], t[i], eps[i], schedule), t[i]);
    double s = 0.0;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double d = eps[i][j] - pred[j];
      s += d * d;
    }
    total += s / static_cast<double>(pred.size());
  }
  return total / static_cast<double>(x0.size());
}

Tensor p_sample_step(const EpsilonModel& model, const Tensor& x_t, std::size_t t, const NoiseSchedule& schedule,
                     VarianceMode mode, Rng& rng, bool clip_x0) {
  require_timestep(t, schedule);
  const Tensor eps = predict(model, x_t, t);
  const double coef = schedule.beta_at(t) / schedule.sqrt_one_minus_alpha_bar[t - 1];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha_at(t));
  const double variance =
      mode == VarianceMode::FixedBeta ? schedule.beta_at(t) : schedule.posterior_variance_at(t);
  const double sd = t > 1 ? std::sqrt(variance) : 0.0;
  const double ab = schedule.alpha_bar_at(t), ab_prev = schedule.alpha_bar_at(t - 1);
  const double c_x0 = std::sqrt(ab_prev) * schedule.beta_at(t) / (1.0 - ab);
  const double c_xt = std::sqrt(schedule.alpha_at(t)) * (1.0 - ab_prev) / (1.0 - ab);
  std::normal_distribution<double> normal;
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double mean;
    if (clip_x0) {
      const double x0 = std::clamp((x_t[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab), -1.0, 1.0);
      mean = c_x0 * x0 + c_xt * x_t[i];
    } else {
      mean = inv_sqrt_alpha * (x_t[i] - coef * eps[i]);
    }
    out[i] = t > 1 ? mean + sd * normal(rng) : mean;
  }
  return out;
}

Tensor ddim_step(const EpsilonModel& model, const Tensor& x_t, std::size_t t, std::size_t t_prev,
                 const NoiseSchedule& schedule, double eta, Rng& rng, bool clip_x0) {
  require_timestep(t, schedule);
  if (t_prev >= t) {
    throw DomainError("ddim_step: t_prev " + std::to_string(t_prev) + " must be < t " + std::to_string(t));
  }
  const Tensor eps = predict(model, x_t, t);
  const double ab_t = schedule.alpha_bar_at(t);
  const double ab_prev = schedule.alpha_bar_at(t_prev);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sqrt_ab_t = std::sqrt(ab_t), sqrt_1m_ab_t = std::sqrt(1.0 - ab_t);
  const double sqrt_ab_prev = std::sqrt(ab_prev);
  std::normal_distribution<double> normal;
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x0_hat = (x_t[i] - sqrt_1m_ab_t * eps[i]) / sqrt_ab_t;
    double e = eps[i];
    if (clip_x0) {
      // re-derive the noise so x_t stays consistent with the clamped x0
      x0_hat = std::clamp(x0_hat, -1.0, 1.0);
      e = (x_t[i] - sqrt_ab_t * x0_hat) / sqrt_1m_ab_t;
    }
    double v = sqrt_ab_prev * x0_hat + dir * e;
    if (sigma > 0.0) v += sigma * normal(rng);
    out[i] = v;
  }
  return out;
}

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps < 1 || steps > T) throw ConfigError("ddim_steps must be in [1, T]");
  std::vector<std::size_t> ts(steps);
  for (std::size_t i = 0; i < steps; ++i) ts[steps - 1 - i] = 1 + (i * T) / steps;
  return ts;
}

std::vector<Tensor> sample(const EpsilonModel& model, std::size_t n_images, const Shape& image_shape,
                           const SamplerConfig& config, const NoiseSchedule& schedule, Rng& rng) {
  config.validate(schedule);
  std::vector<Tensor> xs;
  if (n_images == 0) return xs;
  for (std::size_t i = 0; i < n_images; ++i) xs.push_back(normal_tensor(image_shape, rng));

  if (config.kind == SamplerKind::Ddpm) {
    for (std::size_t t = schedule.T; t >= 1; --t) {
      for (auto& x : xs) x = p_sample_step(model, x, t, schedule, config.variance_mode, rng, config.clip_x0);
    }
  } else {
    const auto ts = ddim_timesteps(schedule.T, config.ddim_steps);
    for (std::size_t k = 0; k < ts.size(); ++k) {
      const std::size_t t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
      for (auto& x : xs) x = ddim_step(model, x, ts[k], t_prev, schedule, config.eta, rng, config.clip_x0);
    }
  }
  for (auto& x : xs) {
    for (auto& v : x.values()) v = std::clamp(v, -1.0, 1.0);
  }
  return xs;
}

}  // namespace vmddpm::diffusion
