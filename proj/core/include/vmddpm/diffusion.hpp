#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "vmddpm/random.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::diffusion {

/// Linear-beta noise schedule. Timesteps are 1-based: t in [1, T]; the
/// accessor alpha_bar_at(0) returns 1 (no corruption).
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sqrt_alpha_bar;
  std::vector<double> sqrt_one_minus_alpha_bar;
  std::vector<double> posterior_variance;

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
  double posterior_variance_at(std::size_t t) const { return posterior_variance.at(t - 1); }
};

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end);

enum class SamplerKind { Ddpm, Ddim };
enum class VarianceMode { FixedBeta, FixedPosterior };

std::string to_string(SamplerKind kind);
std::string to_string(VarianceMode mode);
SamplerKind parse_sampler_kind(const std::string& text);
VarianceMode parse_variance_mode(const std::string& text);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddpm;
  std::size_t ddim_steps = 50;
  double eta = 0.0;
  VarianceMode variance_mode = VarianceMode::FixedBeta;
  /// Clamp the predicted x0 to [-1, 1] inside every reverse step, not only
  /// at the end.
  bool clip_x0 = false;

  void validate(const NoiseSchedule& schedule) const;
};

/// Noise predictor for a single image. Any randomness it needs (e.g. scan
/// regeneration) comes from a stream it owns, so sampler noise and model
/// randomness never share a generator.
using EpsilonModel = std::function<Tensor(const Tensor& x_t, std::size_t t)>;

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule);

/// One forward transition x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I).
Tensor q_step(const Tensor& x_prev, std::size_t t, const NoiseSchedule& schedule, Rng& rng);

/// Mean over the batch of the per-image mean squared error between eps and
/// the model's prediction at q_sample(x0, t, eps).
double loss_simple(const EpsilonModel& model, const std::vector<Tensor>& x0, const std::vector<std::size_t>& t,
                   const std::vector<Tensor>& eps, const NoiseSchedule& schedule);

/// Ancestral step x_t -> x_{t-1}; no noise is added at t = 1. With clip_x0
/// the mean is the posterior mean around the clamped x0 estimate.
Tensor p_sample_step(const EpsilonModel& model, const Tensor& x_t, std::size_t t, const NoiseSchedule& schedule,
                     VarianceMode mode, Rng& rng, bool clip_x0 = false);

/// Generalised (DDIM) step x_t -> x_{t_prev}; t_prev = 0 means the final step.
Tensor ddim_step(const EpsilonModel& model, const Tensor& x_t, std::size_t t, std::size_t t_prev,
                 const NoiseSchedule& schedule, double eta, Rng& rng, bool clip_x0 = false);

/// Descending DDIM timesteps: `steps` values spread evenly over [1, T].
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps);

/// Starts from standard normal noise and runs the configured sampler; the
/// result is clamped to [-1, 1].
std::vector<Tensor> sample(const EpsilonModel& model, std::size_t n_images, const Shape& image_shape,
                           const SamplerConfig& config, const NoiseSchedule& schedule, Rng& rng);

}  // namespace vmddpm::diffusion
