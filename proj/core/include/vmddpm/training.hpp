#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vmddpm/checkpoint.hpp"
#include "vmddpm/data_pipeline.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/diffusion.hpp"
#include "vmddpm/network.hpp"
#include "vmddpm/run_config.hpp"

namespace vmddpm::cli {

/// Output directory already holds a run and --force was not given.
class OutputExistsError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// "synthetic:<name>:<seed>" or a directory, at the model's resolution and
/// channel count.
data::DatasetHandle resolve_dataset(const std::string& spec, const RunConfig& config);

/// Wraps the UNet as a noise predictor; scan regeneration draws from `rng`.
diffusion::EpsilonModel make_epsilon_model(const net::ModelWeights& weights, const net::ModelConfig& config,
                                           bool regen, std::shared_ptr<Rng> rng);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

/// Per-parameter gradients of the mean batch loss, in named_parameters order.
struct Gradients {
  std::vector<Tensor> values;
  double loss = 0.0;
};

/// One batch: draws t then eps per item from `noise_rng`, scan permutations
/// from `scan_rng`, and returns the mean loss with its gradients. Items are
/// processed in order.
Gradients batch_gradients(const net::ModelWeights& weights, const net::ModelConfig& config,
                          const std::vector<Tensor>& images, const diffusion::NoiseSchedule& schedule, bool regen,
                          Rng& noise_rng, Rng& scan_rng);

/// Bias-corrected Adam update at learning rate `lr`.
void adam_update(net::ModelWeights& weights, const Gradients& grads, AdamState& state, double lr, double beta1,
                 double beta2, double eps);

double learning_rate(const RunConfig& config, std::uint64_t step);

ckpt::Checkpoint make_checkpoint(const RunConfig& config, const net::ModelWeights& weights, const AdamState& adam,
                                 std::uint64_t step, const Rng& noise_rng, const Rng& scan_rng,
                                 const std::string& data_state);
/// Rebuilds weights from a checkpoint's config and arrays; throws CheckpointError.
std::pair<RunConfig, net::ModelWeights> restore_model(const ckpt::Checkpoint& ckpt);

struct TrainOptions {
  bool force = false;
  /// Continue from this checkpoint up to config.total_steps.
  std::optional<std::filesystem::path> resume;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::filesystem::path out_dir;
  std::filesystem::path final_checkpoint;
  std::filesystem::path initial_checkpoint;  ///< empty when resuming
  std::vector<double> losses;                ///< every step run in this call
  net::ModelWeights weights;
};

/// Layout under config.output_dir: manifest.txt, loss_log.csv,
/// checkpoints/step_<n>.ckpt, latest.ckpt, samples/grid_<n>.png.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

struct SampleOptions {
  std::filesystem::path checkpoint;
  std::size_t n = 16;
  std::uint64_t seed = 0;
  std::optional<diffusion::SamplerConfig> sampler;  ///< defaults to the checkpoint's
  std::optional<bool> regen;
  std::filesystem::path out_dir;
  bool force = false;
};

/// Writes sample_<k>.png and grid.png; returns the images.
std::vector<Tensor> sample_cmd(const SampleOptions& options);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::optional<std::string> dataset;  ///< defaults to the checkpoint's
  std::optional<std::size_t> n_samples;
  std::optional<std::string> embedder;
  std::uint64_t seed = 0;
  std::optional<diffusion::SamplerConfig> sampler;
  std::optional<bool> regen;
  /// Compare the reference set with itself instead of sampling.
  bool reference_only = false;
  std::filesystem::path out_dir;
  bool force = false;
};

struct EvalReport {
  double fid = 0.0;
  std::uint64_t seed = 0;
  std::string sampler;
  std::string config_hash;
  std::string dataset;
  std::string embedder;
  std::size_t n_samples = 0;
  bool reference_only = false;

  std::string to_text() const;
  std::string to_json() const;
};

/// Writes eval_report.txt and eval_report.json into out_dir.
EvalReport eval_cmd(const EvalOptions& options);

struct AblationReport {
  EvalReport regen_on;
  EvalReport regen_off;
  std::uint64_t permutations_on = 0;
  std::uint64_t permutations_off = 0;
  double fid_difference() const { return regen_off.fid - regen_on.fid; }

  std::string to_text() const;
  std::string to_json() const;
};

/// Trains regen on and off from identical seeds under out/regen_on and
/// out/regen_off, evaluates both with the same sampler seed, and writes
/// ablation_report.txt / .json.
AblationReport ablate_cmd(const RunConfig& config, bool force, std::ostream* progress = nullptr);

}  // namespace vmddpm::cli
