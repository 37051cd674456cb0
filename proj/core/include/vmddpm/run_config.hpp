#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vmddpm/diffusion.hpp"
#include "vmddpm/network.hpp"

namespace vmddpm::cli {

/// Everything a run needs. Serialized as flat `key = value` lines; see
/// RunConfig::keys() for the documented key set.
struct RunConfig {
  net::ModelConfig model;

  std::size_t timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  diffusion::SamplerConfig sampler;

  /// Directory of PNG/JPEG files, or synthetic:<gaussians|rings|bars>:<seed>.
  std::string dataset = "synthetic:rings:0";
  std::size_t dataset_size = 16;  ///< synthetic only
  bool augment = true;

  double lr = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine_decay = false;
  double lr_min = 0.0;  ///< floor of the cosine decay

  std::size_t batch_size = 16;
  std::size_t total_steps = 1000;
  std::optional<std::uint64_t> seed;
  bool regen = true;
  std::string output_dir;

  std::size_t log_every = 10;
  std::size_t checkpoint_every = 500;
  std::size_t grid_samples = 4;  ///< images in the grid written at each checkpoint, 0 = none
  std::size_t eval_samples = 64;
  /// "pixel" or a path to a linear embedder file.
  std::string embedder = "pixel";

  static std::vector<std::string> keys();
  /// Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Parses `key = value` lines; '#' starts a comment.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical text: every key in keys() order.
  std::string to_text() const;
  /// FNV-1a of to_text() minus output_dir, as 16 hex digits.
  std::string hash() const;

  void validate() const;
  diffusion::NoiseSchedule schedule() const;
  std::uint64_t require_seed() const;
};

}  // namespace vmddpm::cli
