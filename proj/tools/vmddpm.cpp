#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vmddpm/checkpoint.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/training.hpp"

namespace fs = std::filesystem;
using namespace vmddpm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string sampler;
  std::optional<std::size_t> ddim_steps;
  std::optional<double> eta;
  std::string clip_x0;
  std::string regen;
  std::optional<std::size_t> resolution;
  bool force = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_config) {
  if (with_config) {
    cmd->add_option("--config", c.config_file, "Flat key = value config file");
    cmd->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
    cmd->add_option("--resolution", c.resolution, "Image resolution");
  }
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--sampler", c.sampler, "ddpm or ddim")->check(CLI::IsMember({"ddpm", "ddim"}));
  cmd->add_option("--ddim-steps", c.ddim_steps, "DDIM substeps");
  cmd->add_option("--eta", c.eta, "DDIM stochasticity in [0, 1]");
  cmd->add_option("--clip-x0", c.clip_x0, "Clamp predicted x0 in every step on|off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--regen", c.regen, "Sequence regeneration on|off")->check(CLI::IsMember({"on", "off"}));
  cmd->add_flag("--force", c.force, "Overwrite existing results");
}

fs::path default_out(const std::string& command, const std::string& tag) {
  const char* root = std::getenv("VMDDPM_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / (command + "-" + tag);
}

diffusion::SamplerConfig apply_sampler(diffusion::SamplerConfig s, const Common& c) {
  if (!c.sampler.empty()) s.kind = diffusion::parse_sampler_kind(c.sampler);
  if (c.ddim_steps) s.ddim_steps = *c.ddim_steps;
  if (c.eta) s.eta = *c.eta;
  if (!c.clip_x0.empty()) s.clip_x0 = c.clip_x0 == "on";
  return s;
}

std::optional<bool> regen_flag(const Common& c) {
  if (c.regen.empty()) return std::nullopt;
  return c.regen == "on";
}

cli::RunConfig resolve_config(const Common& c, const std::string& command) {
  cli::RunConfig config = c.config_file.empty() ? cli::RunConfig{} : cli::RunConfig::load(c.config_file);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) config.seed = *c.seed;
  if (c.resolution) config.model.resolution = *c.resolution;
  if (auto r = regen_flag(c)) config.regen = *r;
  config.sampler = apply_sampler(config.sampler, c);
  if (!c.out.empty()) config.output_dir = c.out;
  if (config.output_dir.empty()) config.output_dir = default_out(command, config.hash()).string();
  return config;
}

/// Loads the checkpoint's stored seed when none was given on the command line.
std::uint64_t seed_or_checkpoint(const Common& c, const fs::path& checkpoint) {
  if (c.seed) return *c.seed;
  auto [config, weights] = cli::restore_model(ckpt::load(checkpoint));
  return config.require_seed();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion model with a state-space UNet denoiser"};
  app.require_subcommand(1);

  Common train_c;
  std::string resume;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, train_c, true);
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint");
  train_cmd->add_flag("--quiet", quiet, "No progress output");

  Common sample_c;
  std::string sample_ckpt;
  std::size_t n_images = 16;
  auto* sample_cmd = app.add_subcommand("sample", "Sample images from a checkpoint");
  add_common(sample_cmd, sample_c, false);
  sample_cmd->add_option("--checkpoint", sample_ckpt, "Checkpoint file")->required();
  sample_cmd->add_option("-n,--num", n_images, "Number of images");

  Common eval_c;
  std::string eval_ckpt, dataset, embedder;
  std::optional<std::size_t> n_eval;
  bool reference_only = false;
  auto* eval_cmd = app.add_subcommand("eval", "Frechet distance of samples against a dataset");
  add_common(eval_cmd, eval_c, false);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", dataset, "Directory or synthetic:<name>:<seed>");
  eval_cmd->add_option("-n,--num", n_eval, "Number of samples");
  eval_cmd->add_option("--embedder", embedder, "pixel or a linear embedder file");
  eval_cmd->add_flag("--reference-only", reference_only, "Compare the reference set with itself");

  Common ablate_c;
  bool ablate_quiet = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "Paired regen on/off training and evaluation");
  add_common(ablate_cmd, ablate_c, true);
  ablate_cmd->add_flag("--quiet", ablate_quiet, "No progress output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const cli::RunConfig config = resolve_config(train_c, "train");
      cli::TrainOptions opts;
      opts.force = train_c.force;
      if (!resume.empty()) opts.resume = resume;
      opts.progress = quiet ? nullptr : &std::cerr;
      const auto result = cli::train(config, opts);
      std::cout << "final checkpoint: " << result.final_checkpoint.string() << "\n";
    } else if (*sample_cmd) {
      cli::SampleOptions opts;
      opts.checkpoint = sample_ckpt;
      opts.n = n_images;
      opts.seed = seed_or_checkpoint(sample_c, sample_ckpt);
      auto [config, weights] = cli::restore_model(ckpt::load(sample_ckpt));
      opts.sampler = apply_sampler(config.sampler, sample_c);
      opts.regen = regen_flag(sample_c);
      opts.out_dir = sample_c.out.empty() ? default_out("sample", config.hash()) : fs::path(sample_c.out);
      opts.force = sample_c.force;
      const auto images = cli::sample_cmd(opts);
      std::cout << "wrote " << images.size() << " image(s) to " << opts.out_dir.string() << "\n";
    } else if (*eval_cmd) {
      cli::EvalOptions opts;
      opts.checkpoint = eval_ckpt;
      auto [config, weights] = cli::restore_model(ckpt::load(eval_ckpt));
      if (!dataset.empty()) opts.dataset = dataset;
      if (!embedder.empty()) opts.embedder = embedder;
      opts.n_samples = n_eval;
      opts.seed = seed_or_checkpoint(eval_c, eval_ckpt);
      opts.sampler = apply_sampler(config.sampler, eval_c);
      opts.regen = regen_flag(eval_c);
      opts.reference_only = reference_only;
      opts.out_dir = eval_c.out.empty() ? default_out("eval", config.hash()) : fs::path(eval_c.out);
      opts.force = eval_c.force;
      std::cout << cli::eval_cmd(opts).to_text();
    } else if (*ablate_cmd) {
      const cli::RunConfig config = resolve_config(ablate_c, "ablate");
      std::cout << cli::ablate_cmd(config, ablate_c.force, ablate_quiet ? nullptr : &std::cerr).to_text();
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DatasetError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
