#include "vmddpm/training.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "vmddpm/autograd.hpp"
#include "vmddpm/cross_scan.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/evaluation.hpp"
#include "vmddpm/image_io.hpp"

namespace vmddpm::cli {
namespace fs = std::filesystem;

namespace {

// Streams derived from the run seed. Kept apart so that, e.g., switching
// regeneration off leaves batches, timesteps and noise untouched.
enum Stream : std::uint64_t {
  kInitStream = 1,
  kNoiseStream = 2,
  kScanStream = 3,
  kShuffleStream = 4,
  kAugmentStream = 5,
  kGridStream = 1000000,
};

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) { return derive_rng(seed, stream)(); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string sampler_label(const diffusion::SamplerConfig& s) {
  const std::string clip = s.clip_x0 ? ",clip_x0" : "";
  if (s.kind == diffusion::SamplerKind::Ddpm) return "ddpm(" + diffusion::to_string(s.variance_mode) + clip + ")";
  std::ostringstream os;
  os << "ddim(steps=" << s.ddim_steps << ",eta=" << s.eta << clip << ")";
  return os.str();
}

fs::path checkpoint_path(const fs::path& out, std::uint64_t step) {
  std::ostringstream name;
  name << "step_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
  return out / "checkpoints" / name.str();
}

void claim_output(const fs::path& out, bool force, const std::vector<std::string>& owned) {
  bool exists = false;
  for (const auto& name : owned) exists = exists || fs::exists(out / name);
  if (exists && !force) {
    throw OutputExistsError("output directory '" + out.string() + "' already holds results; pass --force to overwrite");
  }
  ensure_dir(out);
  if (exists) {
    std::error_code ec;
    for (const auto& name : owned) fs::remove_all(out / name, ec);
  }
}

std::vector<Tensor> sample_images(const net::ModelWeights& weights, const RunConfig& config,
                                  const diffusion::SamplerConfig& sampler, bool regen, std::size_t n,
                                  std::uint64_t seed) {
  const auto schedule = config.schedule();
  auto scan_rng = std::make_shared<Rng>(derive_rng(seed, kScanStream));
  Rng noise = derive_rng(seed, kNoiseStream);
  const auto model = make_epsilon_model(weights, config.model, regen, scan_rng);
  return diffusion::sample(model, n, {config.model.in_channels, config.model.resolution, config.model.resolution},
                           sampler, schedule, noise);
}

std::pair<Rng, Rng> split_rng_state(const std::string& text) {
  const auto sep = text.find('\n');
  if (sep == std::string::npos) throw CheckpointError("checkpoint random state is malformed");
  try {
    return {deserialize_rng(text.substr(0, sep)), deserialize_rng(text.substr(sep + 1))};
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
}

}  // namespace

data::DatasetHandle resolve_dataset(const std::string& spec, const RunConfig& config) {
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string rest = spec.substr(prefix.size());
    const auto colon = rest.find(':');
    const std::string name = rest.substr(0, colon);
    std::uint64_t seed = 0;
    if (colon != std::string::npos) {
      try {
        seed = std::stoull(rest.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("bad synthetic dataset seed in '" + spec + "'");
      }
    }
    return data::synth_toy_dataset(name, config.dataset_size, config.model.resolution, seed,
                                   config.model.in_channels);
  }
  return data::load_dataset(spec, config.model.resolution, config.model.in_channels);
}

diffusion::EpsilonModel make_epsilon_model(const net::ModelWeights& weights, const net::ModelConfig& config,
                                           bool regen, std::shared_ptr<Rng> rng) {
  return [&weights, config, regen, rng](const Tensor& x_t, std::size_t t) {
    net::ForwardContext ctx{*rng, regen};
    return net::unet_forward(x_t, t, weights, config, ctx);
  };
}

Gradients batch_gradients(const net::ModelWeights& weights, const net::ModelConfig& config,
                          const std::vector<Tensor>& images, const diffusion::NoiseSchedule& schedule, bool regen,
                          Rng& noise_rng, Rng& scan_rng) {
  if (images.empty()) throw ShapeError("batch_gradients: empty batch");
  const auto params = net::named_parameters(weights);
  Gradients g;
  for (const auto& [name, t] : params) g.values.emplace_back(t->shape());

  // Everything random is drawn up front in item order, so the result does not
  // depend on how items are spread over threads.
  const std::size_t n = images.size();
  std::uniform_int_distribution<std::size_t> pick_t(1, schedule.T);
  std::vector<std::size_t> ts(n);
  std::vector<Tensor> eps(n);
  std::vector<std::uint64_t> scan_seeds(n);
  for (std::size_t b = 0; b < n; ++b) {
    ts[b] = pick_t(noise_rng);
    eps[b] = normal_tensor(images[b].shape(), noise_rng);
  }
  for (std::size_t b = 0; b < n; ++b) scan_seeds[b] = scan_rng();

  const double inv_batch = 1.0 / static_cast<double>(n);
  std::vector<double> losses(n);
  std::vector<std::vector<Tensor>> item_grads(n);
  auto run_item = [&](std::size_t b) {
    const Tensor x_t = diffusion::q_sample(images[b], ts[b], eps[b], schedule);
    ag::Tape tape;
    Rng item_rng(scan_seeds[b]);
    net::ForwardContext ctx{item_rng, regen};
    ag::Var pred = net::unet_forward(tape.constant(x_t), ts[b], weights, config, ctx);
    ag::Var loss = ag::mse(pred, tape.constant(eps[b]));
    losses[b] = loss.value()[0];
    tape.backward(loss, Tensor({1}, inv_batch));
    auto& out = item_grads[b];
    out.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (const Tensor* grad = tape.grad_of(*params[i].second)) out[i] = *grad;
    }
  };

  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t b = 0; b < n; ++b) run_item(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next++; b < n; b = next++) {
          try {
            run_item(b);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  for (std::size_t b = 0; b < n; ++b) {
    g.loss += losses[b] * inv_batch;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& grad = item_grads[b][i];
      if (grad.size() == 0) continue;
      Tensor& acc = g.values[i];
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += grad[k];
    }
    item_grads[b].clear();
  }
  return g;
}

void adam_update(net::ModelWeights& weights, const Gradients& grads, AdamState& state, double lr, double beta1,
                 double beta2, double eps) {
  const auto params = net::named_parameters(weights);
  if (grads.values.size() != params.size()) throw ShapeError("adam_update: gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& [name, t] : params) {
      state.m.emplace_back(t->shape());
      state.v.emplace_back(t->shape());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].second;
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads.values[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

double learning_rate(const RunConfig& config, std::uint64_t step) {
  if (!config.cosine_decay || config.total_steps == 0) return config.lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(config.total_steps));
  return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + std::cos(std::acos(-1.0) * frac));
}

ckpt::Checkpoint make_checkpoint(const RunConfig& config, const net::ModelWeights& weights, const AdamState& adam,
                                 std::uint64_t step, const Rng& noise_rng, const Rng& scan_rng,
                                 const std::string& data_state) {
  ckpt::Checkpoint c;
  c.config_text = config.to_text();
  c.step = step;
  c.rng_state = serialize_rng(noise_rng) + "\n" + serialize_rng(scan_rng);
  c.data_state = data_state;
  const auto params = net::named_parameters(weights);
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.weights.emplace_back(params[i].first, *params[i].second);
    if (!adam.m.empty()) {
      c.adam_m.emplace_back(params[i].first, adam.m[i]);
      c.adam_v.emplace_back(params[i].first, adam.v[i]);
    }
  }
  c.adam_step = adam.step;
  return c;
}

std::pair<RunConfig, net::ModelWeights> restore_model(const ckpt::Checkpoint& c) {
  RunConfig config;
  try {
    config = RunConfig::parse(c.config_text);
    config.model.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
  net::ModelWeights weights = net::zero_model_weights(config.model);
  auto params = net::named_parameters(weights);
  if (params.size() != c.weights.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(c.weights.size()) + " weight arrays, model needs " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = c.weights[i];
    if (name != params[i].first || t.shape() != params[i].second->shape()) {
      throw CheckpointError("checkpoint array '" + name + "' " + to_string(t.shape()) + " does not match '" +
                            params[i].first + "' " + to_string(params[i].second->shape()));
    }
    *params[i].second = t;
  }
  try {
    net::audit_shapes(weights, config.model);
  } catch (const ShapeError& e) {
    throw CheckpointError(e.what());
  }
  return {config, std::move(weights)};
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const std::uint64_t seed = config.require_seed();
  if (config.output_dir.empty()) throw ConfigError("output_dir is not set");
  const fs::path out = config.output_dir;
  const auto schedule = config.schedule();
  const data::DatasetHandle dataset = resolve_dataset(config.dataset, config);
  data::BatchIterator batches(dataset, config.batch_size, sub_seed(seed, kShuffleStream),
                              sub_seed(seed, kAugmentStream), config.augment);

  TrainResult result;
  result.out_dir = out;
  AdamState adam;
  Rng noise_rng = derive_rng(seed, kNoiseStream);
  Rng scan_rng = derive_rng(seed, kScanStream);
  std::uint64_t step = 0;

  if (options.resume) {
    const ckpt::Checkpoint c = ckpt::load(*options.resume);
    auto [ck_config, weights] = restore_model(c);
    if (ck_config.model.resolution != config.model.resolution || net::parameter_count(weights) == 0) {
      throw CheckpointError("checkpoint model does not match the run config");
    }
    net::audit_shapes(weights, config.model);
    result.weights = std::move(weights);
    std::tie(noise_rng, scan_rng) = split_rng_state(c.rng_state);
    try {
      batches.restore(c.data_state);
    } catch (const IoError& e) {
      throw CheckpointError(e.what());
    }
    if (!c.adam_m.empty()) {
      for (const auto& [name, t] : c.adam_m) adam.m.push_back(t);
      for (const auto& [name, t] : c.adam_v) adam.v.push_back(t);
    }
    adam.step = c.adam_step;
    step = c.step;
    ensure_dir(out);
  } else {
    claim_output(out, options.force, {"manifest.txt", "loss_log.csv", "checkpoints", "samples", "latest.ckpt"});
    Rng init = derive_rng(seed, kInitStream);
    result.weights = net::init_model_weights(config.model, init);
  }
  ensure_dir(out / "checkpoints");
  ensure_dir(out / "samples");
  write_text(out / "manifest.txt", "# resolved run configuration\nconfig_hash = " + config.hash() + "\n" +
                                       config.to_text());

  const bool fresh_log = !options.resume || !fs::exists(out / "loss_log.csv");
  std::ofstream log(out / "loss_log.csv", fresh_log ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open loss log in '" + out.string() + "'");
  if (fresh_log) log << "step,wall_time,loss\n";

  auto save_checkpoint = [&](std::uint64_t at) {
    const ckpt::Checkpoint c = make_checkpoint(config, result.weights, adam, at, noise_rng, scan_rng, batches.state());
    const fs::path path = checkpoint_path(out, at);
    ckpt::save(c, path);
    ckpt::save(c, out / "latest.ckpt");
    if (config.grid_samples > 0) {
      const auto images = sample_images(result.weights, config, config.sampler, config.regen, config.grid_samples,
                                        sub_seed(seed, kGridStream + at));
      std::ostringstream name;
      name << "grid_" << std::setw(8) << std::setfill('0') << at << ".png";
      io::write_png(out / "samples" / name.str(), io::make_grid(images));
    }
    return path;
  };

  if (!options.resume) result.initial_checkpoint = save_checkpoint(0);
  result.final_checkpoint = options.resume ? *options.resume : result.initial_checkpoint;

  const auto t0 = std::chrono::steady_clock::now();
  while (step < config.total_steps) {
    const data::Batch batch = batches.next();
    const Gradients g =
        batch_gradients(result.weights, config.model, batch.images, schedule, config.regen, noise_rng, scan_rng);
    if (!std::isfinite(g.loss)) throw DomainError("training loss became non-finite at step " + std::to_string(step + 1));
    adam_update(result.weights, g, adam, learning_rate(config, step), config.adam_beta1, config.adam_beta2,
                config.adam_eps);
    ++step;
    result.losses.push_back(g.loss);
    if (step % config.log_every == 0 || step == config.total_steps) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << step << ',' << std::fixed << std::setprecision(3) << wall << ',' << std::defaultfloat
          << std::setprecision(17) << g.loss << '\n';
      log.flush();
      if (!log) throw IoError("failed writing the loss log");
      if (options.progress) *options.progress << "step " << step << " loss " << g.loss << std::endl;
    }
    if (step % config.checkpoint_every == 0 || step == config.total_steps) {
      result.final_checkpoint = save_checkpoint(step);
    }
  }
  return result;
}

std::vector<Tensor> sample_cmd(const SampleOptions& options) {
  const ckpt::Checkpoint c = ckpt::load(options.checkpoint);
  auto [config, weights] = restore_model(c);
  const diffusion::SamplerConfig sampler = options.sampler.value_or(config.sampler);
  sampler.validate(config.schedule());
  if (options.out_dir.empty()) throw ConfigError("sample needs an output directory");
  claim_output(options.out_dir, options.force, {"grid.png", "sample_0000.png"});
  const auto images =
      sample_images(weights, config, sampler, options.regen.value_or(config.regen), options.n, options.seed);
  for (std::size_t k = 0; k < images.size(); ++k) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << k << ".png";
    io::write_png(options.out_dir / name.str(), images[k]);
  }
  if (!images.empty()) io::write_png(options.out_dir / "grid.png", io::make_grid(images));
  return images;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "fid = " << fmt_double(fid) << "\n"
     << "seed = " << seed << "\n"
     << "sampler = " << sampler << "\n"
     << "config_hash = " << config_hash << "\n"
     << "dataset = " << dataset << "\n"
     << "embedder = " << embedder << "\n"
     << "n_samples = " << n_samples << "\n"
     << "reference_only = " << (reference_only ? "true" : "false") << "\n";
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j = {{"fid", fid},         {"seed", seed},         {"sampler", sampler},
                      {"config_hash", config_hash}, {"dataset", dataset}, {"embedder", embedder},
                      {"n_samples", n_samples}, {"reference_only", reference_only}};
  return j.dump(2) + "\n";
}

EvalReport eval_cmd(const EvalOptions& options) {
  const ckpt::Checkpoint c = ckpt::load(options.checkpoint);
  auto [config, weights] = restore_model(c);
  const diffusion::SamplerConfig sampler = options.sampler.value_or(config.sampler);
  sampler.validate(config.schedule());
  if (options.out_dir.empty()) throw ConfigError("eval needs an output directory");
  claim_output(options.out_dir, options.force, {"eval_report.txt", "eval_report.json"});

  EvalReport report;
  report.seed = options.seed;
  report.sampler = options.reference_only ? "none" : sampler_label(sampler);
  report.config_hash = config.hash();
  report.dataset = options.dataset.value_or(config.dataset);
  report.embedder = options.embedder.value_or(config.embedder);
  report.reference_only = options.reference_only;

  const data::DatasetHandle reference = resolve_dataset(report.dataset, config);
  const eval::Embedder embedder =
      report.embedder == "pixel" ? eval::pixel_embedder() : eval::load_linear_embedder(report.embedder);
  std::vector<Tensor> samples;
  if (options.reference_only) {
    samples = reference.items;
  } else {
    samples = sample_images(weights, config, sampler, options.regen.value_or(config.regen),
                            options.n_samples.value_or(config.eval_samples), options.seed);
  }
  report.n_samples = samples.size();
  report.fid = eval::evaluate_fid(samples, reference, embedder);
  write_text(options.out_dir / "eval_report.txt", report.to_text());
  write_text(options.out_dir / "eval_report.json", report.to_json());
  return report;
}

std::string AblationReport::to_text() const {
  std::ostringstream os;
  os << "                 regen_on                 regen_off\n"
     << "fid              " << std::left << std::setw(25) << fmt_double(regen_on.fid) << fmt_double(regen_off.fid)
     << "\n"
     << "permutations     " << std::setw(25) << permutations_on << permutations_off << "\n"
     << "fid_difference (off - on) = " << fmt_double(fid_difference()) << "\n"
     << "regen_helped = " << (fid_difference() > 0 ? "true" : "false") << "\n"
     << "seed = " << regen_on.seed << "\n"
     << "sampler = " << regen_on.sampler << "\n";
  return os.str();
}

std::string AblationReport::to_json() const {
  nlohmann::json j = {
      {"regen_on", nlohmann::json::parse(regen_on.to_json())},
      {"regen_off", nlohmann::json::parse(regen_off.to_json())},
      {"permutations_on", permutations_on},
      {"permutations_off", permutations_off},
      {"fid_difference", fid_difference()},
      {"regen_helped", fid_difference() > 0},
  };
  return j.dump(2) + "\n";
}

AblationReport ablate_cmd(const RunConfig& config, bool force, std::ostream* progress) {
  config.validate();
  const std::uint64_t seed = config.require_seed();
  if (config.output_dir.empty()) throw ConfigError("output_dir is not set");
  const fs::path out = config.output_dir;
  claim_output(out, force, {"ablation_report.txt", "ablation_report.json", "regen_on", "regen_off"});

  AblationReport report;
  for (const bool regen : {true, false}) {
    const std::string tag = regen ? "regen_on" : "regen_off";
    RunConfig run = config;
    run.regen = regen;
    run.output_dir = (out / tag).string();
    if (progress) *progress << "== " << tag << " ==" << std::endl;
    const std::uint64_t before = scan::regeneration_count();
    const TrainResult trained = train(run, {force, std::nullopt, progress});
    EvalOptions eo;
    eo.checkpoint = trained.final_checkpoint;
    eo.seed = seed;
    eo.out_dir = out / tag / "eval";
    eo.force = force;
    EvalReport r = eval_cmd(eo);
    const std::uint64_t used = scan::regeneration_count() - before;
    if (regen) {
      report.regen_on = r;
      report.permutations_on = used;
    } else {
      report.regen_off = r;
      report.permutations_off = used;
    }
  }
  write_text(out / "ablation_report.txt", report.to_text());
  write_text(out / "ablation_report.json", report.to_json());
  return report;
}

}  // namespace vmddpm::cli
