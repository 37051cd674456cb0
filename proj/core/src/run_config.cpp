#include "vmddpm/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "vmddpm/checkpoint.hpp"
#include "vmddpm/errors.hpp"

namespace vmddpm::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true/false or on/off, got '" + v + "'");
}

std::string fmt(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}

std::string fmt(bool b) { return b ? "true" : "false"; }

struct Entry {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_ENTRY(name, field)                                                             \
  Entry {                                                                                   \
    name, [](const RunConfig& c) { return std::to_string(c.field); },                       \
        [](RunConfig& c, const std::string& v) { c.field = parse_uint(name, v); }           \
  }
#define DOUBLE_ENTRY(name, field)                                                           \
  Entry {                                                                                   \
    name, [](const RunConfig& c) { return fmt(c.field); },                                  \
        [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }         \
  }
#define BOOL_ENTRY(name, field)                                                             \
  Entry {                                                                                   \
    name, [](const RunConfig& c) { return fmt(c.field); },                                  \
        [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }           \
  }
#define STRING_ENTRY(name, field)                                                           \
  Entry {                                                                                   \
    name, [](const RunConfig& c) { return c.field; }, [](RunConfig& c, const std::string& v) { c.field = v; } \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      SIZE_ENTRY("in_channels", model.in_channels),
      SIZE_ENTRY("base_width", model.base_width),
      Entry{"channel_multipliers",
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.model.channel_multipliers.size(); ++i) {
                s += (i ? "," : "") + std::to_string(c.model.channel_multipliers[i]);
              }
              return s;
            },
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> m;
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) m.push_back(parse_uint("channel_multipliers", trim(item)));
              c.model.channel_multipliers = m;
            }},
      SIZE_ENTRY("layers_per_stage", model.layers_per_stage),
      SIZE_ENTRY("state_dim", model.state_dim),
      SIZE_ENTRY("time_embed_dim", model.time_embed_dim),
      BOOL_ENTRY("stem_downsample", model.stem_downsample),
      SIZE_ENTRY("resolution", model.resolution),
      BOOL_ENTRY("per_direction_s6", model.per_direction_s6),
      BOOL_ENTRY("separate_cascade_csm", model.separate_cascade_csm),
      SIZE_ENTRY("timesteps", timesteps),
      DOUBLE_ENTRY("beta_start", beta_start),
      DOUBLE_ENTRY("beta_end", beta_end),
      Entry{"sampler", [](const RunConfig& c) { return diffusion::to_string(c.sampler.kind); },
            [](RunConfig& c, const std::string& v) { c.sampler.kind = diffusion::parse_sampler_kind(v); }},
      SIZE_ENTRY("ddim_steps", sampler.ddim_steps),
      DOUBLE_ENTRY("eta", sampler.eta),
      Entry{"variance_mode", [](const RunConfig& c) { return diffusion::to_string(c.sampler.variance_mode); },
            [](RunConfig& c, const std::string& v) { c.sampler.variance_mode = diffusion::parse_variance_mode(v); }},
      BOOL_ENTRY("clip_x0", sampler.clip_x0),
      STRING_ENTRY("dataset", dataset),
      SIZE_ENTRY("dataset_size", dataset_size),
      BOOL_ENTRY("augment", augment),
      DOUBLE_ENTRY("lr", lr),
      DOUBLE_ENTRY("adam_beta1", adam_beta1),
      DOUBLE_ENTRY("adam_beta2", adam_beta2),
      DOUBLE_ENTRY("adam_eps", adam_eps),
      BOOL_ENTRY("cosine_decay", cosine_decay),
      DOUBLE_ENTRY("lr_min", lr_min),
      SIZE_ENTRY("batch_size", batch_size),
      SIZE_ENTRY("total_steps", total_steps),
      Entry{"seed", [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); },
            [](RunConfig& c, const std::string& v) {
              if (v.empty()) c.seed.reset();
              else c.seed = parse_uint("seed", v);
            }},
      BOOL_ENTRY("regen", regen),
      STRING_ENTRY("output_dir", output_dir),
      SIZE_ENTRY("log_every", log_every),
      SIZE_ENTRY("checkpoint_every", checkpoint_every),
      SIZE_ENTRY("grid_samples", grid_samples),
      SIZE_ENTRY("eval_samples", eval_samples),
      STRING_ENTRY("embedder", embedder),
  };
  return table;
}

#undef SIZE_ENTRY
#undef DOUBLE_ENTRY
#undef BOOL_ENTRY
#undef STRING_ENTRY

const Entry& find(const std::string& key) {
  for (const Entry& e : entries()) {
    if (key == e.key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const Entry& e : entries()) out.emplace_back(e.key);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { find(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Entry& e : entries()) out += std::string(e.key) + " = " + e.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  RunConfig copy = *this;
  copy.output_dir.clear();
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << ckpt::fnv1a(copy.to_text());
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  const auto s = schedule();
  sampler.validate(s);
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (!(lr_min >= 0.0 && lr_min <= lr)) throw ConfigError("lr_min must be in [0, lr]");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (dataset.empty()) throw ConfigError("dataset is not set");
}

diffusion::NoiseSchedule RunConfig::schedule() const {
  return diffusion::make_schedule(timesteps, beta_start, beta_end);
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ConfigError("a seed is required (set 'seed' in the config or pass --seed)");
  return *seed;
}

}  // namespace vmddpm::cli
