#include "vmddpm/network.hpp"

#include <cmath>

#include "vmddpm/errors.hpp"

namespace vmddpm::net {
namespace {

LinearWeights init_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_tensor({out, in}, -bound, bound, rng), Tensor({out})};
}

ConvWeights init_conv(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  return {uniform_tensor({out, in, k, k}, -bound, bound, rng), Tensor({out})};
}

NormWeights init_norm(std::size_t channels) { return {Tensor({channels}, 1.0), Tensor({channels})}; }

template <class F>
void for_each_tensor(ModelWeights& w, F&& f) {
  ModelWeights::visit(w, [&](const std::string& name, Tensor& t) {
    if (!t.empty()) f(name, t);
  });
}

template <class F>
void for_each_tensor(const ModelWeights& w, F&& f) {
  ModelWeights::visit(w, [&](const std::string& name, const Tensor& t) {
    if (!t.empty()) f(name, t);
  });
}

ag::Var conv(ag::Var x, const ConvWeights& w, std::size_t stride) {
  ag::Tape& t = x.tape();
  const std::size_t k = w.weight.dim(2);
  return ag::conv2d(x, t.param(w.weight), t.param(w.bias), stride, k / 2);
}

ag::Var norm_act(ag::Var x, const NormWeights& w) {
  ag::Tape& t = x.tape();
  return ag::silu(ag::group_norm(x, t.param(w.gamma), t.param(w.beta), norm_groups(x.shape()[0])));
}

/// Each ss_layer roughly doubles the activation scale; the stage
/// boundaries renormalise so deep configurations stay finite.
ag::Var stage_norm(ag::Var x, const NormWeights& w) {
  ag::Tape& t = x.tape();
  return ag::group_norm(x, t.param(w.gamma), t.param(w.beta), norm_groups(x.shape()[0]));
}

/// silu(t_emb) projected to one value per channel, shape (C).
ag::Var time_bias(ag::Var t_emb, const LinearWeights& w) {
  ag::Tape& t = t_emb.tape();
  ag::Var proj = ag::linear(ag::silu(t_emb), t.param(w.weight), t.param(w.bias));
  return ag::reshape(proj, {w.weight.dim(0)});
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (base_width < 1) throw ConfigError("base_width must be >= 1");
  if (channel_multipliers.empty()) throw ConfigError("channel_multipliers must not be empty");
  for (auto m : channel_multipliers) {
    if (m < 1) throw ConfigError("channel multipliers must be >= 1");
  }
  if (layers_per_stage < 1) throw ConfigError("layers_per_stage must be >= 1");
  if (state_dim < 1) throw ConfigError("state_dim must be >= 1");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even and >= 2");
  if (resolution < 1 || resolution % downsample_factor() != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) + " is not divisible by " +
                      std::to_string(downsample_factor()) + " (2^(stages + stem))");
  }
}

Shape ModelConfig::encoder_output_shape() const {
  const std::size_t side = resolution / downsample_factor();
  return {stage_width(stages() - 1), side, side};
}

std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelWeights& weights) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for_each_tensor(weights, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelWeights& weights) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for_each_tensor(weights, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

std::size_t parameter_count(const ModelWeights& weights) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters(weights)) n += t->size();
  return n;
}

ResnetBlockWeights init_resnet_block(std::size_t channels, std::size_t time_dim, Rng& rng) {
  ResnetBlockWeights w;
  w.norm1 = init_norm(channels);
  w.conv1 = init_conv(channels, channels, 3, rng);
  w.time_proj = init_linear(time_dim, channels, rng);
  w.norm2 = init_norm(channels);
  w.conv2 = init_conv(channels, channels, 3, rng);
  return w;
}

MssBlockWeights init_mss_block(std::size_t channels, std::size_t time_dim, const ModelConfig& config, Rng& rng) {
  MssBlockWeights w;
  w.norm = init_norm(channels);
  w.conv = init_conv(channels, channels, 3, rng);
  w.time_proj = init_linear(time_dim, channels, rng);
  w.csm = scan::init_csm_weights(channels, 2 * channels, config.state_dim, config.per_direction_s6, rng);
  if (config.separate_cascade_csm) {
    w.cascade_csm = scan::init_csm_weights(channels, 2 * channels, config.state_dim, config.per_direction_s6, rng);
  }
  return w;
}

SsLayerWeights init_ss_layer(std::size_t channels, std::size_t time_dim, const ModelConfig& config, Rng& rng) {
  SsLayerWeights w;
  w.resnet = init_resnet_block(channels, time_dim, rng);
  w.mss = init_mss_block(channels, time_dim, config, rng);
  return w;
}

ModelWeights init_model_weights(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t td = config.time_embed_dim;
  const std::size_t S = config.stages();
  ModelWeights w;
  w.time_embed.fc1 = init_linear(td, td, rng);
  w.time_embed.fc2 = init_linear(td, td, rng);
  w.stem = init_conv(config.in_channels, config.stage_width(0), 3, rng);
  for (std::size_t i = 0; i < S; ++i) {
    EncoderStageWeights stage;
    const std::size_t c = config.stage_width(i);
    for (std::size_t l = 0; l < config.layers_per_stage; ++l) stage.layers.push_back(init_ss_layer(c, td, config, rng));
    stage.norm = init_norm(c);
    const std::size_t next = i + 1 < S ? config.stage_width(i + 1) : c;
    stage.down = init_conv(c, next, 3, rng);
    w.encoder.push_back(std::move(stage));
  }
  w.bottleneck = init_ss_layer(config.stage_width(S - 1), td, config, rng);
  w.bottleneck_norm = init_norm(config.stage_width(S - 1));
  w.decoder.resize(S);
  for (std::size_t i = S; i-- > 0;) {
    DecoderStageWeights& stage = w.decoder[i];
    const std::size_t c = config.stage_width(i);
    const std::size_t incoming = i + 1 < S ? config.stage_width(i + 1) : c;
    stage.up = init_conv(incoming, c, 3, rng);
    stage.fuse = init_conv(2 * c, c, 1, rng);
    for (std::size_t l = 0; l < config.layers_per_stage; ++l) stage.layers.push_back(init_ss_layer(c, td, config, rng));
    stage.norm = init_norm(c);
  }
  const std::size_t c0 = config.stage_width(0);
  if (config.stem_downsample) w.final_up = init_conv(c0, c0, 3, rng);
  w.final_norm = init_norm(c0);
  w.final_conv = init_conv(c0, config.in_channels, 3, rng);
  return w;
}

ModelWeights zero_model_weights(const ModelConfig& config) {
  Rng rng(0);
  ModelWeights w = init_model_weights(config, rng);
  for (auto& [name, t] : named_parameters(w)) t->fill(0.0);
  return w;
}

void audit_shapes(const ModelWeights& weights, const ModelConfig& config) {
  const ModelWeights reference = zero_model_weights(config);
  const auto expected = named_parameters(reference);
  const auto actual = named_parameters(weights);
  if (expected.size() != actual.size()) {
    throw ShapeError("model has " + std::to_string(actual.size()) + " parameter tensors, config expects " +
                     std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].first != actual[i].first) {
      throw ShapeError("parameter " + actual[i].first + " where " + expected[i].first + " was expected");
    }
    if (expected[i].second->shape() != actual[i].second->shape()) {
      throw ShapeError("parameter " + actual[i].first + " has shape " + to_string(actual[i].second->shape()) +
                       ", expected " + to_string(expected[i].second->shape()));
    }
    if (!actual[i].second->all_finite()) throw ShapeError("parameter " + actual[i].first + " has non-finite values");
  }
}

Tensor sinusoidal_encoding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw DomainError("time embedding width must be even and positive");
  const std::size_t half = dim / 2;
  Tensor enc({dim});
  for (std::size_t k = 0; k < half; ++k) {
    const double freq =
        half == 1 ? 1.0 : std::pow(1e4, -static_cast<double>(k) / static_cast<double>(half - 1));
    enc[k] = std::sin(t * freq);
    enc[half + k] = std::cos(t * freq);
  }
  return enc;
}

ag::Var time_embedding(ag::Tape& tape, std::size_t t, const TimeEmbedWeights& weights) {
  const std::size_t dim = weights.fc1.weight.dim(1);
  ag::Var enc = tape.constant(sinusoidal_encoding(static_cast<double>(t), dim).reshaped({1, dim}));
  ag::Var h = ag::linear(enc, tape.param(weights.fc1.weight), tape.param(weights.fc1.bias));
  return ag::linear(ag::silu(h), tape.param(weights.fc2.weight), tape.param(weights.fc2.bias));
}

ag::Var resnet_block(ag::Var x, ag::Var t_emb, const ResnetBlockWeights& weights) {
  if (x.shape().size() != 3 || x.shape()[0] != weights.conv1.weight.dim(1)) {
    throw ShapeError("resnet_block: input " + to_string(x.shape()) + " for " +
                     std::to_string(weights.conv1.weight.dim(1)) + " channels");
  }
  ag::Var h = conv(norm_act(x, weights.norm1), weights.conv1, 1);
  h = ag::add_channel(h, time_bias(t_emb, weights.time_proj));
  h = conv(norm_act(h, weights.norm2), weights.conv2, 1);
  return ag::add(x, h);
}

ag::Var mss_block(ag::Var x, ag::Var t_emb, const MssBlockWeights& weights, ForwardContext& ctx) {
  if (x.shape().size() != 3 || x.shape()[0] != weights.conv.weight.dim(1)) {
    throw ShapeError("mss_block: input " + to_string(x.shape()) + " for " +
                     std::to_string(weights.conv.weight.dim(1)) + " channels");
  }
  ag::Var local = conv(norm_act(x, weights.norm), weights.conv, 1);
  local = ag::add_channel(local, time_bias(t_emb, weights.time_proj));
  const scan::CsmWeights& cascade = weights.cascade_csm.s6.empty() ? weights.csm : weights.cascade_csm;
  ag::Var global = scan::csm_forward(x, weights.csm, ctx.regen, ctx.rng);
  ag::Var mixed = scan::csm_forward(local, cascade, ctx.regen, ctx.rng);
  return ag::add(ag::add(x, local), ag::add(global, mixed));
}

ag::Var ss_layer(ag::Var x, ag::Var t_emb, const SsLayerWeights& weights, ForwardContext& ctx) {
  ag::Var y = mss_block(resnet_block(x, t_emb, weights.resnet), t_emb, weights.mss, ctx);
  return ag::add(x, y);
}

ag::Var unet_forward(ag::Var x_t, std::size_t t, const ModelWeights& weights, const ModelConfig& config,
                     ForwardContext& ctx, Tensor* encoder_out) {
  const Shape expected{config.in_channels, config.resolution, config.resolution};
  if (x_t.shape() != expected) {
    throw ShapeError("unet_forward: input " + to_string(x_t.shape()) + ", model expects " + to_string(expected));
  }
  ag::Tape& tape = x_t.tape();
  ag::Var t_emb = time_embedding(tape, t, weights.time_embed);

  ag::Var h = conv(x_t, weights.stem, config.stem_downsample ? 2 : 1);
  std::vector<ag::Var> skips;
  for (const auto& stage : weights.encoder) {
    for (const auto& layer : stage.layers) h = ss_layer(h, t_emb, layer, ctx);
    h = stage_norm(h, stage.norm);
    skips.push_back(h);
    h = conv(h, stage.down, 2);
  }
  if (encoder_out) *encoder_out = h.value();

  h = stage_norm(ss_layer(h, t_emb, weights.bottleneck, ctx), weights.bottleneck_norm);

  for (std::size_t i = weights.decoder.size(); i-- > 0;) {
    const auto& stage = weights.decoder[i];
    h = conv(ag::upsample_nearest2x(h), stage.up, 1);
    h = conv(ag::concat_channels(h, skips[i]), stage.fuse, 1);
    for (const auto& layer : stage.layers) h = ss_layer(h, t_emb, layer, ctx);
    h = stage_norm(h, stage.norm);
  }
  if (config.stem_downsample) h = conv(ag::upsample_nearest2x(h), weights.final_up, 1);
  return conv(norm_act(h, weights.final_norm), weights.final_conv, 1);
}

Tensor unet_forward(const Tensor& x_t, std::size_t t, const ModelWeights& weights, const ModelConfig& config,
                    ForwardContext& ctx, Tensor* encoder_out) {
  ag::Tape tape(false);
  return unet_forward(tape.constant(x_t), t, weights, config, ctx, encoder_out).value();
}

}  // namespace vmddpm::net
