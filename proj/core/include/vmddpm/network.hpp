#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vmddpm/autograd.hpp"
#include "vmddpm/cross_scan.hpp"
#include "vmddpm/random.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::net {

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t base_width = 32;
  std::vector<std::size_t> channel_multipliers{1, 2, 4, 8};
  std::size_t layers_per_stage = 2;
  std::size_t state_dim = 16;
  std::size_t time_embed_dim = 128;
  /// Stride-2 stem in front of the stages, so four stages reach /32.
  bool stem_downsample = true;
  std::size_t resolution = 128;
  /// One S6 weight set per scan direction instead of a shared one.
  bool per_direction_s6 = false;
  /// Separate CSM weights for the cascaded CNN -> CSM path of the MSSBlock.
  bool separate_cascade_csm = false;

  /// Throws ConfigError when the configuration cannot build a network.
  void validate() const;

  std::size_t stages() const noexcept { return channel_multipliers.size(); }
  std::size_t stage_width(std::size_t stage) const { return base_width * channel_multipliers.at(stage); }
  std::size_t downsample_factor() const noexcept {
    return std::size_t{1} << (stages() + (stem_downsample ? 1 : 0));
  }
  /// Channels and spatial size after the encoder.
  Shape encoder_output_shape() const;
};

/// Largest divisor of `channels` not exceeding 8.
std::size_t norm_groups(std::size_t channels);

struct LinearWeights {
  Tensor weight;  ///< (out, in)
  Tensor bias;    ///< (out)
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

struct ConvWeights {
  Tensor weight;  ///< (out, in, k, k)
  Tensor bias;    ///< (out)
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

struct NormWeights {
  Tensor gamma;
  Tensor beta;
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "gamma", self.gamma);
    f(prefix + "beta", self.beta);
  }
};

struct TimeEmbedWeights {
  LinearWeights fc1;
  LinearWeights fc2;
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LinearWeights::visit(self.fc1, prefix + "fc1.", f);
    LinearWeights::visit(self.fc2, prefix + "fc2.", f);
  }
};

struct ResnetBlockWeights {
  NormWeights norm1;
  ConvWeights conv1;
  LinearWeights time_proj;
  NormWeights norm2;
  ConvWeights conv2;
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    NormWeights::visit(self.norm1, prefix + "norm1.", f);
    ConvWeights::visit(self.conv1, prefix + "conv1.", f);
    LinearWeights::visit(self.time_proj, prefix + "time_proj.", f);
    NormWeights::visit(self.norm2, prefix + "norm2.", f);
    ConvWeights::visit(self.conv2, prefix + "conv2.", f);
  }
};

struct MssBlockWeights {
  NormWeights norm;       ///< CNN path
  ConvWeights conv;       ///< CNN path
  LinearWeights time_proj;
  scan::CsmWeights csm;
  /// Only populated with ModelConfig::separate_cascade_csm.
  scan::CsmWeights cascade_csm;
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    NormWeights::visit(self.norm, prefix + "norm.", f);
    ConvWeights::visit(self.conv, prefix + "conv.", f);
    LinearWeights::visit(self.time_proj, prefix + "time_proj.", f);
    scan::CsmWeights::visit(self.csm, prefix + "csm.", f);
    scan::CsmWeights::visit(self.cascade_csm, prefix + "cascade_csm.", f);
  }
};

struct SsLayerWeights {
  ResnetBlockWeights resnet;
  MssBlockWeights mss;
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    ResnetBlockWeights::visit(self.resnet, prefix + "resnet.", f);
    MssBlockWeights::visit(self.mss, prefix + "mss.", f);
  }
};

struct EncoderStageWeights {
  std::vector<SsLayerWeights> layers;
  NormWeights norm;  ///< after the layers, before the skip is taken
  ConvWeights down;  ///< 3x3 stride 2
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      SsLayerWeights::visit(self.layers[i], prefix + "layers." + std::to_string(i) + ".", f);
    }
    NormWeights::visit(self.norm, prefix + "norm.", f);
    ConvWeights::visit(self.down, prefix + "down.", f);
  }
};

struct DecoderStageWeights {
  ConvWeights up;    ///< 3x3 after nearest x2
  ConvWeights fuse;  ///< 1x1 over [upsampled, skip]
  std::vector<SsLayerWeights> layers;
  NormWeights norm;  ///< after the layers
  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    ConvWeights::visit(self.up, prefix + "up.", f);
    ConvWeights::visit(self.fuse, prefix + "fuse.", f);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      SsLayerWeights::visit(self.layers[i], prefix + "layers." + std::to_string(i) + ".", f);
    }
    NormWeights::visit(self.norm, prefix + "norm.", f);
  }
};

struct ModelWeights {
  TimeEmbedWeights time_embed;
  ConvWeights stem;
  std::vector<EncoderStageWeights> encoder;
  SsLayerWeights bottleneck;
  NormWeights bottleneck_norm;
  std::vector<DecoderStageWeights> decoder;  ///< indexed by the stage it mirrors
  ConvWeights final_up;                      ///< only with stem_downsample
  NormWeights final_norm;
  ConvWeights final_conv;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    TimeEmbedWeights::visit(self.time_embed, "time_embed.", f);
    ConvWeights::visit(self.stem, "stem.", f);
    for (std::size_t i = 0; i < self.encoder.size(); ++i) {
      EncoderStageWeights::visit(self.encoder[i], "encoder." + std::to_string(i) + ".", f);
    }
    SsLayerWeights::visit(self.bottleneck, "bottleneck.", f);
    NormWeights::visit(self.bottleneck_norm, "bottleneck_norm.", f);
    for (std::size_t i = 0; i < self.decoder.size(); ++i) {
      DecoderStageWeights::visit(self.decoder[i], "decoder." + std::to_string(i) + ".", f);
    }
    ConvWeights::visit(self.final_up, "final_up.", f);
    NormWeights::visit(self.final_norm, "final_norm.", f);
    ConvWeights::visit(self.final_conv, "final_conv.", f);
  }
};

/// Every non-empty parameter tensor with its dotted name, in a fixed order.
std::vector<std::pair<std::string, Tensor*>> named_parameters(ModelWeights& weights);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const ModelWeights& weights);
std::size_t parameter_count(const ModelWeights& weights);

ModelWeights init_model_weights(const ModelConfig& config, Rng& rng);
/// Same structure, every tensor zero (GroupNorm gammas included).
ModelWeights zero_model_weights(const ModelConfig& config);
/// Throws ShapeError unless names and shapes match what `config` builds and
/// every value is finite.
void audit_shapes(const ModelWeights& weights, const ModelConfig& config);

ResnetBlockWeights init_resnet_block(std::size_t channels, std::size_t time_dim, Rng& rng);
MssBlockWeights init_mss_block(std::size_t channels, std::size_t time_dim, const ModelConfig& config, Rng& rng);
SsLayerWeights init_ss_layer(std::size_t channels, std::size_t time_dim, const ModelConfig& config, Rng& rng);

/// Randomness and regeneration switch threaded through a forward pass.
struct ForwardContext {
  Rng& rng;
  bool regen = true;
};

/// Sinusoidal encoding (sin(t f_0..), cos(t f_0..)) at dim/2 frequencies
/// spaced geometrically from 1 down to 1e-4.
Tensor sinusoidal_encoding(double t, std::size_t dim);

/// Encoding followed by Linear -> SiLU -> Linear; returns (1, dim).
ag::Var time_embedding(ag::Tape& tape, std::size_t t, const TimeEmbedWeights& weights);

ag::Var resnet_block(ag::Var x, ag::Var t_emb, const ResnetBlockWeights& weights);
/// x + f(x) + g(x) + g(f(x)) with f the time-conditioned CNN path and g the
/// cross-scan module.
ag::Var mss_block(ag::Var x, ag::Var t_emb, const MssBlockWeights& weights, ForwardContext& ctx);
ag::Var ss_layer(ag::Var x, ag::Var t_emb, const SsLayerWeights& weights, ForwardContext& ctx);

/// Noise prediction for one image (in_channels, R, R) at timestep t. When
/// `encoder_out` is non-null it receives the encoder's output tensor.
ag::Var unet_forward(ag::Var x_t, std::size_t t, const ModelWeights& weights, const ModelConfig& config,
                     ForwardContext& ctx, Tensor* encoder_out = nullptr);
Tensor unet_forward(const Tensor& x_t, std::size_t t, const ModelWeights& weights, const ModelConfig& config,
                    ForwardContext& ctx, Tensor* encoder_out = nullptr);

}  // namespace vmddpm::net
