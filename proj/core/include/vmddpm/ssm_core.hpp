#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "vmddpm/autograd.hpp"
#include "vmddpm/random.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::ssm {

/// Continuous diagonal state-space system h' = A h + B x, y = C h + D x.
///
/// Shapes: A (channels, state_dim), B and C (steps, state_dim) shared across
/// channels, D (channels). `steps == 1` means time-invariant.
struct ContinuousSsmParams {
  Tensor A;
  Tensor B;
  Tensor C;
  Tensor D;

  std::size_t channels() const { return A.dim(0); }
  std::size_t state_dim() const { return A.dim(1); }
  std::size_t steps() const { return B.dim(0); }
  void validate() const;
};

/// Zero-order-hold discretized system. A_bar and B_bar are
/// (steps, channels, state_dim); delta is (steps, channels).
struct DiscreteSsmParams {
  Tensor A_bar;
  Tensor B_bar;
  Tensor C;
  Tensor D;
  Tensor delta;

  std::size_t steps() const { return A_bar.dim(0); }
  std::size_t channels() const { return A_bar.dim(1); }
  std::size_t state_dim() const { return A_bar.dim(2); }
  bool time_invariant() const { return steps() == 1 && C.dim(0) == 1; }
};

/// (exp(x) - 1) / x, switching to its series below |x| = 1e-6.
double zoh_input_factor(double x);
/// d/dx of zoh_input_factor.
double zoh_input_factor_derivative(double x);

/// A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - 1) delta B.
/// `delta` is (steps, channels) and must be strictly positive; its step count
/// must match B's or either may be 1.
DiscreteSsmParams discretize(const ContinuousSsmParams& params, const Tensor& delta);

/// Reference sequential recurrence from a zero initial state:
///   h_t = A_bar_t h_{t-1} + B_bar_t u_t,  y_t = C_t h_t + D u_t.
/// `u` is (L, channels); params must have 1 or L steps.
Tensor selective_scan(const Tensor& u, const DiscreteSsmParams& params);

/// Convolution kernel (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar) per
/// channel, returned as (L, channels). Requires time-invariant params.
Tensor ssm_kernel(const DiscreteSsmParams& params, std::size_t length);

/// Causal convolution y_t = sum_j K_j u_{t-j} + D u_t. A kernel longer than
/// the sequence is truncated to the sequence length.
Tensor ssm_conv_apply(const Tensor& u, const Tensor& kernel, const Tensor& D);

/// Learnable parameters of one selective (S6) block.
struct S6Weights {
  Tensor in_proj;     ///< (inner, token)
  Tensor gate_proj;   ///< (inner, token)
  Tensor gate_bias;   ///< (inner)
  Tensor delta_proj;  ///< (inner, inner)
  Tensor delta_bias;  ///< (inner)
  Tensor B_proj;      ///< (state, inner)
  Tensor C_proj;      ///< (state, inner)
  Tensor A_log;       ///< (inner, state); A = -exp(A_log)
  Tensor D;           ///< (inner)
  Tensor out_proj;    ///< (token, inner)

  std::size_t token_dim() const { return in_proj.dim(1); }
  std::size_t inner_dim() const { return in_proj.dim(0); }
  std::size_t state_dim() const { return A_log.dim(1); }

  /// Throws ShapeError on any inconsistent projection shape.
  void validate() const;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "in_proj", self.in_proj);
    f(prefix + "gate_proj", self.gate_proj);
    f(prefix + "gate_bias", self.gate_bias);
    f(prefix + "delta_proj", self.delta_proj);
    f(prefix + "delta_bias", self.delta_bias);
    f(prefix + "B_proj", self.B_proj);
    f(prefix + "C_proj", self.C_proj);
    f(prefix + "A_log", self.A_log);
    f(prefix + "D", self.D);
    f(prefix + "out_proj", self.out_proj);
  }
};

/// All-zero weights of the given sizes (A_log = 0, i.e. A = -1).
S6Weights zero_s6_weights(std::size_t token_dim, std::size_t inner_dim, std::size_t state_dim);

/// Random initialisation: uniform fan-in projections, A_n = -(n + 1), D = 1,
/// and a step-size bias giving initial softplus steps in [1e-3, 1e-1].
S6Weights init_s6_weights(std::size_t token_dim, std::size_t inner_dim, std::size_t state_dim, Rng& rng);

/// Weights (inner = 2 * token_dim) for which s6_forward returns its input
/// bit-exactly: identity in/out projections, C = 0, D = 1/2 and a gate bias
/// whose silu is exactly 2, so every product along the path is exact.
S6Weights identity_s6_weights(std::size_t token_dim, std::size_t state_dim);

/// Differentiable fused discretize + scan. u, delta (L, inner); A (inner,
/// state); B, C (L, state); D (inner). Returns (L, inner).
ag::Var selective_scan_zoh(ag::Var u, ag::Var delta, ag::Var A, ag::Var B, ag::Var C, ag::Var D);

/// Selective scan block on a token sequence (L, token_dim) -> (L, token_dim).
ag::Var s6_forward(ag::Var tokens, const S6Weights& weights);
Tensor s6_forward(const Tensor& tokens, const S6Weights& weights);

}  // namespace vmddpm::ssm
