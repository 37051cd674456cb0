#include "vmddpm/ssm_core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "vmddpm/errors.hpp"
#include "vmddpm/scalar_math.hpp"

namespace vmddpm::ssm {
namespace {

constexpr double kSeriesThreshold = 1e-6;

std::size_t broadcast_steps(std::size_t a, std::size_t b, const char* what) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string(what) + ": step counts " + std::to_string(a) + " and " +
                   std::to_string(b) + " do not broadcast");
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(t.shape()));
  }
}

}  // namespace

void ContinuousSsmParams::validate() const {
  require_rank(A, 2, "A");
  require_rank(B, 2, "B");
  require_rank(C, 2, "C");
  require_rank(D, 1, "D");
  if (A.dim(0) < 1 || A.dim(1) < 1) throw ShapeError("state space needs channels >= 1 and state_dim >= 1");
  if (B.dim(1) != A.dim(1) || C.dim(1) != A.dim(1)) {
    throw ShapeError("B/C state dimension does not match A " + to_string(A.shape()));
  }
  if (D.dim(0) != A.dim(0)) throw ShapeError("D has " + std::to_string(D.dim(0)) + " channels");
  broadcast_steps(B.dim(0), C.dim(0), "B/C");
  for (double a : A.values()) {
    if (!std::isfinite(a) || a >= 0.0) {
      throw DomainError("state matrix entries must be finite and strictly negative, got " + std::to_string(a));
    }
  }
}

double zoh_input_factor(double x) {
  if (std::abs(x) < kSeriesThreshold) return 1.0 + x * (0.5 + x / 6.0);
  return std::expm1(x) / x;
}

double zoh_input_factor_derivative(double x) {
  if (std::abs(x) < kSeriesThreshold) return 0.5 + x / 3.0;
  return (std::exp(x) - zoh_input_factor(x)) / x;
}

DiscreteSsmParams discretize(const ContinuousSsmParams& params, const Tensor& delta) {
  params.validate();
  require_rank(delta, 2, "delta");
  const std::size_t ch = params.channels(), n = params.state_dim();
  if (delta.dim(1) != ch) {
    throw ShapeError("delta " + to_string(delta.shape()) + " for " + std::to_string(ch) + " channels");
  }
  for (double d : delta.values()) {
    if (!(d > 0.0) || !std::isfinite(d)) throw DomainError("step sizes must be finite and > 0, got " + std::to_string(d));
  }
  const std::size_t steps = broadcast_steps(delta.dim(0), params.B.dim(0), "delta/B");

  DiscreteSsmParams out;
  out.A_bar = Tensor({steps, ch, n});
  out.B_bar = Tensor({steps, ch, n});
  out.C = params.C;
  out.D = params.D;
  out.delta = Tensor({steps, ch});
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t td = delta.dim(0) == 1 ? 0 : t;
    const std::size_t tb = params.B.dim(0) == 1 ? 0 : t;
    for (std::size_t c = 0; c < ch; ++c) {
      const double dt = delta.at(td, c);
      out.delta.at(t, c) = dt;
      for (std::size_t k = 0; k < n; ++k) {
        const double x = dt * params.A.at(c, k);
        out.A_bar.at(t, c, k) = std::exp(x);
        out.B_bar.at(t, c, k) = zoh_input_factor(x) * dt * params.B.at(tb, k);
      }
    }
  }
  return out;
}

Tensor selective_scan(const Tensor& u, const DiscreteSsmParams& params) {
  require_rank(u, 2, "selective_scan input");
  const std::size_t L = u.dim(0), ch = params.channels(), n = params.state_dim();
  if (u.dim(1) != ch) {
    throw ShapeError("selective_scan: input " + to_string(u.shape()) + " vs " + std::to_string(ch) + " channels");
  }
  if (params.steps() != 1 && params.steps() != L) {
    throw ShapeError("selective_scan: params have " + std::to_string(params.steps()) +
                     " steps for a sequence of length " + std::to_string(L));
  }
  if (params.C.dim(0) != 1 && params.C.dim(0) != L) {
    throw ShapeError("selective_scan: C has " + std::to_string(params.C.dim(0)) + " steps, expected 1 or " +
                     std::to_string(L));
  }
  if (params.C.dim(1) != n || params.D.size() != ch) throw ShapeError("selective_scan: C/D shape mismatch");

  Tensor y({L, ch});
  std::vector<double> h(ch * n, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    const std::size_t tp = params.steps() == 1 ? 0 : t;
    const std::size_t tc = params.C.dim(0) == 1 ? 0 : t;
    for (std::size_t c = 0; c < ch; ++c) {
      const double ut = u.at(t, c);
      double acc = params.D[c] * ut;
      for (std::size_t k = 0; k < n; ++k) {
        double& hk = h[c * n + k];
        hk = params.A_bar.at(tp, c, k) * hk + params.B_bar.at(tp, c, k) * ut;
        acc += params.C.at(tc, k) * hk;
      }
      y.at(t, c) = acc;
    }
  }
  return y;
}

Tensor ssm_kernel(const DiscreteSsmParams& params, std::size_t length) {
  if (length < 1) throw DomainError("ssm_kernel: length must be >= 1");
  if (!params.time_invariant()) {
    throw ContractError("ssm_kernel: the convolution form needs time-invariant parameters");
  }
  const std::size_t ch = params.channels(), n = params.state_dim();
  Tensor kernel({length, ch});
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t k = 0; k < n; ++k) {
      const double a = params.A_bar.at(0, c, k);
      double power = params.B_bar.at(0, c, k) * params.C.at(0, k);
      for (std::size_t l = 0; l < length; ++l) {
        kernel.at(l, c) += power;
        power *= a;
      }
    }
  }
  return kernel;
}

Tensor ssm_conv_apply(const Tensor& u, const Tensor& kernel, const Tensor& D) {
  require_rank(u, 2, "ssm_conv_apply input");
  require_rank(kernel, 2, "ssm_conv_apply kernel");
  const std::size_t L = u.dim(0), ch = u.dim(1);
  if (kernel.dim(1) != ch || D.size() != ch) {
    throw ShapeError("ssm_conv_apply: kernel " + to_string(kernel.shape()) + " / D " + to_string(D.shape()) +
                     " vs input " + to_string(u.shape()));
  }
  const std::size_t taps = std::min(kernel.dim(0), L);
  Tensor y({L, ch});
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = D[c] * u.at(t, c);
      const std::size_t jmax = std::min(taps, t + 1);
      for (std::size_t j = 0; j < jmax; ++j) acc += kernel.at(j, c) * u.at(t - j, c);
      y.at(t, c) = acc;
    }
  }
  return y;
}

// ---------------------------------------------------------------- S6

void S6Weights::validate() const {
  const std::size_t tok = in_proj.rank() == 2 ? in_proj.dim(1) : 0;
  const std::size_t inner = in_proj.rank() == 2 ? in_proj.dim(0) : 0;
  const std::size_t state = A_log.rank() == 2 ? A_log.dim(1) : 0;
  if (tok == 0 || inner == 0 || state == 0) throw ShapeError("S6 weights: empty projection");
  require_shape(gate_proj, {inner, tok}, "S6 gate_proj");
  require_shape(gate_bias, {inner}, "S6 gate_bias");
  require_shape(delta_proj, {inner, inner}, "S6 delta_proj");
  require_shape(delta_bias, {inner}, "S6 delta_bias");
  require_shape(B_proj, {state, inner}, "S6 B_proj");
  require_shape(C_proj, {state, inner}, "S6 C_proj");
  require_shape(A_log, {inner, state}, "S6 A_log");
  require_shape(D, {inner}, "S6 D");
  require_shape(out_proj, {tok, inner}, "S6 out_proj");
}

S6Weights zero_s6_weights(std::size_t token_dim, std::size_t inner_dim, std::size_t state_dim) {
  S6Weights w;
  w.in_proj = Tensor({inner_dim, token_dim});
  w.gate_proj = Tensor({inner_dim, token_dim});
  w.gate_bias = Tensor({inner_dim});
  w.delta_proj = Tensor({inner_dim, inner_dim});
  w.delta_bias = Tensor({inner_dim});
  w.B_proj = Tensor({state_dim, inner_dim});
  w.C_proj = Tensor({state_dim, inner_dim});
  w.A_log = Tensor({inner_dim, state_dim});
  w.D = Tensor({inner_dim});
  w.out_proj = Tensor({token_dim, inner_dim});
  return w;
}

S6Weights init_s6_weights(std::size_t token_dim, std::size_t inner_dim, std::size_t state_dim, Rng& rng) {
  S6Weights w = zero_s6_weights(token_dim, inner_dim, state_dim);
  const double tok_bound = 1.0 / std::sqrt(static_cast<double>(token_dim));
  const double inner_bound = 1.0 / std::sqrt(static_cast<double>(inner_dim));
  w.in_proj = uniform_tensor(w.in_proj.shape(), -tok_bound, tok_bound, rng);
  w.gate_proj = uniform_tensor(w.gate_proj.shape(), -tok_bound, tok_bound, rng);
  w.delta_proj = uniform_tensor(w.delta_proj.shape(), -0.1 * inner_bound, 0.1 * inner_bound, rng);
  std::uniform_real_distribution<double> log_step(std::log(1e-3), std::log(1e-1));
  for (auto& b : w.delta_bias.values()) b = inverse_softplus(std::exp(log_step(rng)));
  w.B_proj = uniform_tensor(w.B_proj.shape(), -inner_bound, inner_bound, rng);
  w.C_proj = uniform_tensor(w.C_proj.shape(), -inner_bound, inner_bound, rng);
  for (std::size_t d = 0; d < inner_dim; ++d) {
    for (std::size_t k = 0; k < state_dim; ++k) w.A_log.at(d, k) = std::log(static_cast<double>(k + 1));
  }
  w.D.fill(1.0);
  w.out_proj = uniform_tensor(w.out_proj.shape(), -inner_bound, inner_bound, rng);
  return w;
}

namespace {

// Below this |x| the fused scan evaluates expm1(x)/x and its derivative by
// Taylor series; above it both come from exp(x) with a relative error of
// roughly eps/|x|.
constexpr double kBlockSeriesThreshold = 1e-2;

// a = exp(x), phi = expm1(x)/x over a whole block. This is the hot loop of
// every S6 call.
void zoh_block(const double* x, double* a, double* phi, std::size_t n) {
  exp_block(x, a, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    phi[i] = std::abs(v) < kBlockSeriesThreshold
                 ? 1.0 + v * (1.0 / 2 + v * (1.0 / 6 + v * (1.0 / 24 + v * (1.0 / 120 + v * (1.0 / 720 + v / 5040)))))
                 : (a[i] - 1.0) / v;
  }
}

double zoh_block_derivative(double x, double a, double phi) {
  if (std::abs(x) < kBlockSeriesThreshold) {
    return 1.0 / 2 + x * (1.0 / 3 + x * (1.0 / 8 + x * (1.0 / 30 + x * (1.0 / 144 + x / 840))));
  }
  return (a - phi) / x;
}

// Smallest double near the root of silu(b) = 2 whose silu is exactly 2.
double exact_gate_bias() {
  static const double bias = [] {
    double lo = 0.0, hi = 4.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (silu(mid) < 2.0 ? lo : hi) = mid;
    }
    double candidate = lo;
    for (int i = 0; i < 64; ++i) {
      if (silu(candidate) == 2.0) return candidate;
      candidate = std::nextafter(candidate, 4.0);
    }
    throw ContractError("no gate bias with silu exactly 2 near the root");
  }();
  return bias;
}

}  // namespace

S6Weights identity_s6_weights(std::size_t token_dim, std::size_t state_dim) {
  const std::size_t inner = 2 * token_dim;
  S6Weights w = zero_s6_weights(token_dim, inner, state_dim);
  for (std::size_t i = 0; i < token_dim; ++i) {
    w.in_proj.at(i, i) = 1.0;
    w.out_proj.at(i, i) = 1.0;
  }
  w.gate_bias.fill(exact_gate_bias());
  w.delta_bias.fill(inverse_softplus(0.01));
  w.D.fill(0.5);
  return w;
}

ag::Var selective_scan_zoh(ag::Var u, ag::Var delta, ag::Var A, ag::Var B, ag::Var C, ag::Var D) {
  const Tensor& uv = u.value();
  const Tensor& dv = delta.value();
  const Tensor& Av = A.value();
  const Tensor& Bv = B.value();
  const Tensor& Cv = C.value();
  const Tensor& Dv = D.value();
  require_rank(uv, 2, "selective_scan_zoh u");
  const std::size_t L = uv.dim(0), ch = uv.dim(1);
  require_rank(Av, 2, "selective_scan_zoh A");
  const std::size_t n = Av.dim(1);
  require_shape(dv, {L, ch}, "selective_scan_zoh delta");
  require_shape(Av, {ch, n}, "selective_scan_zoh A");
  require_shape(Bv, {L, n}, "selective_scan_zoh B");
  require_shape(Cv, {L, n}, "selective_scan_zoh C");
  require_shape(Dv, {ch}, "selective_scan_zoh D");

  // decay, factor and states are (L, ch, n); a row is one timestep.
  const std::size_t row = ch * n;
  Tensor decay({L, ch, n});
  Tensor factor({L, ch, n});
  Tensor states({L, ch, n});
  Tensor y({L, ch});
  {
    Tensor x({L, ch, n});
    double* xp = x.data();
    for (std::size_t tc = 0; tc < L * ch; ++tc) {
      const double dt = dv[tc];
      const double* a = Av.data() + (tc % ch) * n;
      for (std::size_t k = 0; k < n; ++k) xp[tc * n + k] = dt * a[k];
    }
    zoh_block(xp, decay.data(), factor.data(), x.size());
  }
  for (std::size_t t = 0; t < L; ++t) {
    const double* a = decay.data() + t * row;
    const double* phi = factor.data() + t * row;
    const double* prev = t > 0 ? states.data() + (t - 1) * row : nullptr;
    const double* b = Bv.data() + t * n;
    const double* c_t = Cv.data() + t * n;
    double* h = states.data() + t * row;
    for (std::size_t c = 0; c < ch; ++c) {
      const double ut = uv[t * ch + c];
      const double du = dv[t * ch + c] * ut;
      double acc = Dv[c] * ut;
      const std::size_t o = c * n;
      for (std::size_t k = 0; k < n; ++k) {
        h[o + k] = (prev ? a[o + k] * prev[o + k] : 0.0) + phi[o + k] * du * b[k];
        acc += c_t[k] * h[o + k];
      }
      y[t * ch + c] = acc;
    }
  }

  return u.tape().record(
      std::move(y), {u, delta, A, B, C, D},
      [u, delta, A, B, C, D, L, ch, n, decay = std::move(decay), factor = std::move(factor),
       states = std::move(states)](ag::Tape& tape, const Tensor& gy) {
        const Tensor& uv = u.value();
        const Tensor& dv = delta.value();
        const Tensor& Av = A.value();
        const Tensor& Bv = B.value();
        const Tensor& Cv = C.value();
        const Tensor& Dv = D.value();
        const std::size_t row = ch * n;
        Tensor gu({L, ch}), gdelta({L, ch}), gA({ch, n}), gB({L, n}), gC({L, n}), gD({ch});
        std::vector<double> carry(row, 0.0);
        for (std::size_t t = L; t-- > 0;) {
          const double* a_t = decay.data() + t * row;
          const double* phi_t = factor.data() + t * row;
          const double* h_t = states.data() + t * row;
          const double* prev_t = t > 0 ? states.data() + (t - 1) * row : nullptr;
          const double* b = Bv.data() + t * n;
          const double* c_t = Cv.data() + t * n;
          double* gb = gB.data() + t * n;
          double* gc = gC.data() + t * n;
          for (std::size_t c = 0; c < ch; ++c) {
            const double g_out = gy[t * ch + c];
            const double dt = dv[t * ch + c];
            const double ut = uv[t * ch + c];
            double g_u = g_out * Dv[c];
            gD[c] += g_out * ut;
            double g_dt = 0.0;
            const std::size_t o = c * n;
            const double* a_coef = Av.data() + o;
            double* ga = gA.data() + o;
            for (std::size_t k = 0; k < n; ++k) {
              const double h = h_t[o + k];
              gc[k] += g_out * h;
              const double g_h = g_out * c_t[k] + carry[o + k];
              const double a = a_t[o + k];
              const double phi = phi_t[o + k];
              const double prev = prev_t ? prev_t[o + k] : 0.0;
              const double x = dt * a_coef[k];
              const double dphi = zoh_block_derivative(x, a, phi);
              const double g_a = g_h * prev;
              const double g_bbar = g_h * ut;
              g_u += g_h * phi * dt * b[k];
              carry[o + k] = g_h * a;
              g_dt += g_a * a * a_coef[k] + g_bbar * b[k] * (phi + x * dphi);
              ga[k] += g_a * a * dt + g_bbar * b[k] * dt * dt * dphi;
              gb[k] += g_bbar * phi * dt;
            }
            gu[t * ch + c] += g_u;
            gdelta[t * ch + c] += g_dt;
          }
        }
        const std::pair<ag::Var, Tensor*> grads[] = {{u, &gu}, {delta, &gdelta}, {A, &gA},
                                                     {B, &gB}, {C, &gC},         {D, &gD}};
        for (const auto& [var, g] : grads) {
          if (!tape.requires_grad(var)) continue;
          Tensor& dst = tape.grad_buffer(var);
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += (*g)[i];
        }
      });
}

ag::Var s6_forward(ag::Var tokens, const S6Weights& weights) {
  weights.validate();
  const Shape& s = tokens.shape();
  if (s.size() != 2 || s[1] != weights.token_dim()) {
    throw ShapeError("s6_forward: tokens " + to_string(s) + " for token_dim " + std::to_string(weights.token_dim()));
  }
  if (s[0] < 1) throw ShapeError("s6_forward: empty sequence");
  ag::Tape& t = tokens.tape();
  ag::Var x = ag::linear(tokens, t.param(weights.in_proj));
  ag::Var z = ag::linear(tokens, t.param(weights.gate_proj), t.param(weights.gate_bias));
  ag::Var delta = ag::softplus(ag::linear(x, t.param(weights.delta_proj), t.param(weights.delta_bias)));
  ag::Var B = ag::linear(x, t.param(weights.B_proj));
  ag::Var C = ag::linear(x, t.param(weights.C_proj));
  ag::Var A = ag::neg_exp(t.param(weights.A_log));
  ag::Var y = selective_scan_zoh(x, delta, A, B, C, t.param(weights.D));
  return ag::linear(ag::mul(y, ag::silu(z)), t.param(weights.out_proj));
}

Tensor s6_forward(const Tensor& tokens, const S6Weights& weights) {
  ag::Tape tape(false);
  return s6_forward(tape.constant(tokens), weights).value();
}

}  // namespace vmddpm::ssm
