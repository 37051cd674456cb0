#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "vmddpm/tensor.hpp"

// Tape-based reverse-mode differentiation over coarse tensor operations.
//
// A Tape owns every intermediate value of one forward pass. Parameters are
// bound by address through Tape::param(), so the same weight tensor used in
// several places maps to one node and its gradient accumulates there. A tape
// constructed with record=false builds values only (inference mode).
//
// Tapes are single-threaded; run concurrent forward passes on separate tapes.

namespace vmddpm::ag {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var constant(Tensor value);
  /// Owned leaf that receives a gradient.
  Var variable(Tensor value);
  /// Leaf that references caller-owned storage (which must outlive the tape).
  Var param(const Tensor& external);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  /// Adds an op output. The backward function is kept only when recording
  /// and at least one input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Gradient accumulator for `v`, zero-initialised on first access.
  Tensor& grad_buffer(Var v);

  /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  /// nullptr when no gradient reached the node.
  const Tensor* grad(Var v) const;
  const Tensor* grad_of(const Tensor& param) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, int> params_;
  bool record_;
};

// Elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var silu(Var a);
Var softplus(Var a);
/// -exp(a), used to recover a strictly negative state matrix from its log.
Var neg_exp(Var a);

// Shape manipulation
Var reshape(Var a, Shape shape);
/// x (C, H, W) plus v (C) broadcast over the trailing dimensions.
Var add_channel(Var x, Var v);
Var concat_channels(Var a, Var b);
/// (C, H, W) -> (H*W, C), one token per spatial position in row-major order.
Var to_tokens(Var x);
/// (H*W, C) -> (C, H, W).
Var from_tokens(Var tokens, std::size_t height, std::size_t width);
/// out[i] = x[index[i]] row-wise; the adjoint scatters back.
Var gather_rows(Var x, std::span<const std::size_t> index);

// Dense layers
/// x (L, in), w (out, in) -> (L, out).
Var linear(Var x, Var w);
Var linear(Var x, Var w, Var b);
/// x (Cin, H, W), w (Cout, Cin, k, k), b (Cout). Square kernel, symmetric padding.
Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);
Var group_norm(Var x, Var gamma, Var beta, std::size_t groups, double eps = 1e-5);
Var upsample_nearest2x(Var x);

// Reductions
Var sum(Var a);
/// mean((a - b)^2) as a single-element tensor.
Var mse(Var a, Var b);

}  // namespace vmddpm::ag
