#include "vmddpm/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "vmddpm/errors.hpp"
#include "vmddpm/scalar_math.hpp"

namespace vmddpm::ag {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_rank(Var a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

template <class F>
Var unary(Var a, F&& f, Tape::BackwardFn backward) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(std::move(y), {a}, std::move(backward));
}

}  // namespace

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = record_;
  return push(std::move(n));
}

Var Tape::param(const Tensor& external) {
  if (auto it = params_.find(&external); it != params_.end()) return Var(this, it->second);
  Node n;
  n.external = &external;
  n.requires_grad = record_;
  Var v = push(std::move(n));
  params_.emplace(&external, v.id());
  return v;
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.external ? *n.external : n.owned;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  if (record_) {
    for (Var in : inputs) {
      if (nodes_[in.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Tensor(value(v).shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) {
    throw ShapeError("backward() without a seed needs a single-element root, got " +
                     to_string(root.shape()));
  }
  backward(root, Tensor(root.shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
  require_shape(seed, root.shape(), "backward seed");
  if (!nodes_[root.id()].requires_grad) return;
  Tensor& g = grad_buffer(root);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

const Tensor* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.has_grad ? &n.grad : nullptr;
}

const Tensor* Tape::grad_of(const Tensor& param) const {
  auto it = params_.find(&param);
  if (it == params_.end()) return nullptr;
  return grad(Var(const_cast<Tape*>(this), it->second));
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  const Tensor& x1 = a.value();
  const Tensor& x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] + x2[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor y(a.shape());
  const Tensor& x1 = a.value();
  const Tensor& x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] - x2[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  const Tensor& x1 = a.value();
  const Tensor& x2 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x1[i] * x2[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& x1 = a.value();
    const Tensor& x2 = b.value();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * x2[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x1[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var silu(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  silu_block(x.data(), y.data(), x.size());
  return a.tape().record(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor s(x.shape());
    sigmoid_block(x.data(), s.data(), x.size());
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 + x[i] * (1.0 - s[i]));
  });
}

Var softplus(Var a) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  softplus_block(x.data(), y.data(), x.size());
  return a.tape().record(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor s(x.shape());
    sigmoid_block(x.data(), s.data(), x.size());
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i];
  });
}

Var neg_exp(Var a) {
  return unary(a, [](double x) { return -std::exp(x); }, [a](Tape& t, const Tensor& g) {
    const Tensor& x = a.value();
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * std::exp(x[i]);
  });
}

// ---------------------------------------------------------------- shapes

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(y), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_channel(Var x, Var v) {
  const Tensor& xv = x.value();
  const Tensor& vv = v.value();
  if (xv.rank() < 1 || vv.rank() != 1 || vv.dim(0) != xv.dim(0)) {
    throw ShapeError("add_channel: cannot broadcast " + to_string(vv.shape()) + " over " +
                     to_string(xv.shape()));
  }
  const std::size_t channels = xv.dim(0);
  const std::size_t inner = xv.size() / channels;
  Tensor y = xv;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < inner; ++i) y[c * inner + i] += vv[c];
  }
  return x.tape().record(std::move(y), {x, v}, [x, v, channels, inner](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) {
      Tensor& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(v)) {
      Tensor& gv = t.grad_buffer(v);
      for (std::size_t c = 0; c < channels; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < inner; ++i) s += g[c * inner + i];
        gv[c] += s;
      }
    }
  });
}

Var concat_channels(Var a, Var b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  const Tensor& xa = a.value();
  const Tensor& xb = b.value();
  if (xa.dim(1) != xb.dim(1) || xa.dim(2) != xb.dim(2)) {
    throw ShapeError("concat_channels: spatial mismatch " + to_string(xa.shape()) + " vs " +
                     to_string(xb.shape()));
  }
  Tensor y({xa.dim(0) + xb.dim(0), xa.dim(1), xa.dim(2)});
  std::copy(xa.storage().begin(), xa.storage().end(), y.storage().begin());
  std::copy(xb.storage().begin(), xb.storage().end(), y.storage().begin() + static_cast<long>(xa.size()));
  const std::size_t split = xa.size();
  return a.tape().record(std::move(y), {a, b}, [a, b, split](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
}

Var to_tokens(Var x) {
  require_rank(x, 3, "to_tokens");
  const Tensor& xv = x.value();
  const std::size_t c = xv.dim(0), n = xv.dim(1) * xv.dim(2);
  Tensor y({n, c});
  MapR(y.data(), static_cast<long>(n), static_cast<long>(c)) =
      CMapR(xv.data(), static_cast<long>(c), static_cast<long>(n)).transpose();
  return x.tape().record(std::move(y), {x}, [x, c, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    MapR(gx.data(), static_cast<long>(c), static_cast<long>(n)) +=
        CMapR(g.data(), static_cast<long>(n), static_cast<long>(c)).transpose();
  });
}

Var from_tokens(Var tokens, std::size_t height, std::size_t width) {
  require_rank(tokens, 2, "from_tokens");
  const Tensor& tv = tokens.value();
  const std::size_t n = tv.dim(0), c = tv.dim(1);
  if (n != height * width) {
    throw ShapeError("from_tokens: " + std::to_string(n) + " tokens for a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  Tensor y({c, height, width});
  MapR(y.data(), static_cast<long>(c), static_cast<long>(n)) =
      CMapR(tv.data(), static_cast<long>(n), static_cast<long>(c)).transpose();
  return tokens.tape().record(std::move(y), {tokens}, [tokens, c, n](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_buffer(tokens);
    MapR(gt.data(), static_cast<long>(n), static_cast<long>(c)) +=
        CMapR(g.data(), static_cast<long>(c), static_cast<long>(n)).transpose();
  });
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  require_rank(x, 2, "gather_rows");
  const Tensor& xv = x.value();
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor y({index.size(), cols});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data() + index[i] * cols, cols, y.data() + i * cols);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.tape().record(std::move(y), {x}, [x, idx = std::move(idx), cols](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gx.data() + idx[i] * cols;
      const double* src = g.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------- layers

Var linear(Var x, Var w) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear weight");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const long L = static_cast<long>(xv.dim(0)), in = static_cast<long>(xv.dim(1));
  const long out = static_cast<long>(wv.dim(0));
  if (static_cast<long>(wv.dim(1)) != in) {
    throw ShapeError("linear: input " + to_string(xv.shape()) + " vs weight " + to_string(wv.shape()));
  }
  Tensor y({static_cast<std::size_t>(L), static_cast<std::size_t>(out)});
  MapR(y.data(), L, out).noalias() = CMapR(xv.data(), L, in) * CMapR(wv.data(), out, in).transpose();
  return x.tape().record(std::move(y), {x, w}, [x, w, L, in, out](Tape& t, const Tensor& g) {
    CMapR G(g.data(), L, out);
    if (t.requires_grad(x)) {
      MapR(t.grad_buffer(x).data(), L, in).noalias() += G * CMapR(w.value().data(), out, in);
    }
    if (t.requires_grad(w)) {
      MapR(t.grad_buffer(w).data(), out, in).noalias() += G.transpose() * CMapR(x.value().data(), L, in);
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Var y = linear(x, w);
  const Tensor& bv = b.value();
  const std::size_t L = y.shape()[0], out = y.shape()[1];
  if (bv.rank() != 1 || bv.dim(0) != out) {
    throw ShapeError("linear: bias " + to_string(bv.shape()) + " for " + std::to_string(out) + " outputs");
  }
  Tensor z = y.value();
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < out; ++j) z[i * out + j] += bv[j];
  }
  return x.tape().record(std::move(z), {y, b}, [y, b, L, out](Tape& t, const Tensor& g) {
    if (t.requires_grad(y)) {
      Tensor& gy = t.grad_buffer(y);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < out; ++j) gb[j] += g[i * out + j];
      }
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] =
                inside ? x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            x[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d weight");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const std::size_t cout = wv.dim(0);
  if (wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3)) {
    throw ShapeError("conv2d: input " + to_string(xv.shape()) + " vs weight " + to_string(wv.shape()));
  }
  if (b.value().shape() != Shape{cout}) {
    throw ShapeError("conv2d: bias " + to_string(b.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), wv.dim(2), stride, pad, 0, 0};
  if (xv.dim(1) + 2 * pad < geo.k || xv.dim(2) + 2 * pad < geo.k) {
    throw ShapeError("conv2d: kernel larger than padded input " + to_string(xv.shape()));
  }
  geo.ho = (geo.h + 2 * pad - geo.k) / stride + 1;
  geo.wo = (geo.w + 2 * pad - geo.k) / stride + 1;

  const long K = static_cast<long>(geo.rows()), P = static_cast<long>(geo.cols());
  const long Co = static_cast<long>(cout);
  Tensor cols;
  if (!geo.pointwise()) {
    cols = Tensor({geo.rows(), geo.cols()});
    im2col(xv.data(), geo, cols.data());
  }
  const double* colp = geo.pointwise() ? xv.data() : cols.data();

  Tensor y({cout, geo.ho, geo.wo});
  MapR Y(y.data(), Co, P);
  Y.noalias() = CMapR(wv.data(), Co, K) * CMapR(colp, K, P);
  const Tensor& bv = b.value();
  for (long c = 0; c < Co; ++c) Y.row(c).array() += bv[static_cast<std::size_t>(c)];

  return x.tape().record(
      std::move(y), {x, w, b},
      [x, w, b, geo, cols = std::move(cols), K, P, Co](Tape& t, const Tensor& g) {
        CMapR G(g.data(), Co, P);
        const double* colp = geo.pointwise() ? x.value().data() : cols.data();
        if (t.requires_grad(w)) {
          MapR(t.grad_buffer(w).data(), Co, K).noalias() += G * CMapR(colp, K, P).transpose();
        }
        if (t.requires_grad(b)) {
          Tensor& gb = t.grad_buffer(b);
          for (long c = 0; c < Co; ++c) gb[static_cast<std::size_t>(c)] += G.row(c).sum();
        }
        if (t.requires_grad(x)) {
          Tensor& gx = t.grad_buffer(x);
          if (geo.pointwise()) {
            MapR(gx.data(), K, P).noalias() += CMapR(w.value().data(), Co, K).transpose() * G;
          } else {
            MatR gcols = CMapR(w.value().data(), Co, K).transpose() * G;
            col2im_add(gcols.data(), geo, gx.data());
          }
        }
      });
}

Var group_norm(Var x, Var gamma, Var beta, std::size_t groups, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("group_norm: needs (C, ...) input, got " + to_string(xv.shape()));
  const std::size_t channels = xv.dim(0);
  if (groups == 0 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  require_shape(gamma.value(), {channels}, "group_norm gamma");
  require_shape(beta.value(), {channels}, "group_norm beta");
  const std::size_t spatial = xv.size() / channels;
  const std::size_t per_group = channels / groups;
  const std::size_t count = per_group * spatial;

  Tensor xhat(xv.shape());
  std::vector<double> rstd(groups);
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t begin = grp * count;
    double mean = 0.0;
    for (std::size_t i = 0; i < count; ++i) mean += xv[begin + i];
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double d = xv[begin + i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(count);
    rstd[grp] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t idx = begin + i;
      const std::size_t c = idx / spatial;
      xhat[idx] = (xv[idx] - mean) * rstd[grp];
      y[idx] = gv[c] * xhat[idx] + bv[c];
    }
  }
  return x.tape().record(
      std::move(y), {x, gamma, beta},
      [x, gamma, beta, groups, spatial, count, xhat = std::move(xhat), rstd = std::move(rstd)](
          Tape& t, const Tensor& g) {
        const Tensor& gv = gamma.value();
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          Tensor* gg = t.requires_grad(gamma) ? &t.grad_buffer(gamma) : nullptr;
          Tensor* gb = t.requires_grad(beta) ? &t.grad_buffer(beta) : nullptr;
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t c = i / spatial;
            if (gg) (*gg)[c] += g[i] * xhat[i];
            if (gb) (*gb)[c] += g[i];
          }
        }
        if (!t.requires_grad(x)) return;
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t grp = 0; grp < groups; ++grp) {
          const std::size_t begin = grp * count;
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t idx = begin + i;
            const double gh = g[idx] * gv[idx / spatial];
            mean_g += gh;
            mean_gx += gh * xhat[idx];
          }
          mean_g /= static_cast<double>(count);
          mean_gx /= static_cast<double>(count);
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t idx = begin + i;
            const double gh = g[idx] * gv[idx / spatial];
            gx[idx] += rstd[grp] * (gh - mean_g - xhat[idx] * mean_gx);
          }
        }
      });
}

Var upsample_nearest2x(Var x) {
  require_rank(x, 3, "upsample_nearest2x");
  const Tensor& xv = x.value();
  const std::size_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor y({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) y.at(ch, i, j) = xv.at(ch, i / 2, j / 2);
    }
  }
  return x.tape().record(std::move(y), {x}, [x, c, h, w](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < 2 * h; ++i) {
        for (std::size_t j = 0; j < 2 * w; ++j) gx.at(ch, i / 2, j / 2) += g.at(ch, i, j);
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var mse(Var a, Var b) {
  require_same_shape(a, b, "mse");
  const Tensor& x1 = a.value();
  const Tensor& x2 = b.value();
  const double n = static_cast<double>(x1.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x1.size(); ++i) {
    const double d = x1[i] - x2[i];
    s += d * d;
  }
  return a.tape().record(Tensor::scalar(s / n), {a, b}, [a, b, n](Tape& t, const Tensor& g) {
    const Tensor& x1 = a.value();
    const Tensor& x2 = b.value();
    const double k = 2.0 * g[0] / n;
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < x1.size(); ++i) ga[i] += k * (x1[i] - x2[i]);
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < x1.size(); ++i) gb[i] -= k * (x1[i] - x2[i]);
    }
  });
}

}  // namespace vmddpm::ag
