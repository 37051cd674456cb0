#include "vmddpm/cross_scan.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>

#include "vmddpm/errors.hpp"

namespace vmddpm::scan {
namespace {

std::atomic<std::uint64_t> g_regenerations{0};

std::vector<std::size_t> invert(const std::vector<std::size_t>& forward) {
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) inverse[forward[i]] = i;
  return inverse;
}

void require_map(const Tensor& x, const char* what) {
  if (x.rank() != 3 || x.dim(1) * x.dim(2) == 0) {
    throw ShapeError(std::string(what) + ": expected a non-empty (channels, H, W) map, got " + to_string(x.shape()));
  }
}

}  // namespace

Permutation Permutation::identity(std::size_t n) {
  Permutation p;
  p.forward.resize(n);
  std::iota(p.forward.begin(), p.forward.end(), std::size_t{0});
  p.inverse = p.forward;
  return p;
}

Permutation Permutation::from_forward(std::vector<std::size_t> forward) {
  std::vector<bool> seen(forward.size(), false);
  for (std::size_t v : forward) {
    if (v >= forward.size() || seen[v]) throw DomainError("permutation is not a bijection");
    seen[v] = true;
  }
  Permutation p;
  p.inverse = invert(forward);
  p.forward = std::move(forward);
  return p;
}

bool Permutation::is_identity() const {
  for (std::size_t i = 0; i < forward.size(); ++i) {
    if (forward[i] != i) return false;
  }
  return true;
}

Permutation regenerate_permutation(std::size_t n, Rng& rng) {
  if (n == 0) throw DomainError("regenerate_permutation: n must be >= 1");
  g_regenerations.fetch_add(1, std::memory_order_relaxed);
  std::vector<std::size_t> forward(n);
  std::iota(forward.begin(), forward.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(forward[i], forward[pick(rng)]);
  }
  Permutation p;
  p.inverse = invert(forward);
  p.forward = std::move(forward);
  return p;
}

std::uint64_t regeneration_count() { return g_regenerations.load(std::memory_order_relaxed); }

std::array<std::vector<std::size_t>, kDirections> scan_orders(std::size_t height, std::size_t width,
                                                              const Permutation& perm) {
  const std::size_t n = height * width;
  if (perm.size() != n) {
    throw ShapeError("scan permutation has length " + std::to_string(perm.size()) + ", grid has " +
                     std::to_string(n) + " tokens");
  }
  // Positions in the permuted row-major list.
  std::vector<std::size_t> row(n), col(n);
  std::iota(row.begin(), row.end(), std::size_t{0});
  std::size_t i = 0;
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t r = 0; r < height; ++r) col[i++] = r * width + c;
  }
  std::array<std::vector<std::size_t>, kDirections> orders{row, row, col, col};
  std::reverse(orders[1].begin(), orders[1].end());
  std::reverse(orders[3].begin(), orders[3].end());
  for (auto& order : orders) {
    for (auto& idx : order) idx = perm.forward[idx];
  }
  return orders;
}

ScanBundle scan_expand(const Tensor& feature_map, const std::optional<Permutation>& perm) {
  require_map(feature_map, "scan_expand");
  const std::size_t c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  const std::size_t n = h * w;
  const Permutation& p = perm ? *perm : Permutation::identity(n);
  const auto orders = scan_orders(h, w, p);

  ScanBundle bundle;
  bundle.height = h;
  bundle.width = w;
  bundle.regen_perm = perm;
  for (std::size_t k = 0; k < kDirections; ++k) {
    Tensor seq({n, c});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) seq.at(i, ch) = feature_map[ch * n + orders[k][i]];
    }
    bundle.sequences[k] = std::move(seq);
  }
  return bundle;
}

Tensor scan_merge(const ScanBundle& bundle, const std::array<Tensor, kDirections>& processed) {
  const std::size_t n = bundle.height * bundle.width;
  if (n == 0) throw ShapeError("scan_merge: empty bundle");
  const std::size_t c = processed[0].rank() == 2 ? processed[0].dim(1) : 0;
  for (const Tensor& seq : processed) require_shape(seq, {n, c}, "scan_merge sequence");
  const Permutation& p = bundle.regen_perm ? *bundle.regen_perm : Permutation::identity(n);
  const auto orders = scan_orders(bundle.height, bundle.width, p);

  std::array<Tensor, kDirections> aligned;
  for (std::size_t k = 0; k < kDirections; ++k) {
    aligned[k] = Tensor({c, bundle.height, bundle.width});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) aligned[k][ch * n + orders[k][i]] = processed[k].at(i, ch);
    }
  }
  Tensor out({c, bundle.height, bundle.width});
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (aligned[0][i] + aligned[1][i]) + (aligned[2][i] + aligned[3][i]);
  }
  return out;
}

CsmWeights init_csm_weights(std::size_t channels, std::size_t inner_dim, std::size_t state_dim,
                            bool per_direction, Rng& rng) {
  CsmWeights w;
  const std::size_t sets = per_direction ? kDirections : 1;
  for (std::size_t k = 0; k < sets; ++k) w.s6.push_back(ssm::init_s6_weights(channels, inner_dim, state_dim, rng));
  return w;
}

ag::Var csm_forward(ag::Var feature_map, const CsmWeights& weights, bool regen, Rng& rng) {
  const Tensor& x = feature_map.value();
  require_map(x, "csm_forward");
  if (weights.s6.empty() || x.dim(0) != weights.for_direction(0).token_dim()) {
    throw ShapeError("csm_forward: " + std::to_string(x.dim(0)) + " channels for S6 weights of token_dim " +
                     (weights.s6.empty() ? std::string("?") : std::to_string(weights.s6[0].token_dim())));
  }
  const std::size_t h = x.dim(1), w = x.dim(2);
  const Permutation perm = regen ? regenerate_permutation(h * w, rng) : Permutation::identity(h * w);
  const auto orders = scan_orders(h, w, perm);

  ag::Var tokens = ag::to_tokens(feature_map);
  std::array<ag::Var, kDirections> aligned;
  for (std::size_t k = 0; k < kDirections; ++k) {
    ag::Var seq = ag::gather_rows(tokens, orders[k]);
    ag::Var out = ssm::s6_forward(seq, weights.for_direction(k));
    aligned[k] = ag::gather_rows(out, invert(orders[k]));
  }
  ag::Var merged = ag::add(ag::add(aligned[0], aligned[1]), ag::add(aligned[2], aligned[3]));
  return ag::from_tokens(ag::scale(merged, 0.25), h, w);
}

Tensor csm_forward(const Tensor& feature_map, const CsmWeights& weights, bool regen, Rng& rng) {
  ag::Tape tape(false);
  return csm_forward(tape.constant(feature_map), weights, regen, rng).value();
}

}  // namespace vmddpm::scan
