#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vmddpm/autograd.hpp"
#include "vmddpm/random.hpp"
#include "vmddpm/ssm_core.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::scan {

/// Bijection on {0, ..., n-1} with its inverse. Applied to a token list as
/// permuted[i] = tokens[forward[i]].
struct Permutation {
  std::vector<std::size_t> forward;
  std::vector<std::size_t> inverse;

  static Permutation identity(std::size_t n);
  /// Validates that `forward` is a bijection and precomputes the inverse.
  static Permutation from_forward(std::vector<std::size_t> forward);

  std::size_t size() const noexcept { return forward.size(); }
  bool is_identity() const;
};

/// Uniform random permutation (Fisher-Yates) drawn from `rng`.
Permutation regenerate_permutation(std::size_t n, Rng& rng);

/// Number of regenerate_permutation calls made by this process so far.
std::uint64_t regeneration_count();

inline constexpr std::size_t kDirections = 4;

/// For each of the four scan directions, the row-major token index feeding
/// position i of that direction's sequence, after applying `perm`. Direction
/// order: row-major, reversed row-major, column-major, reversed column-major.
std::array<std::vector<std::size_t>, kDirections> scan_orders(std::size_t height, std::size_t width,
                                                              const Permutation& perm);

struct ScanBundle {
  std::array<Tensor, kDirections> sequences;  ///< each (H*W, channels)
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<Permutation> regen_perm;
};

/// Expands a (channels, H, W) map into four directional token sequences.
ScanBundle scan_expand(const Tensor& feature_map, const std::optional<Permutation>& perm = std::nullopt);

/// Re-aligns each processed sequence to the original spatial positions and
/// sums the four of them; returns (channels, H, W).
Tensor scan_merge(const ScanBundle& bundle, const std::array<Tensor, kDirections>& processed);

/// S6 weights for the cross-scan module: one set shared by all directions,
/// or one set per direction.
struct CsmWeights {
  std::vector<ssm::S6Weights> s6;

  bool shared() const noexcept { return s6.size() == 1; }
  const ssm::S6Weights& for_direction(std::size_t k) const { return s6[shared() ? 0 : k]; }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < self.s6.size(); ++k) {
      ssm::S6Weights::visit(self.s6[k], prefix + "s6_" + std::to_string(k) + ".", f);
    }
  }
};

CsmWeights init_csm_weights(std::size_t channels, std::size_t inner_dim, std::size_t state_dim,
                            bool per_direction, Rng& rng);

/// Scan expansion -> S6 per direction -> scan merge -> divide by four. With
/// `regen`, one fresh permutation (shared by the four directions) is drawn
/// from `rng` and inverted again after the merge.
ag::Var csm_forward(ag::Var feature_map, const CsmWeights& weights, bool regen, Rng& rng);
Tensor csm_forward(const Tensor& feature_map, const CsmWeights& weights, bool regen, Rng& rng);

}  // namespace vmddpm::scan
