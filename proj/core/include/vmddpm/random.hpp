#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "vmddpm/tensor.hpp"

namespace vmddpm {

/// Every stochastic operation takes one of these explicitly; there is no
/// global random state anywhere in the library.
using Rng = std::mt19937_64;

Tensor normal_tensor(const Shape& shape, Rng& rng);
Tensor uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng);

/// Derives an independent stream from a base seed and a stream index.
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

}  // namespace vmddpm
