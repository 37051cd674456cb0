#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vmddpm/tensor.hpp"

namespace vmddpm::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

using NamedArrays = std::vector<std::pair<std::string, Tensor>>;

/// Single-file container. Layout (little-endian):
///   "VMDDPMCK" | u32 version | str config | u64 step | str rng | str data
///   | arrays weights | arrays adam_m | arrays adam_v | u64 adam_step
///   | u64 FNV-1a of everything before.
/// str = u64 length + bytes; arrays = u64 count, then per array: str name,
/// u32 rank, u64 dims[rank], u8 dtype (1 = f64), f64 values.
struct Checkpoint {
  std::uint32_t version = kFormatVersion;
  std::string config_text;
  std::uint64_t step = 0;
  std::string rng_state;
  std::string data_state;
  NamedArrays weights;
  NamedArrays adam_m;
  NamedArrays adam_v;
  std::uint64_t adam_step = 0;
};

std::string serialize(const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, version, checksum or truncation.
Checkpoint deserialize(const std::string& bytes);
/// The encoded weight arrays alone, for byte-level round-trip checks.
std::string weight_section(const Checkpoint& ckpt);

/// Writes via a temporary file and rename, so a crash never leaves a
/// half-written checkpoint under `path`. Throws IoError.
void save(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws CheckpointError for missing or invalid files.
Checkpoint load(const std::filesystem::path& path);

std::uint64_t fnv1a(const std::string& bytes);

}  // namespace vmddpm::ckpt
