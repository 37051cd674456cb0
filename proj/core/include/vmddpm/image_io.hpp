#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vmddpm/tensor.hpp"

namespace vmddpm::io {

/// round((x + 1) * 127.5), with x clamped to [-1, 1] first.
std::uint8_t to_u8(double x);

/// PNG bytes for a (1 or 3, H, W) image in [-1, 1].
std::string encode_png(const Tensor& image);
/// Throws IoError.
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Tiles images into ceil(sqrt(n)) columns, row-major, with unfilled cells at -1.
Tensor make_grid(const std::vector<Tensor>& images);

/// Decodes an 8-bit PNG back to [-1, 1] via x / 127.5 - 1 (no resizing).
Tensor read_png(const std::filesystem::path& path);

}  // namespace vmddpm::io
