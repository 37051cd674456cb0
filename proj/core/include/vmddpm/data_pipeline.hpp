#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vmddpm/random.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::data {

struct DatasetHandle {
  std::vector<Tensor> items;  ///< each (channels, R, R), values in [-1, 1]
  std::size_t resolution = 0;
  std::size_t channels = 1;
  /// Directory path or "synthetic:<name>:<seed>".
  std::string source;
  /// Files that failed to decode while loading.
  std::size_t skipped = 0;

  std::size_t size() const noexcept { return items.size(); }
  Shape item_shape() const { return {channels, resolution, resolution}; }
  /// Throws DatasetError if an item has the wrong shape or leaves [-1, 1].
  void validate() const;
};

/// Decodes every PNG/JPEG in `directory` (sorted by file name), converts to
/// `channels`, center-crops to the largest square, resizes bilinearly to
/// resolution x resolution and maps [0, 255] to [-1, 1].
DatasetHandle load_dataset(const std::filesystem::path& directory, std::size_t resolution, std::size_t channels);

/// The per-image part of load_dataset on raw interleaved 8-bit pixels.
Tensor preprocess_image(const std::vector<std::uint8_t>& pixels, std::size_t height, std::size_t width,
                        std::size_t source_channels, std::size_t resolution, std::size_t channels);

/// Mirror along the width axis.
Tensor hflip(const Tensor& image);
/// Horizontal flip with probability 0.5.
Tensor augment(const Tensor& image, Rng& rng);

/// Deterministic toy data: "gaussians", "rings" or "bars".
DatasetHandle synth_toy_dataset(const std::string& name, std::size_t n, std::size_t resolution, std::uint64_t seed,
                                std::size_t channels = 1);

struct Batch {
  std::uint64_t epoch = 0;
  std::vector<std::size_t> indices;
  std::vector<Tensor> images;
};

/// Epoch-wise shuffled batches with the partial tail dropped. Each epoch's
/// order comes from its own stream derived from the shuffle seed, so the
/// iterator state is just (epoch, position, augment rng).
class BatchIterator {
 public:
  BatchIterator(const DatasetHandle& dataset, std::size_t batch_size, std::uint64_t shuffle_seed,
                std::uint64_t augment_seed, bool augment = true);

  Batch next();
  std::size_t batches_per_epoch() const noexcept { return dataset_->size() / batch_size_; }
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;

  std::string state() const;
  /// Throws IoError on a malformed state string.
  void restore(const std::string& state);

 private:
  const DatasetHandle* dataset_;
  std::size_t batch_size_;
  std::uint64_t shuffle_seed_;
  bool augment_;
  Rng augment_rng_;
  std::uint64_t epoch_ = 0;
  std::size_t position_ = 0;
  std::vector<std::size_t> order_;
};

}  // namespace vmddpm::data
