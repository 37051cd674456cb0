#include "vmddpm/data_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vmddpm/errors.hpp"

namespace vmddpm::data {
namespace {

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

Tensor from_plane(const cv::Mat& plane, std::size_t channels) {
  const auto r = static_cast<std::size_t>(plane.rows);
  Tensor out({channels, r, r});
  for (std::size_t y = 0; y < r; ++y) {
    const double* row = plane.ptr<double>(static_cast<int>(y));
    for (std::size_t x = 0; x < r; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        out.at(c, y, x) = std::clamp(row[x * channels + c] / 127.5 - 1.0, -1.0, 1.0);
      }
    }
  }
  return out;
}

// Interleaved double image with `channels` channels -> centered square -> R x R.
Tensor crop_resize(const cv::Mat& image, std::size_t resolution, std::size_t channels) {
  const int side = std::min(image.rows, image.cols);
  const cv::Rect roi((image.cols - side) / 2, (image.rows - side) / 2, side, side);
  cv::Mat square = image(roi);
  cv::Mat resized;
  const int r = static_cast<int>(resolution);
  if (side == r) {
    resized = square.clone();
  } else {
    cv::resize(square, resized, cv::Size(r, r), 0, 0, cv::INTER_LINEAR);
  }
  return from_plane(resized, channels);
}

cv::Mat convert_channels(const cv::Mat& src, std::size_t channels) {
  // src is CV_64FC{1,3}; 3 -> 1 is the plain channel average.
  if (static_cast<std::size_t>(src.channels()) == channels) return src;
  if (channels == 1) {
    cv::Mat out(src.rows, src.cols, CV_64FC1);
    for (int y = 0; y < src.rows; ++y) {
      const double* in = src.ptr<double>(y);
      double* o = out.ptr<double>(y);
      for (int x = 0; x < src.cols; ++x) o[x] = (in[3 * x] + in[3 * x + 1] + in[3 * x + 2]) / 3.0;
    }
    return out;
  }
  cv::Mat out;
  cv::merge(std::vector<cv::Mat>{src, src, src}, out);
  return out;
}

void require_channels(std::size_t channels) {
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
}

}  // namespace

void DatasetHandle::validate() const {
  const Shape expected = item_shape();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != expected) {
      throw DatasetError("item " + std::to_string(i) + " has shape " + to_string(items[i].shape()) + ", expected " +
                         to_string(expected));
    }
    for (double v : items[i].values()) {
      if (!(v >= -1.0 && v <= 1.0)) throw DatasetError("item " + std::to_string(i) + " leaves [-1, 1]");
    }
  }
}

Tensor preprocess_image(const std::vector<std::uint8_t>& pixels, std::size_t height, std::size_t width,
                        std::size_t source_channels, std::size_t resolution, std::size_t channels) {
  require_channels(channels);
  require_channels(source_channels);
  if (pixels.size() != height * width * source_channels || height == 0 || width == 0) {
    throw ShapeError("preprocess_image: pixel buffer does not match " + std::to_string(height) + "x" +
                     std::to_string(width) + "x" + std::to_string(source_channels));
  }
  if (resolution < 1) throw ConfigError("resolution must be >= 1");
  const int type = source_channels == 1 ? CV_8UC1 : CV_8UC3;
  cv::Mat raw(static_cast<int>(height), static_cast<int>(width), type, const_cast<std::uint8_t*>(pixels.data()));
  cv::Mat as_double;
  raw.convertTo(as_double, source_channels == 1 ? CV_64FC1 : CV_64FC3);
  return crop_resize(convert_channels(as_double, channels), resolution, channels);
}

DatasetHandle load_dataset(const std::filesystem::path& directory, std::size_t resolution, std::size_t channels) {
  require_channels(channels);
  std::error_code ec;
  if (!std::filesystem::is_directory(directory, ec)) {
    throw IoError("cannot read dataset directory '" + directory.string() + "'");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(directory, ec)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  if (ec) throw IoError("cannot list dataset directory '" + directory.string() + "': " + ec.message());
  std::sort(files.begin(), files.end());

  DatasetHandle ds;
  ds.resolution = resolution;
  ds.channels = channels;
  ds.source = directory.string();
  for (const auto& file : files) {
    cv::Mat raw = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty() || raw.depth() != CV_8U) {
      ++ds.skipped;
      continue;
    }
    // OpenCV decodes to BGR(A); the channel average does not care about order,
    // but 3-channel output should be RGB.
    if (raw.channels() == 4) cv::cvtColor(raw, raw, cv::COLOR_BGRA2RGB);
    else if (raw.channels() == 3) cv::cvtColor(raw, raw, cv::COLOR_BGR2RGB);
    else if (raw.channels() == 2) cv::extractChannel(raw, raw, 0);  // gray + alpha
    cv::Mat as_double;
    raw.convertTo(as_double, raw.channels() == 1 ? CV_64FC1 : CV_64FC3);
    ds.items.push_back(crop_resize(convert_channels(as_double, channels), resolution, channels));
  }
  if (ds.skipped > 0) {
    std::cerr << "warning: skipped " << ds.skipped << " undecodable file(s) in " << directory.string() << "\n";
  }
  if (ds.items.empty()) throw DatasetError("no decodable images in '" + directory.string() + "'");
  return ds;
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("hflip expects (channels, H, W), got " + to_string(image.shape()));
  Tensor out(image.shape());
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out.at(ch, y, x) = image.at(ch, y, w - 1 - x);
    }
  }
  return out;
}

Tensor augment(const Tensor& image, Rng& rng) {
  std::bernoulli_distribution flip(0.5);
  return flip(rng) ? hflip(image) : image;
}

DatasetHandle synth_toy_dataset(const std::string& name, std::size_t n, std::size_t resolution, std::uint64_t seed,
                                std::size_t channels) {
  if (name != "gaussians" && name != "rings" && name != "bars") {
    throw ConfigError("unknown toy dataset '" + name + "' (expected gaussians, rings or bars)");
  }
  if (n < 1) throw ConfigError("toy dataset needs n >= 1");
  if (resolution < 8) throw ConfigError("toy dataset needs resolution >= 8");
  require_channels(channels);

  DatasetHandle ds;
  ds.resolution = resolution;
  ds.channels = channels;
  ds.source = "synthetic:" + name + ":" + std::to_string(seed);
  const double r = static_cast<double>(resolution);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = derive_rng(seed, i);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor plane({resolution, resolution}, -1.0);
    if (name == "gaussians") {
      const double cy = r * (0.3 + 0.4 * u(rng)), cx = r * (0.3 + 0.4 * u(rng));
      const double sy = r * (0.06 + 0.12 * u(rng)), sx = r * (0.06 + 0.12 * u(rng));
      const double th = std::acos(-1.0) * u(rng);
      const double ct = std::cos(th), st = std::sin(th);
      for (std::size_t y = 0; y < resolution; ++y) {
        for (std::size_t x = 0; x < resolution; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double a = (ct * dx + st * dy) / sx, b = (-st * dx + ct * dy) / sy;
          plane.at(y, x) = -1.0 + 2.0 * std::exp(-0.5 * (a * a + b * b));
        }
      }
    } else if (name == "rings") {
      const double cy = r * (0.4 + 0.2 * u(rng)), cx = r * (0.4 + 0.2 * u(rng));
      const double radius = r * (0.18 + 0.14 * u(rng));
      const double half_width = r * (0.04 + 0.04 * u(rng));
      for (std::size_t y = 0; y < resolution; ++y) {
        for (std::size_t x = 0; x < resolution; ++x) {
          const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
          if (std::abs(d - radius) <= half_width) plane.at(y, x) = 1.0;
        }
      }
    } else {
      std::uniform_int_distribution<int> count(1, 3);
      const int bars = count(rng);
      for (int b = 0; b < bars; ++b) {
        const bool vertical = u(rng) < 0.5;
        const double width = r * (0.05 + 0.15 * u(rng));
        const double start = (r - width) * u(rng);
        for (std::size_t y = 0; y < resolution; ++y) {
          for (std::size_t x = 0; x < resolution; ++x) {
            const double pos = (vertical ? x : y) + 0.5;
            if (pos >= start && pos < start + width) plane.at(y, x) = 1.0;
          }
        }
      }
    }
    Tensor item({channels, resolution, resolution});
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy(plane.storage().begin(), plane.storage().end(), item.data() + c * plane.size());
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

BatchIterator::BatchIterator(const DatasetHandle& dataset, std::size_t batch_size, std::uint64_t shuffle_seed,
                             std::uint64_t augment_seed, bool augment)
    : dataset_(&dataset),
      batch_size_(batch_size),
      shuffle_seed_(shuffle_seed),
      augment_(augment),
      augment_rng_(derive_rng(augment_seed, 0)) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (batch_size > dataset.size()) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds dataset size " +
                      std::to_string(dataset.size()));
  }
  order_ = epoch_order(0);
}

std::vector<std::size_t> BatchIterator::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(dataset_->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(shuffle_seed_, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Batch BatchIterator::next() {
  if (position_ + batch_size_ > order_.size()) {
    ++epoch_;
    position_ = 0;
    order_ = epoch_order(epoch_);
  }
  Batch batch;
  batch.epoch = epoch_;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t idx = order_[position_ + i];
    batch.indices.push_back(idx);
    const Tensor& item = dataset_->items[idx];
    batch.images.push_back(augment_ ? data::augment(item, augment_rng_) : item);
  }
  position_ += batch_size_;
  return batch;
}

std::string BatchIterator::state() const {
  std::ostringstream os;
  os << epoch_ << ' ' << position_ << ' ' << serialize_rng(augment_rng_);
  return os.str();
}

void BatchIterator::restore(const std::string& state) {
  std::istringstream is(state);
  std::uint64_t epoch = 0;
  std::size_t position = 0;
  if (!(is >> epoch >> position)) throw IoError("corrupt batch iterator state");
  std::string rest;
  std::getline(is, rest);
  Rng rng = deserialize_rng(rest);
  if (position > dataset_->size()) throw IoError("batch iterator position out of range");
  epoch_ = epoch;
  position_ = position;
  augment_rng_ = rng;
  order_ = epoch_order(epoch_);
}

}  // namespace vmddpm::data
