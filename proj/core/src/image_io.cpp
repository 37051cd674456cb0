#include "vmddpm/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "vmddpm/errors.hpp"

namespace vmddpm::io {
namespace {

cv::Mat to_mat(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("PNG output needs a (1 or 3, H, W) image, got " + to_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  cv::Mat m(static_cast<int>(h), static_cast<int>(w), c == 1 ? CV_8UC1 : CV_8UC3);
  for (std::size_t y = 0; y < h; ++y) {
    auto* row = m.ptr<std::uint8_t>(static_cast<int>(y));
    for (std::size_t x = 0; x < w; ++x) {
      // OpenCV stores BGR.
      for (std::size_t ch = 0; ch < c; ++ch) row[x * c + (c == 3 ? 2 - ch : ch)] = to_u8(image.at(ch, y, x));
    }
  }
  return m;
}

}  // namespace

std::uint8_t to_u8(double x) {
  const double v = std::round((std::clamp(x, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(v);
}

std::string encode_png(const Tensor& image) {
  std::vector<std::uint8_t> buf;
  if (!cv::imencode(".png", to_mat(image), buf)) throw IoError("PNG encoding failed");
  return std::string(buf.begin(), buf.end());
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  const std::string bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Tensor make_grid(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("make_grid: no images");
  const Shape& s = images.front().shape();
  if (s.size() != 3) throw ShapeError("make_grid: expected (C, H, W) images");
  for (const Tensor& im : images) require_shape(im, s, "grid cell");
  const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(images.size()))));
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t c = s[0], h = s[1], w = s[2];
  Tensor grid({c, rows * h, cols * w}, -1.0);
  for (std::size_t k = 0; k < images.size(); ++k) {
    const std::size_t gy = (k / cols) * h, gx = (k % cols) * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) grid.at(ch, gy + y, gx + x) = images[k].at(ch, y, x);
      }
    }
  }
  return grid;
}

Tensor read_png(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty() || m.depth() != CV_8U || (m.channels() != 1 && m.channels() != 3)) {
    throw IoError("cannot decode 8-bit gray/RGB PNG '" + path.string() + "'");
  }
  const std::size_t c = static_cast<std::size_t>(m.channels());
  Tensor out({c, static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols)});
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        out.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
            row[static_cast<std::size_t>(x) * c + (c == 3 ? 2 - ch : ch)] / 127.5 - 1.0;
      }
    }
  }
  return out;
}

}  // namespace vmddpm::io
