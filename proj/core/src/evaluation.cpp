#include "vmddpm/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "vmddpm/checkpoint.hpp"
#include "vmddpm/errors.hpp"

namespace vmddpm::eval {
namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

bool finite(const FeatureStats& s) { return s.mu.allFinite() && s.sigma.allFinite(); }

}  // namespace

FeatureStats gaussian_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw DomainError("gaussian_stats needs at least 2 samples");
  FeatureStats s;
  s.n = static_cast<std::size_t>(features.rows());
  s.mu = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mu.transpose();
  s.sigma = centered.transpose() * centered / static_cast<double>(features.rows() - 1);
  return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mu.size() != b.mu.size() || a.sigma.rows() != a.mu.size() || b.sigma.rows() != b.mu.size() ||
      a.sigma.cols() != a.sigma.rows() || b.sigma.cols() != b.sigma.rows()) {
    throw ShapeError("frechet_distance: feature dimensions differ (" + std::to_string(a.mu.size()) + " vs " +
                     std::to_string(b.mu.size()) + ")");
  }
  if (!finite(a) || !finite(b)) throw DomainError("frechet_distance: non-finite statistics");
  const Eigen::MatrixXd root_a = psd_sqrt(a.sigma);
  const Eigen::MatrixXd inner = root_a * b.sigma * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_cross;
  return std::max(d, 0.0);
}

Eigen::VectorXd pixel_embed(const Tensor& image, std::size_t grid) {
  if (image.rank() != 3 || image.dim(1) < grid || image.dim(2) < grid || grid == 0) {
    throw ShapeError("pixel_embed expects (channels, H, W) with H, W >= " + std::to_string(grid) + ", got " +
                     to_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c * grid * grid));
  std::vector<double> counts(grid * grid, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) counts[(y * grid / h) * grid + x * grid / w] += 1.0;
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[static_cast<Eigen::Index>(ch * grid * grid + (y * grid / h) * grid + x * grid / w)] += image.at(ch, y, x);
      }
    }
    for (std::size_t k = 0; k < grid * grid; ++k) out[static_cast<Eigen::Index>(ch * grid * grid + k)] /= counts[k];
  }
  return out;
}

Embedder pixel_embedder(std::size_t grid) {
  return [grid](const Tensor& image) { return pixel_embed(image, grid); };
}

Embedder load_linear_embedder(const std::filesystem::path& path) {
  const ckpt::Checkpoint c = ckpt::load(path);
  const Tensor* w = nullptr;
  const Tensor* b = nullptr;
  for (const auto& [name, t] : c.weights) {
    if (name == "embedder.weight") w = &t;
    if (name == "embedder.bias") b = &t;
  }
  if (!w || !b || w->rank() != 2 || b->rank() != 1 || b->dim(0) != w->dim(0)) {
    throw CheckpointError("'" + path.string() + "' has no valid embedder.weight / embedder.bias arrays");
  }
  const auto rows = static_cast<Eigen::Index>(w->dim(0)), cols = static_cast<Eigen::Index>(w->dim(1));
  Eigen::MatrixXd W = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      w->data(), rows, cols);
  Eigen::VectorXd bias = Eigen::Map<const Eigen::VectorXd>(b->data(), rows);
  return [W = std::move(W), bias = std::move(bias)](const Tensor& image) -> Eigen::VectorXd {
    if (static_cast<Eigen::Index>(image.size()) != W.cols()) {
      throw ShapeError("linear embedder expects " + std::to_string(W.cols()) + " inputs, got " +
                       std::to_string(image.size()));
    }
    return W * Eigen::Map<const Eigen::VectorXd>(image.data(), W.cols()) + bias;
  };
}

Eigen::MatrixXd embed_all(const std::vector<Tensor>& images, const Embedder& embedder) {
  if (images.empty()) throw DomainError("embed_all: empty image set");
  Eigen::MatrixXd features;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Eigen::VectorXd f = embedder(images[i]);
    if (i == 0) features.resize(static_cast<Eigen::Index>(images.size()), f.size());
    if (f.size() != features.cols()) throw ShapeError("embedder output dimension changed between images");
    features.row(static_cast<Eigen::Index>(i)) = f.transpose();
  }
  return features;
}

double evaluate_fid(const std::vector<Tensor>& samples, const std::vector<Tensor>& reference,
                    const Embedder& embedder) {
  return frechet_distance(gaussian_stats(embed_all(samples, embedder)), gaussian_stats(embed_all(reference, embedder)));
}

double evaluate_fid(const std::vector<Tensor>& samples, const data::DatasetHandle& reference,
                    const Embedder& embedder) {
  return evaluate_fid(samples, reference.items, embedder);
}

}  // namespace vmddpm::eval
