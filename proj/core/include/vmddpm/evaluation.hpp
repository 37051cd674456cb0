#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "vmddpm/data_pipeline.hpp"
#include "vmddpm/tensor.hpp"

namespace vmddpm::eval {

struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t n = 0;
};

/// Sample mean and unbiased covariance of the rows of `features` (n, d).
FeatureStats gaussian_stats(const Eigen::MatrixXd& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// Maps one image to a fixed-length feature vector.
using Embedder = std::function<Eigen::VectorXd(const Tensor& image)>;

/// Block-average to grid x grid per channel and flatten (d = grid^2 channels).
Eigen::VectorXd pixel_embed(const Tensor& image, std::size_t grid = 8);
Embedder pixel_embedder(std::size_t grid = 8);

/// features = W flatten(image) + b, with W and b read from the arrays
/// "embedder.weight" (d, in) and "embedder.bias" (d) of a checkpoint file.
Embedder load_linear_embedder(const std::filesystem::path& path);

Eigen::MatrixXd embed_all(const std::vector<Tensor>& images, const Embedder& embedder);

double evaluate_fid(const std::vector<Tensor>& samples, const std::vector<Tensor>& reference,
                    const Embedder& embedder);
double evaluate_fid(const std::vector<Tensor>& samples, const data::DatasetHandle& reference,
                    const Embedder& embedder);

}  // namespace vmddpm::eval
