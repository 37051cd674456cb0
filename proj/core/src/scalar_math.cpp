#include "vmddpm/scalar_math.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace vmddpm {
namespace {

using Lanes = Eigen::Array<double, 8, 1>;

template <class F>
void by_lanes(const double* x, double* y, std::size_t n, F f) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) Eigen::Map<Lanes>(y + i) = f(Eigen::Map<const Lanes>(x + i));
  if (i < n) {
    Lanes in = Lanes::Zero();
    std::copy(x + i, x + n, in.data());
    const Lanes out = f(in);
    std::copy(out.data(), out.data() + (n - i), y + i);
  }
}

template <class F>
double one_lane(double x, F block) {
  double y = 0.0;
  block(&x, &y, 1);
  return y;
}

}  // namespace

void exp_block(const double* x, double* y, std::size_t n) {
  by_lanes(x, y, n, [](const auto& v) -> Lanes { return v.exp(); });
}

void sigmoid_block(const double* x, double* y, std::size_t n) {
  by_lanes(x, y, n, [](const auto& v) -> Lanes { return 1.0 / (1.0 + (-v).exp()); });
}

void silu_block(const double* x, double* y, std::size_t n) {
  by_lanes(x, y, n, [](const auto& v) -> Lanes { return v / (1.0 + (-v).exp()); });
}

void softplus_block(const double* x, double* y, std::size_t n) {
  // log1p(e) as log(u) * e / (u - 1) with u = 1 + e, which keeps full
  // relative accuracy for tiny e while staying on the vectorised log.
  by_lanes(x, y, n, [](const auto& v) -> Lanes {
    const Lanes e = (-v.abs()).exp();
    const Lanes u = 1.0 + e;
    const Lanes l1p = (u == 1.0).select(e, u.log() * e / (u - 1.0));
    return v.max(0.0) + l1p;
  });
}

double sigmoid(double x) { return one_lane(x, sigmoid_block); }
double silu(double x) { return one_lane(x, silu_block); }

double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

double softplus(double x) { return one_lane(x, softplus_block); }

double inverse_softplus(double x) { return x + std::log(-std::expm1(-x)); }

}  // namespace vmddpm
