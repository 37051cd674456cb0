#pragma once

#include <cstddef>

namespace vmddpm {

// Elementwise transcendental kernels. Blocks are evaluated eight lanes at a
// time through Eigen's packet math, tail included, so a value's result never
// depends on where it sits in a tensor; the scalar forms run the same code.

void exp_block(const double* x, double* y, std::size_t n);
void sigmoid_block(const double* x, double* y, std::size_t n);
void silu_block(const double* x, double* y, std::size_t n);
/// max(x, 0) + log1p(exp(-|x|)).
void softplus_block(const double* x, double* y, std::size_t n);

double sigmoid(double x);
double silu(double x);
double silu_grad(double x);
double softplus(double x);

/// y such that softplus(y) = x, for x > 0.
double inverse_softplus(double x);

}  // namespace vmddpm
