#pragma once

#include <cstddef>
#include <vector>

#include "tailquant/tensor.hpp"

namespace tailquant {

/// Standard matrix product with deterministic left-to-right summation over
/// the inner dimension.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
double mean_squared_error(const Tensor& a, const Tensor& b);

/// argmin_W ||R - X*W||_F^2 + lambda*||W||_F^2 via the normal equations
/// (X^T X + lambda I) W = X^T R, solved with partially pivoted LU.
/// Throws on a singular system (possible only at lambda = 0).
Tensor solve_least_squares(const Tensor& x, const Tensor& r, double lambda);

/// Solve A w = b for square A with partially pivoted LU; b may have several
/// columns. Throws on singular A.
Tensor solve_linear(const Tensor& a, const Tensor& b);

/// Minimum-norm least-squares solution via the SVD of X itself: singular
/// directions below rcond * sigma_max are dropped. Total on rank-deficient
/// systems, unlike solve_least_squares.
Tensor solve_least_squares_minnorm(const Tensor& x, const Tensor& r, double rcond = 1e-8);

struct Svd {
  Tensor u;               // p x r
  std::vector<double> s;  // r singular values, descending, nonnegative
  Tensor v;               // r x q
};

/// Best rank-r approximation factors of w (p x q) by one-sided Jacobi,
/// converged to 1e-12 relative off-diagonal mass.
Svd truncated_svd(const Tensor& w, std::size_t rank);

/// Indices of the k largest |v_i|; ties broken toward the lower index.
std::vector<std::size_t> top_k_indices(const Tensor& v, std::size_t k);

}  // namespace tailquant
