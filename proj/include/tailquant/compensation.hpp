#pragma once

#include <cstddef>

#include "tailquant/tensor.hpp"

namespace tailquant {

struct TREConfig {
  double rho = 0.01;    // tail fraction; k = max(1, floor(rho*n))
  double tau = 0.007;   // adapter activation threshold
  double eps = 1e-12;   // denominator guard
  void validate() const;
};

/// Tail relative error: squared distortion over squared energy, both
/// restricted to the top-k elements of |y| (ties to the lower index).
double tre(const Tensor& y, const Tensor& y_q, const TREConfig& cfg);

/// Low-rank correction branch: y_q + U*V*x + b, active only when the tail
/// relative error at fit time exceeded tau.
struct Adapter {
  Tensor u;  // d_out x r
  Tensor v;  // r x d_in
  Tensor b;  // d_out
  std::size_t rank = 0;
  bool active = false;
  double tre_at_fit = 0.0;
};

/// Fit the correction from calibration rows: residual regression with an
/// augmented bias column (ridge on the matrix only), then rank-r truncation
/// with singular values absorbed into U. A gated fit (TRE <= tau) returns an
/// inactive all-zero adapter without solving, unless fit_even_if_gated.
Adapter fit_adapter(const Tensor& x_cal, const Tensor& y_fp, const Tensor& y_q, std::size_t rank,
                    double lambda, const TREConfig& cfg, bool fit_even_if_gated = false);

/// Inactive adapters return y_q untouched; active ones add x*(U*V)^T plus a
/// row-broadcast bias.
Tensor apply_adapter(const Adapter& a, const Tensor& x, const Tensor& y_q);

/// 32-bit storage cost of the factors; zero when inactive.
std::size_t adapter_param_bytes(const Adapter& a);

}  // namespace tailquant
