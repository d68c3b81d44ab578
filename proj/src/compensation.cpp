#include "tailquant/compensation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tailquant/linalg.hpp"

namespace tailquant {

void TREConfig::validate() const {
  if (!(rho > 0.0) || !(rho <= 1.0)) throw std::invalid_argument("tre: rho must be in (0,1]");
  if (!(tau >= 0.0)) throw std::invalid_argument("tre: tau must be nonnegative");
  if (!(eps > 0.0)) throw std::invalid_argument("tre: eps must be positive");
}

double tre(const Tensor& y, const Tensor& y_q, const TREConfig& cfg) {
  cfg.validate();
  require_same_shape(y, y_q, "tre");
  const std::size_t n = y.size();
  if (n == 0) throw std::invalid_argument("tre: empty tensors");

  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.rho * static_cast<double>(n))));
  const std::vector<std::size_t> tail = top_k_indices(y.flattened(), k);

  double num = 0.0, den = 0.0;
  for (std::size_t i : tail) {
    const double diff = y[i] - y_q[i];
    num += diff * diff;
    den += y[i] * y[i];
  }
  return num / (den + cfg.eps);
}

Adapter fit_adapter(const Tensor& x_cal, const Tensor& y_fp, const Tensor& y_q, std::size_t rank,
                    double lambda, const TREConfig& cfg, bool fit_even_if_gated) {
  const std::size_t s = x_cal.rows(), d_in = x_cal.cols();
  const std::size_t d_out = y_fp.cols();
  require_same_shape(y_fp, y_q, "fit_adapter outputs");
  if (y_fp.rows() != s) throw std::invalid_argument("fit_adapter: sample count mismatch");
  if (rank < 1 || rank > std::min(d_in, d_out)) {
    throw std::invalid_argument("fit_adapter: rank " + std::to_string(rank) + " out of range");
  }
  if (!(lambda >= 0.0)) throw std::invalid_argument("fit_adapter: lambda must be nonnegative");

  Adapter a;
  a.rank = rank;
  a.tre_at_fit = tre(y_fp, y_q, cfg);
  a.active = a.tre_at_fit > cfg.tau;
  if (!a.active && !fit_even_if_gated) {
    a.u = Tensor::zeros({d_out, rank});
    a.v = Tensor::zeros({rank, d_in});
    a.b = Tensor::zeros({d_out});
    return a;
  }

  // Residual regression R = X*W^T + 1*b^T with an augmented ones column;
  // the ridge penalty applies to W rows only, never the bias. At lambda = 0
  // the design can be rank-deficient (normalized inputs obey an exact affine
  // constraint), so that path takes the minimum-norm SVD solution.
  Tensor residual = sub(y_fp, y_q);
  Tensor x_aug({s, d_in + 1});
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < d_in; ++j) x_aug.at(i, j) = x_cal.at(i, j);
    x_aug.at(i, d_in) = 1.0;
  }
  Tensor theta;  // (d_in+1) x d_out
  if (lambda > 0.0) {
    Tensor xt = transpose(x_aug);
    Tensor gram = matmul(xt, x_aug);
    for (std::size_t j = 0; j < d_in; ++j) gram.at(j, j) += lambda;
    theta = solve_linear(gram, matmul(xt, residual));
  } else {
    theta = solve_least_squares_minnorm(x_aug, residual);
  }

  Tensor w_comp({d_out, d_in});
  for (std::size_t o = 0; o < d_out; ++o) {
    for (std::size_t j = 0; j < d_in; ++j) w_comp.at(o, j) = theta.at(j, o);
  }
  a.b = Tensor({d_out});
  for (std::size_t o = 0; o < d_out; ++o) a.b[o] = theta.at(d_in, o);

  // Rank-r truncation; singular values folded into U so U*V is exactly the
  // best rank-r approximation of the regression matrix.
  Svd svd = truncated_svd(w_comp, rank);
  a.u = std::move(svd.u);
  for (std::size_t o = 0; o < d_out; ++o) {
    for (std::size_t c = 0; c < rank; ++c) a.u.at(o, c) *= svd.s[c];
  }
  a.v = std::move(svd.v);
  return a;
}

Tensor apply_adapter(const Adapter& a, const Tensor& x, const Tensor& y_q) {
  if (!a.active) return y_q;
  const std::size_t rows = x.rows();
  if (y_q.rows() != rows) throw std::invalid_argument("apply_adapter: row count mismatch");
  if (x.cols() != a.v.cols()) throw std::invalid_argument("apply_adapter: input width mismatch");
  if (y_q.cols() != a.u.rows()) throw std::invalid_argument("apply_adapter: output width mismatch");

  const Tensor w = matmul(a.u, a.v);  // d_out x d_in
  Tensor out = add(y_q, matmul(x, transpose(w)));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t o = 0; o < out.cols(); ++o) out.at(i, o) += a.b[o];
  }
  return out;
}

std::size_t adapter_param_bytes(const Adapter& a) {
  if (!a.active) return 0;
  return 4 * (a.u.size() + a.v.size() + a.b.size());
}

}  // namespace tailquant
