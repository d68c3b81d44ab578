#include "tailquant/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace tailquant {

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) +
                                " x " + shape_to_string(b.shape()));
  }
  Tensor c({m, n});
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* cd = c.data().data();
  // i-k-j order: contributions to c[i][j] still arrive in ascending k,
  // identical bits to the textbook i-j-k loop.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = ad[i * k + kk];
      const double* brow = bd + kk * n;
      double* crow = cd + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

double frobenius_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v * v;
  return std::sqrt(acc);
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_squared_error");
  if (a.size() == 0) throw std::invalid_argument("mean_squared_error: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

Tensor solve_linear(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("solve_linear: matrix must be square");
  if (b.rows() != n) throw std::invalid_argument("solve_linear: rhs row count mismatch");
  const std::size_t m = b.cols();

  Tensor lu = a;
  Tensor rhs = b;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);

  double scale_ref = max_abs(a);
  if (scale_ref == 0.0) throw std::runtime_error("solve_linear: singular system (zero matrix)");
  const double pivot_tol = 1e-13 * scale_ref;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::abs(lu.at(col, col));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::abs(lu.at(r, col));
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best <= pivot_tol) throw std::runtime_error("solve_linear: singular system");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu.at(col, j), lu.at(piv, j));
      for (std::size_t j = 0; j < m; ++j) std::swap(rhs.at(col, j), rhs.at(piv, j));
    }
    const double d = lu.at(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = lu.at(r, col) / d;
      if (f == 0.0) continue;
      lu.at(r, col) = 0.0;
      for (std::size_t j = col + 1; j < n; ++j) lu.at(r, j) -= f * lu.at(col, j);
      for (std::size_t j = 0; j < m; ++j) rhs.at(r, j) -= f * rhs.at(col, j);
    }
  }
  // Back substitution.
  Tensor w({n, m});
  for (std::size_t ri = n; ri-- > 0;) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = rhs.at(ri, j);
      for (std::size_t c = ri + 1; c < n; ++c) acc -= lu.at(ri, c) * w.at(c, j);
      w.at(ri, j) = acc / lu.at(ri, ri);
    }
  }
  return w;
}

Tensor solve_least_squares_minnorm(const Tensor& x, const Tensor& r, double rcond) {
  const std::size_t s = x.rows(), p = x.cols();
  if (r.rows() != s) throw std::invalid_argument("solve_least_squares_minnorm: row count mismatch");
  const Svd f = truncated_svd(x, std::min(s, p));
  const double cutoff = f.s.empty() ? 0.0 : rcond * f.s.front();
  // theta = sum over kept directions of v_c * (u_c^T r) / sigma_c.
  Tensor ut_r = matmul(transpose(f.u), r);  // rank x q
  for (std::size_t c = 0; c < f.s.size(); ++c) {
    const double inv = f.s[c] > cutoff ? 1.0 / f.s[c] : 0.0;
    for (std::size_t j = 0; j < ut_r.cols(); ++j) ut_r.at(c, j) *= inv;
  }
  return matmul(transpose(f.v), ut_r);  // p x q
}

Tensor solve_least_squares(const Tensor& x, const Tensor& r, double lambda) {
  const std::size_t s = x.rows(), p = x.cols();
  if (r.rows() != s) throw std::invalid_argument("solve_least_squares: row count mismatch");
  if (s < 1) throw std::invalid_argument("solve_least_squares: needs at least one sample");
  if (!(lambda >= 0.0)) throw std::invalid_argument("solve_least_squares: lambda must be nonnegative");

  Tensor xt = transpose(x);
  Tensor gram = matmul(xt, x);
  for (std::size_t i = 0; i < p; ++i) gram.at(i, i) += lambda;
  Tensor rhs = matmul(xt, r);
  return solve_linear(gram, rhs);
}

namespace {

// One-sided Jacobi on an m x n matrix with m >= n: rotate column pairs until
// all are mutually orthogonal, then read off singular values as column norms.
struct JacobiResult {
  Tensor a;  // rotated copy, columns orthogonal
  Tensor v;  // accumulated right rotations, n x n
  bool converged;
};

JacobiResult one_sided_jacobi(Tensor a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor v = Tensor::identity(n);
  const double tol = 1e-12;
  const int max_sweeps = 60;
  bool converged = false;

  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          const double ai = a.at(r, i), aj = a.at(r, j);
          app += ai * ai;
          aqq += aj * aj;
          apq += ai * aj;
        }
        if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        converged = false;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t r = 0; r < m; ++r) {
          const double ai = a.at(r, i), aj = a.at(r, j);
          a.at(r, i) = cs * ai - sn * aj;
          a.at(r, j) = sn * ai + cs * aj;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vi = v.at(r, i), vj = v.at(r, j);
          v.at(r, i) = cs * vi - sn * vj;
          v.at(r, j) = sn * vi + cs * vj;
        }
      }
    }
  }
  return {std::move(a), std::move(v), converged};
}

}  // namespace

Svd truncated_svd(const Tensor& w, std::size_t rank) {
  const std::size_t p = w.rows(), q = w.cols();
  const std::size_t min_dim = std::min(p, q);
  if (rank < 1 || rank > min_dim) {
    throw std::invalid_argument("truncated_svd: rank " + std::to_string(rank) + " out of [1," +
                                std::to_string(min_dim) + "]");
  }

  const bool flipped = p < q;                 // operate on the tall orientation
  Tensor work = flipped ? transpose(w) : w;   // m x n with m >= n
  const std::size_t n = work.cols();

  JacobiResult jr = one_sided_jacobi(std::move(work));

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t r = 0; r < jr.a.rows(); ++r) acc += jr.a.at(r, j) * jr.a.at(r, j);
    sigma[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (sigma[a] != sigma[b]) return sigma[a] > sigma[b];
    return a < b;
  });

  // Left factor: normalized columns of the rotated matrix. Right factor:
  // accumulated rotations. Zero singular values leave a zero column, which
  // contributes nothing to the reconstruction.
  Tensor left({jr.a.rows(), rank});
  Tensor right({jr.a.cols(), rank});
  std::vector<double> s(rank);
  for (std::size_t c = 0; c < rank; ++c) {
    const std::size_t src = order[c];
    s[c] = sigma[src];
    const double inv = sigma[src] > 0.0 ? 1.0 / sigma[src] : 0.0;
    for (std::size_t r = 0; r < jr.a.rows(); ++r) left.at(r, c) = jr.a.at(r, src) * inv;
    for (std::size_t r = 0; r < jr.a.cols(); ++r) right.at(r, c) = jr.v.at(r, src);
  }

  Svd out;
  out.s = std::move(s);
  if (!flipped) {
    out.u = std::move(left);        // p x r
    out.v = transpose(right);       // r x q
  } else {
    out.u = std::move(right);       // p x r (right rotations act on rows of w)
    out.v = transpose(left);        // r x q
  }
  return out;
}

std::vector<std::size_t> top_k_indices(const Tensor& v, std::size_t k) {
  const std::size_t n = v.size();
  if (k < 1 || k > n) {
    throw std::invalid_argument("top_k_indices: k " + std::to_string(k) + " out of [1," +
                                std::to_string(n) + "]");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double va = std::abs(v[a]), vb = std::abs(v[b]);
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(k);
  return idx;
}

}  // namespace tailquant
