#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tailquant/linalg.hpp"
#include "tailquant/rng.hpp"
#include "tailquant/tensor.hpp"
#include "test_util.hpp"

using namespace tailquant;

TEST_CASE("tensor shape and data invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.all_finite());
  t[0] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("matmul identity and hand result") {
  Rng rng(1);
  const Tensor a = tq_test::random_tensor(rng, {3, 3});
  const Tensor out = matmul(Tensor::identity(3), a);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == a[i]);

  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor v = Tensor::from_rows({{1}, {1}});
  const Tensor r = matmul(m, v);
  CHECK(r.at(0, 0) == 3.0);
  CHECK(r.at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({4, 2})), std::invalid_argument);
}

TEST_CASE("transpose identity (A*B)^T = B^T*A^T") {
  Rng rng(7);
  const Tensor a = tq_test::random_tensor(rng, {8, 8});
  const Tensor b = tq_test::random_tensor(rng, {8, 8});
  const Tensor lhs = transpose(matmul(a, b));
  const Tensor rhs = matmul(transpose(b), transpose(a));
  CHECK(max_abs(sub(lhs, rhs)) < 1e-10);
}

TEST_CASE("least squares recovers a consistent system") {
  Rng rng(2);
  const Tensor x = tq_test::random_tensor(rng, {10, 3});
  const Tensor w0 = tq_test::random_tensor(rng, {3, 2});
  const Tensor r = matmul(x, w0);
  const Tensor w = solve_least_squares(x, r, 0.0);
  CHECK(max_abs(sub(w, w0)) < 1e-8);
}

TEST_CASE("least squares hand example") {
  const Tensor x = Tensor::from_rows({{1}, {2}});
  const Tensor r = Tensor::from_rows({{2}, {4}});
  const Tensor w = solve_least_squares(x, r, 0.0);
  CHECK(w.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("least squares matches a gradient-descent oracle") {
  Rng rng(3);
  const Tensor x = tq_test::random_tensor(rng, {50, 4});
  const Tensor r = tq_test::random_tensor(rng, {50, 2});
  const double lambda = 1e-6;
  const Tensor w = solve_least_squares(x, r, lambda);

  // Oracle: plain gradient descent on ||R - XW||_F^2 + lambda*||W||_F^2.
  Tensor w_gd({4, 2});
  const Tensor xt = transpose(x);
  const Tensor gram = matmul(xt, x);
  double trace = 0.0;
  for (std::size_t i = 0; i < 4; ++i) trace += gram.at(i, i);
  const double step = 1.0 / (2.0 * trace + lambda);
  for (int iter = 0; iter < 60000; ++iter) {
    const Tensor resid = sub(r, matmul(x, w_gd));
    Tensor grad = scale(matmul(xt, resid), -2.0);
    grad = add(grad, scale(w_gd, 2.0 * lambda));
    w_gd = sub(w_gd, scale(grad, step));
  }
  CHECK(max_abs(sub(w, w_gd)) < 1e-5);
}

TEST_CASE("least squares residual is orthogonal to the column space") {
  Rng rng(4);
  const Tensor x = tq_test::random_tensor(rng, {30, 5});
  const Tensor r = tq_test::random_tensor(rng, {30, 3});
  const Tensor w = solve_least_squares(x, r, 0.0);
  const Tensor resid = sub(r, matmul(x, w));
  CHECK(max_abs(matmul(transpose(x), resid)) < 1e-8);
}

TEST_CASE("least squares throws on a singular system at lambda 0") {
  Tensor x({4, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    x.at(i, 0) = static_cast<double>(i);
    x.at(i, 1) = 2.0 * static_cast<double>(i);  // dependent column
  }
  CHECK_THROWS_AS(solve_least_squares(x, Tensor({4, 1}), 0.0), std::runtime_error);
}

namespace {

Tensor svd_reconstruction(const Svd& f) {
  Tensor us = f.u;
  for (std::size_t i = 0; i < us.rows(); ++i) {
    for (std::size_t j = 0; j < us.cols(); ++j) us.at(i, j) *= f.s[j];
  }
  return matmul(us, f.v);
}

}  // namespace

TEST_CASE("truncated svd is exact on a rank-1 matrix") {
  Rng rng(5);
  const Tensor u = tq_test::random_tensor(rng, {6, 1});
  const Tensor v = tq_test::random_tensor(rng, {1, 4});
  const Tensor w = matmul(u, v);
  const Svd f = truncated_svd(w, 1);
  CHECK(frobenius_norm(sub(svd_reconstruction(f), w)) < 1e-8);
}

TEST_CASE("truncated svd matches Eckart-Young on a diagonal matrix") {
  Tensor w({3, 3});
  w.at(0, 0) = 3.0;
  w.at(1, 1) = 2.0;
  w.at(2, 2) = 1.0;
  const Svd f = truncated_svd(w, 2);
  CHECK(f.s[0] == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(f.s[1] == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(frobenius_norm(sub(svd_reconstruction(f), w)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("full-rank svd reconstructs exactly") {
  Rng rng(6);
  const Tensor w = tq_test::random_tensor(rng, {8, 8});
  const Svd f = truncated_svd(w, 8);
  CHECK(frobenius_norm(sub(svd_reconstruction(f), w)) < 1e-8);
}

TEST_CASE("svd truncation error is monotone in rank") {
  Rng rng(8);
  const Tensor w = tq_test::random_tensor(rng, {7, 5});
  double prev = 1e300;
  for (std::size_t r = 1; r <= 5; ++r) {
    const double err = frobenius_norm(sub(svd_reconstruction(truncated_svd(w, r)), w));
    CHECK(err <= prev + 1e-12);
    prev = err;
  }
}

TEST_CASE("svd handles wide matrices and rank bounds") {
  Rng rng(9);
  const Tensor w = tq_test::random_tensor(rng, {3, 9});
  const Svd f = truncated_svd(w, 3);
  CHECK(f.u.rows() == 3);
  CHECK(f.v.cols() == 9);
  CHECK(frobenius_norm(sub(svd_reconstruction(f), w)) < 1e-8);
  CHECK_THROWS_AS(truncated_svd(w, 4), std::invalid_argument);
  CHECK_THROWS_AS(truncated_svd(w, 0), std::invalid_argument);
}

TEST_CASE("top_k_indices selects by magnitude with index tie-break") {
  CHECK(top_k_indices(Tensor::vector({0, -5, 3}), 1) == std::vector<std::size_t>{1});
  CHECK(top_k_indices(Tensor::vector({2, 2, 2}), 2) == std::vector<std::size_t>{0, 1});

  const Tensor v = Tensor::vector({1, -4, 2, -2, 0.5});
  const auto full = top_k_indices(v, 5);
  CHECK(full == std::vector<std::size_t>{1, 2, 3, 0, 4});
  CHECK_THROWS_AS(top_k_indices(v, 0), std::invalid_argument);
  CHECK_THROWS_AS(top_k_indices(v, 6), std::invalid_argument);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42);
  const Tensor ta = rand_normal(a, {17, 3});
  const Tensor tb = rand_normal(b, {17, 3});
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i] == tb[i]);

  Rng c(42), d(42);
  const Tensor tc = rand_student_t(c, {100}, 3.0);
  const Tensor td = rand_student_t(d, {100}, 3.0);
  for (std::size_t i = 0; i < tc.size(); ++i) CHECK(tc[i] == td[i]);
}

TEST_CASE("student-t draws are heavier tailed than normal") {
  Rng rng(11);
  const Tensor t = rand_student_t(rng, {100000}, 3.0);
  double mean = 0.0;
  for (double v : t.data()) mean += v;
  mean /= static_cast<double>(t.size());
  double m2 = 0.0, m4 = 0.0;
  for (double v : t.data()) {
    const double d = v - mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  m2 /= static_cast<double>(t.size());
  m4 /= static_cast<double>(t.size());
  CHECK(m4 / (m2 * m2) > 3.0);
}

TEST_CASE("student-t rejects dof <= 2") {
  Rng rng(12);
  CHECK_THROWS_AS(rand_student_t(rng, {4}, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(rand_student_t(rng, {4}, 1.5), std::invalid_argument);
}
