#include "tailquant/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tailquant {

double Rng::normal() {
  // u1 in (0,1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::student_t(double dof) {
  if (!(dof > 2.0)) {
    throw std::invalid_argument("student_t requires dof > 2, got " + std::to_string(dof));
  }
  // Bailey (1994): sqrt(nu*(u1^(-2/nu)-1)) * cos(2*pi*u2) is t-distributed.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(dof * (std::pow(u1, -2.0 / dof) - 1.0)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index requires n > 0");
  // Rejection sampling over the top bits keeps the mapping unbiased.
  const std::uint64_t span = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % span;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return static_cast<std::size_t>(r % span);
}

Tensor rand_normal(Rng& rng, std::vector<std::size_t> shape, double mean, double stddev) {
  if (!(stddev >= 0.0) || !std::isfinite(mean) || !std::isfinite(stddev)) {
    throw std::invalid_argument("rand_normal: invalid mean/stddev");
  }
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = mean + stddev * rng.normal();
  return t;
}

Tensor rand_student_t(Rng& rng, std::vector<std::size_t> shape, double dof) {
  if (!(dof > 2.0)) {
    throw std::invalid_argument("rand_student_t requires dof > 2, got " + std::to_string(dof));
  }
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.student_t(dof);
  return t;
}

}  // namespace tailquant
