#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "tailquant/tensor.hpp"

namespace tailquant {

/// Deterministic random source. The engine (mt19937_64, pinned by the C++
/// standard) and the samplers below are fixed, so a given seed produces the
/// same stream on every platform. Distributions are hand-rolled because the
/// standard library's are not bit-reproducible across implementations.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64+box-muller";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0,1), 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (cosine arm only, two uniforms per draw).
  double normal();

  /// Student-t with dof > 2 via Bailey's polar-free transform.
  double student_t(double dof);

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Tensor rand_normal(Rng& rng, std::vector<std::size_t> shape, double mean = 0.0, double stddev = 1.0);
Tensor rand_student_t(Rng& rng, std::vector<std::size_t> shape, double dof);

}  // namespace tailquant
