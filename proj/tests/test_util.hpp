#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "tailquant/rng.hpp"
#include "tailquant/tensor.hpp"

namespace tq_test {

inline tailquant::Tensor random_tensor(tailquant::Rng& rng, std::vector<std::size_t> shape,
                                       double scale = 1.0) {
  return tailquant::rand_normal(rng, std::move(shape), 0.0, scale);
}

/// Strictly unimodal array with a uniformly random peak: strictly increasing
/// up to the peak, strictly decreasing after it.
inline std::vector<double> random_unimodal(tailquant::Rng& rng, std::size_t n) {
  const std::size_t peak = rng.uniform_index(n);
  std::vector<double> v(n);
  double x = 0.0;
  for (std::size_t i = peak + 1; i-- > 0;) {
    v[i] = x;
    x -= 0.01 + rng.uniform();
  }
  x = v[peak];
  for (std::size_t i = peak + 1; i < n; ++i) {
    x -= 0.01 + rng.uniform();
    v[i] = x;
  }
  return v;
}

inline std::size_t argmax_of(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline double rel_error(double got, double want) {
  return std::abs(got - want) / std::max(1e-12, std::abs(want));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    base_ = std::filesystem::temp_directory_path() /
            ("tailquant_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(base_);
    std::filesystem::create_directories(base_);
  }
  ~TempDir() { std::filesystem::remove_all(base_); }
  std::filesystem::path path() const { return base_; }
  std::string str(const std::string& rel) const { return (base_ / rel).string(); }

 private:
  std::filesystem::path base_;
};

}  // namespace tq_test
