#include "tailquant/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tailquant {

void BitWidthSpec::validate() const {
  if (bits < 2 || bits > 16) {
    throw std::invalid_argument("bit width must be in [2,16], got " + std::to_string(bits));
  }
}

void QuantParams::validate() const {
  bitwidth.validate();
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw std::invalid_argument("quantization step must be positive and finite");
  }
}

void TwinQuantParams::validate() const {
  bitwidth.validate();
  if (!(delta_r1 > 0.0) || !std::isfinite(delta_r1) || !(delta_r2 > 0.0) || !std::isfinite(delta_r2)) {
    throw std::invalid_argument("twin quantization steps must be positive and finite");
  }
  if (partition == TwinPartition::ByThreshold && (!(threshold >= 0.0) || !std::isfinite(threshold))) {
    throw std::invalid_argument("twin threshold must be nonnegative and finite");
  }
}

double round_half_even(double v) {
  const double r = std::round(v);  // ties away from zero
  if (std::abs(v - std::trunc(v)) == 0.5) {
    const double f = std::floor(v);
    return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
  }
  return r;
}

namespace {

inline double quantize_value(double x, double delta, long q_min, long q_max) {
  double level = round_half_even(x / delta);
  level = std::clamp(level, static_cast<double>(q_min), static_cast<double>(q_max));
  return level * delta;
}

}  // namespace

Tensor quantize_uniform(const Tensor& x, const QuantParams& p) {
  p.validate();
  if (!x.all_finite()) throw std::invalid_argument("quantize_uniform: non-finite input");
  const long qmin = p.bitwidth.q_min(), qmax = p.bitwidth.q_max();
  Tensor out = x;
  for (double& v : out.data()) v = quantize_value(v, p.delta, qmin, qmax);
  return out;
}

Tensor quantize_twin(const Tensor& x, const TwinQuantParams& p) {
  p.validate();
  if (!x.all_finite()) throw std::invalid_argument("quantize_twin: non-finite input");
  const long qmin = p.bitwidth.q_min(), qmax = p.bitwidth.q_max();
  Tensor out = x;
  for (double& v : out.data()) {
    const double delta = p.in_region1(v) ? p.delta_r1 : p.delta_r2;
    v = quantize_value(v, delta, qmin, qmax);
  }
  return out;
}

double quant_error(const Tensor& x, const Tensor& xq) {
  require_same_shape(x, xq, "quant_error");
  if (x.size() == 0) throw std::invalid_argument("quant_error: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - xq[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

}  // namespace tailquant
