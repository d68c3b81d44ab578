#pragma once

#include <cmath>

#include "tailquant/tensor.hpp"

namespace tailquant {

struct BitWidthSpec {
  int bits = 8;
  bool is_signed = true;

  long q_min() const { return is_signed ? -(1L << (bits - 1)) : 0L; }
  long q_max() const { return is_signed ? (1L << (bits - 1)) - 1 : (1L << bits) - 1; }
  void validate() const;
};

struct QuantParams {
  double delta = 1.0;  // quantization step
  BitWidthSpec bitwidth;
  void validate() const;
};

/// Region partition for the two-interval quantizer. BySign puts x < 0 in R1
/// and x >= 0 in R2; ByThreshold puts |x| <= t in R1 and |x| > t in R2.
enum class TwinPartition { BySign, ByThreshold };

struct TwinQuantParams {
  double delta_r1 = 1.0;
  double delta_r2 = 1.0;
  BitWidthSpec bitwidth;
  TwinPartition partition = TwinPartition::BySign;
  double threshold = 0.0;  // ByThreshold only
  void validate() const;

  bool in_region1(double x) const {
    return partition == TwinPartition::BySign ? x < 0.0 : std::abs(x) <= threshold;
  }
};

/// Round to nearest, ties to even, independent of the FPU rounding mode.
double round_half_even(double v);

/// clip(round(x/delta), q_min, q_max) * delta, elementwise.
Tensor quantize_uniform(const Tensor& x, const QuantParams& p);

/// Region-selected uniform rule with the region's own step.
Tensor quantize_twin(const Tensor& x, const TwinQuantParams& p);

/// Plain MSE between a tensor and its quantized image.
double quant_error(const Tensor& x, const Tensor& xq);

}  // namespace tailquant
