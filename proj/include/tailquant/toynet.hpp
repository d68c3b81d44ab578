#pragma once

#include <cstdint>
#include <vector>

#include "tailquant/calibration.hpp"
#include "tailquant/rng.hpp"
#include "tailquant/tensor.hpp"

namespace tailquant {

struct ToyNetConfig {
  std::size_t depth = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t seq_len = 32;
  std::size_t outlier_channels = 4;  // channels carrying heavy-tailed energy
  double outlier_scale = 8.0;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t submodule_count() const { return 2 * depth; }
  void validate() const;
};

/// Pre-norm residual block weights. Projections map via y = x * W^T, so a
/// weight's rows are its output channels.
struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;
  Tensor wq, wk, wv, wo;  // d_model x d_model
  Tensor w_fc1;           // d_ff x d_model
  Tensor w_fc2;           // d_model x d_ff
};

struct ToyNet {
  ToyNetConfig config;
  std::vector<BlockWeights> blocks;
};

/// Seeded Gaussian init with the designated output channels of the value
/// projection and the first MLP layer scaled up, which realizes heavy-tailed
/// branch activations. Norm parameters are jittered around (1, 0).
ToyNet make_toynet(const ToyNetConfig& cfg);

/// All parameters zero (norm gains included); forwards to zero on any input.
ToyNet make_zero_toynet(const ToyNetConfig& cfg);

/// Recorded activations for one submodule. Attention fills q/k/v/context;
/// the MLP fills fc1_out. `nonlin` holds post-softmax probabilities
/// (head-stacked rows) or post-GELU activations.
struct SubmoduleTaps {
  Tensor input;    // post-norm submodule input, seq x d_model
  Tensor nonlin;
  Tensor output;   // branch output before the residual add
  Tensor q, k, v, context;
  Tensor fc1_out;
};

struct ForwardTaps {
  std::vector<SubmoduleTaps> submodules;  // forward order, 2 per block
  std::vector<Tensor> block_outputs;      // residual stream after each block
  Tensor output;
};

enum class TapPoint { Input, Nonlin, Output };

/// Additive perturbation injected at one tap point (finite-difference probes
/// of intermediate gradients).
struct Perturbation {
  std::size_t submodule = 0;
  TapPoint point = TapPoint::Input;
  Tensor delta;
};

Tensor forward(const ToyNet& net, const Tensor& x, ForwardTaps* taps = nullptr,
               const Perturbation* perturb = nullptr);

struct SubmoduleGrads {
  Tensor input;
  Tensor nonlin;
  Tensor output;
  Tensor q, k, v, context;
  Tensor fc1_out;
};

struct BackwardResult {
  std::vector<SubmoduleGrads> submodules;  // forward order
  Tensor input_grad;
};

/// Analytic gradients of 0.5*||output||^2 (or of <upstream, output> when an
/// upstream gradient is supplied) with respect to every tapped activation.
BackwardResult backward_wrt_activations(const ToyNet& net, const Tensor& x,
                                        const Tensor* upstream = nullptr);

/// Synthetic calibration pool: clean seeded-Gaussian inputs plus a planted
/// fraction carrying heavy-tailed noise on the designated channels. Planted
/// ids are recorded as ground truth.
CalibrationPool gen_calibration_pool(const ToyNetConfig& cfg, std::size_t m, double outlier_fraction,
                                     Rng& rng);

/// Stability-score hook: per-block token representations of a payload.
LayerTapModel layer_tap_model(const ToyNet& net);

double gelu(double x);
double gelu_derivative(double x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

/// Head-stacked softmax attention probabilities: row (head*seq + i) holds
/// the distribution of query i over keys.
Tensor attention_probs(const ToyNetConfig& cfg, const Tensor& q, const Tensor& k);

/// Per-head probs*values, heads re-concatenated to seq x d_model.
Tensor attention_context(const ToyNetConfig& cfg, const Tensor& probs, const Tensor& v);

inline constexpr double kLayerNormEps = 1e-12;

}  // namespace tailquant
