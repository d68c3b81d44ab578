#pragma once

#include <string>
#include <vector>

#include "tailquant/compensation.hpp"
#include "tailquant/interval_search.hpp"
#include "tailquant/toynet.hpp"

namespace tailquant {

struct PipelineOptions {
  BitWidthSpec weight_bits{4, true};
  BitWidthSpec act_bits{8, true};
  SearchMethod method = SearchMethod::Ternary;
  std::size_t grid_n = 100;
  GridScale grid_scale = GridScale::Linear;
  double lo_frac = 0.1;
  double hi_frac = 1.2;
  std::size_t eps_idx = 2;
  int twin_rounds = 2;
  // Region scheme per nonlinearity; the defaults route post-softmax values
  // through a magnitude threshold and post-GELU values through a sign split.
  ActQuantKind softmax_quant = ActQuantKind::TwinByThreshold;
  ActQuantKind gelu_quant = ActQuantKind::TwinBySign;
  double softmax_threshold = 0.0625;  // twin split point for post-softmax values
  bool use_gradient_weights = false;  // Sim weighting from the analytic backward
  bool sim_on_final_output = false;   // evaluate Sim on the network output instead of the local one
  bool compensate = true;
  TREConfig tre_config{};
  std::size_t adapter_rank = 16;
  double ridge_lambda = 1e-6;
  bool fit_all_adapters = false;  // fit even below tau, keeping only the gate decision

  LayerCalibConfig layer_config() const;
  void validate() const;
};

/// Quantization state of one residual submodule. Weight order is
/// [wq, wk, wv, wo] for attention and [fc1, fc2] for the MLP.
struct SubmoduleQuant {
  std::vector<QuantParams> weight_params;
  QuantParams input_params;
  TwinQuantParams nonlin_params;
  Adapter adapter;
};

struct QuantizedToyNet {
  ToyNet net;  // full-precision weights
  PipelineOptions options;
  std::vector<SubmoduleQuant> modules;             // forward order, 2 per block
  std::vector<std::vector<Tensor>> quant_weights;  // cached fake-quantized weights
};

/// Rebuild the fake-quantized weight cache from modules + net.
void refresh_quant_weights(QuantizedToyNet& qnet);

/// Forward through the quantized+compensated network; module_outputs, when
/// given, receives each submodule's compensated branch output.
Tensor quantized_forward(const QuantizedToyNet& qnet, const Tensor& x,
                         std::vector<Tensor>* module_outputs = nullptr);

/// Per-submodule activations of the quantized forward, for post-hoc checks:
/// the post-norm input, the branch output before the adapter, and after it.
struct QuantizedForwardTaps {
  std::vector<Tensor> inputs;
  std::vector<Tensor> pre_adapter;
  std::vector<Tensor> post_adapter;
};

Tensor quantized_forward_tapped(const QuantizedToyNet& qnet, const Tensor& x,
                                QuantizedForwardTaps& taps);

struct ModuleReport {
  std::string name;  // "block0.attn", "block0.mlp", ...
  std::vector<UnitSearch> searches;
  double tre_at_fit = 0.0;
  bool adapter_active = false;
  double mse_pre_adapter = 0.0;   // calibration-batch output MSE before the adapter
  double mse_post_adapter = 0.0;  // and after it
  double accumulated_mse = 0.0;   // equals mse_post_adapter on calibration data
  double accumulated_tre = 0.0;
  std::size_t eval_count = 0;
  std::size_t adapter_bytes = 0;
};

struct PipelineReport {
  std::vector<ModuleReport> modules;  // network forward order
  std::size_t total_evaluations = 0;
  std::size_t total_adapter_bytes = 0;
  double wall_time_ms = 0.0;  // informative only, excluded from reproducibility
};

struct PipelineResult {
  QuantizedToyNet qnet;
  PipelineReport report;
};

/// Sequential calibration: for every submodule in forward order, search the
/// weight intervals then the activation intervals on inputs propagated
/// through the already-quantized-and-compensated prefix, then fit the
/// TRE-gated adapter against the full-precision targets.
PipelineResult run_pipeline(const ToyNet& net, const std::vector<Tensor>& calib,
                            const PipelineOptions& opt);

/// Full pipeline from a raw pool: two-stage calibration-set construction
/// first, then sequential calibration on the selected payloads.
PipelineResult run_pipeline(const ToyNet& net, const CalibrationPool& pool, std::size_t n_target,
                            std::uint64_t select_seed, const PipelineOptions& opt);

/// Per-module output MSE between the two networks on a probe input, in
/// forward order (2*depth entries).
std::vector<double> measure_accumulated_error(const ToyNet& fp_net, const QuantizedToyNet& qnet,
                                              const Tensor& probe);

/// Same comparison between two full-precision networks.
std::vector<double> measure_accumulated_error(const ToyNet& fp_net, const ToyNet& other,
                                              const Tensor& probe);

std::string submodule_name(std::size_t index);

/// Rows of all tensors stacked top to bottom (shared column count).
Tensor stack_rows(const std::vector<Tensor>& parts);

}  // namespace tailquant
