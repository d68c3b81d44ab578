#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "tailquant/pipeline.hpp"
#include "tailquant/toynet.hpp"

namespace tailquant {

/// Every knob of a batch run, embedded verbatim in each report so any output
/// is re-derivable from its own config block.
struct RunConfig {
  ToyNetConfig net{};

  std::size_t pool_size = 20;
  double pool_outlier_fraction = 0.25;
  std::uint64_t pool_seed = 2;

  std::size_t calib_target = 8;  // stage-2 clusters = calib_target / 2
  std::uint64_t select_seed = 3;
  double stability_eps = 1e-8;

  int weight_bits = 4;
  int act_bits = 8;
  std::string method = "ternary";
  std::size_t grid_n = 100;
  double lo_frac = 0.1;
  double hi_frac = 1.2;
  std::string grid_scale = "linear";
  std::size_t eps_idx = 2;
  int twin_rounds = 2;
  std::string softmax_quant = "twin-threshold";
  std::string gelu_quant = "twin-sign";
  double softmax_threshold = 0.0625;
  bool use_gradient_weights = false;
  bool sim_on_final_output = false;

  bool compensate = true;
  double rho = 0.01;
  double tau = 0.007;
  double tre_eps = 1e-12;
  std::size_t adapter_rank = 16;
  double ridge_lambda = 1e-6;
  bool fit_all_adapters = false;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);

  PipelineOptions pipeline_options() const;
  void validate() const;
};

}  // namespace tailquant
