#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "tailquant/quantizer.hpp"
#include "tailquant/tensor.hpp"

namespace tailquant {

enum class GridScale { Linear, Log };

/// Ascending clipping-range candidates, expressed as fractions of max|x|.
struct CandidateGrid {
  std::vector<double> alphas;
  GridScale scale = GridScale::Linear;
  double lo_frac = 0.1;
  double hi_frac = 1.2;
  std::size_t size() const { return alphas.size(); }
};

CandidateGrid make_grid(const Tensor& x, std::size_t n, GridScale scale, double lo_frac, double hi_frac);

/// Optional per-element sensitivity weights; an empty tensor means
/// constant ones (plain squared error).
struct SimilarityWeights {
  Tensor g;
  bool is_ones() const { return g.empty(); }
  static SimilarityWeights ones() { return {}; }
  static SimilarityWeights from(Tensor grad) { return {std::move(grad)}; }
};

/// Negative weighted squared error: -||g . (y_fp - y_alpha)||_2^2.
double similarity(const Tensor& y_fp, const Tensor& y_alpha, const SimilarityWeights& w);

enum class SearchMethod { Exhaustive, Ternary };

const char* search_method_name(SearchMethod m);
SearchMethod search_method_from_name(const std::string& name);

struct SearchTrace {
  std::vector<std::pair<std::size_t, double>> evaluations;  // (index, similarity) in eval order
  std::size_t chosen_index = 0;
  SearchMethod method = SearchMethod::Exhaustive;
  bool converged = true;
  std::size_t distinct_evaluations() const { return evaluations.size(); }
  std::optional<double> value_at(std::size_t index) const;
  double chosen_value() const;
};

using SimilarityEvaluator = std::function<double(std::size_t)>;

/// Evaluate every candidate; argmax with ties to the lowest index.
SearchTrace search_exhaustive(const SimilarityEvaluator& eval, std::size_t n);

/// Discrete ternary search over [0, n-1]. Shrinks the bracket via two
/// interior probes per iteration until it spans at most eps_idx indices,
/// then sweeps the remaining bracket. Similarities are memoized so no index
/// is evaluated twice.
SearchTrace search_ternary(const SimilarityEvaluator& eval, std::size_t n, std::size_t eps_idx = 2);

/// Continuous-bracket variant over a real interval: probes at the third
/// points until hi - lo <= eps_rel * initial_hi. Returns the bracket
/// midpoint; eval_count reports the number of function calls.
double search_ternary_continuous(const std::function<double(double)>& eval, double lo, double hi,
                                 double eps_rel, std::size_t* eval_count = nullptr);

/// Step size realizing a given clipping range under a bit width.
double delta_from_range(double clip_range, const BitWidthSpec& bits);

// ---------------------------------------------------------------------------
// Layer-level calibration

enum class ActQuantKind { Uniform, TwinBySign, TwinByThreshold };

const char* act_kind_name(ActQuantKind kind);
ActQuantKind act_kind_from_name(const std::string& name);

struct LayerCalibConfig {
  SearchMethod method = SearchMethod::Ternary;
  std::size_t grid_n = 100;
  GridScale grid_scale = GridScale::Linear;
  double lo_frac = 0.1;
  double hi_frac = 1.2;
  std::size_t eps_idx = 2;
  BitWidthSpec weight_bits{8, true};
  BitWidthSpec act_bits{8, true};
  ActQuantKind act_kind = ActQuantKind::Uniform;
  double twin_threshold = 0.0625;  // ByThreshold partitions only
  int twin_rounds = 2;
};

using ActQuantParams = std::variant<QuantParams, TwinQuantParams>;

struct UnitSearch {
  std::string unit;  // "weight", "activation", "activation.r1@0", ...
  SearchTrace trace;
  CandidateGrid grid;
  double chosen_alpha = 0.0;
  double chosen_delta = 0.0;
};

struct LayerCalibResult {
  QuantParams weight_params;
  ActQuantParams act_params;
  std::vector<UnitSearch> searches;  // weight first, then activation round(s)
  std::size_t total_evaluations() const;
};

/// Producing y from (possibly quantized) weight and activation.
using LayerForward = std::function<Tensor(const Tensor& w, const Tensor& x)>;

/// Calibrate one quantizable unit: search the weight interval first, then
/// the activation interval (alternating twin searches when configured), each
/// maximizing similarity of the layer's local output against the
/// full-precision output.
LayerCalibResult calibrate_layer(const Tensor& weight, const Tensor& x_cal, const LayerForward& forward,
                                 const SimilarityWeights& w, const LayerCalibConfig& cfg);

// Shared search drivers, also used by the network pipeline.

SearchTrace run_search(SearchMethod method, const SimilarityEvaluator& eval, std::size_t n,
                       std::size_t eps_idx);

struct UniformIntervalResult {
  QuantParams params;
  UnitSearch search;
};

/// One-dimensional interval search for a single tensor: grid from the
/// tensor's magnitude, similarity supplied by the caller per QuantParams.
UniformIntervalResult search_uniform_interval(const std::string& unit_name, const Tensor& target,
                                              const BitWidthSpec& bits,
                                              const std::function<double(const QuantParams&)>& sim_of,
                                              const LayerCalibConfig& cfg);

struct TwinIntervalResult {
  TwinQuantParams params;
  std::vector<UnitSearch> searches;
};

/// Alternating per-region interval searches for the two-interval quantizer.
/// Each region gets its own grid from its own values; regions with no
/// nonzero member keep a fixed fallback step and are not searched.
TwinIntervalResult search_twin_interval(const std::string& unit_name, const Tensor& target,
                                        const BitWidthSpec& bits, TwinPartition partition,
                                        double threshold,
                                        const std::function<double(const TwinQuantParams&)>& sim_of,
                                        const LayerCalibConfig& cfg);

}  // namespace tailquant
