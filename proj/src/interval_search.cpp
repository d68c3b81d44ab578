#include "tailquant/interval_search.hpp"

#include "tailquant/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace tailquant {

CandidateGrid make_grid(const Tensor& x, std::size_t n, GridScale scale, double lo_frac, double hi_frac) {
  if (n < 3) throw std::invalid_argument("make_grid: need at least 3 candidates");
  if (!(lo_frac > 0.0) || !(lo_frac < hi_frac)) {
    throw std::invalid_argument("make_grid: need 0 < lo_frac < hi_frac");
  }
  const double m = max_abs(x);
  if (m == 0.0) throw std::invalid_argument("make_grid: all-zero tensor has no magnitude scale");
  CandidateGrid grid;
  grid.scale = scale;
  grid.lo_frac = lo_frac;
  grid.hi_frac = hi_frac;
  grid.alphas.resize(n);
  const double lo = lo_frac * m, hi = hi_frac * m;
  if (scale == GridScale::Linear) {
    for (std::size_t i = 0; i < n; ++i) {
      grid.alphas[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
  } else {
    const double llo = std::log(lo), lhi = std::log(hi);
    for (std::size_t i = 0; i < n; ++i) {
      grid.alphas[i] = std::exp(llo + (lhi - llo) * static_cast<double>(i) / static_cast<double>(n - 1));
    }
  }
  grid.alphas.front() = lo;
  grid.alphas.back() = hi;
  return grid;
}

double similarity(const Tensor& y_fp, const Tensor& y_alpha, const SimilarityWeights& w) {
  require_same_shape(y_fp, y_alpha, "similarity");
  if (!w.is_ones()) require_same_shape(y_fp, w.g, "similarity weights");
  double acc = 0.0;
  for (std::size_t i = 0; i < y_fp.size(); ++i) {
    const double e = y_fp[i] - y_alpha[i];
    const double we = w.is_ones() ? e : w.g[i] * e;
    acc += we * we;
  }
  return -acc;
}

const char* search_method_name(SearchMethod m) {
  return m == SearchMethod::Exhaustive ? "exhaustive" : "ternary";
}

const char* act_kind_name(ActQuantKind kind) {
  switch (kind) {
    case ActQuantKind::Uniform:
      return "uniform";
    case ActQuantKind::TwinBySign:
      return "twin-sign";
    case ActQuantKind::TwinByThreshold:
      return "twin-threshold";
  }
  return "uniform";
}

ActQuantKind act_kind_from_name(const std::string& name) {
  if (name == "uniform") return ActQuantKind::Uniform;
  if (name == "twin-sign") return ActQuantKind::TwinBySign;
  if (name == "twin-threshold") return ActQuantKind::TwinByThreshold;
  throw std::invalid_argument("unknown activation quantizer kind: " + name);
}

SearchMethod search_method_from_name(const std::string& name) {
  if (name == "exhaustive") return SearchMethod::Exhaustive;
  if (name == "ternary") return SearchMethod::Ternary;
  throw std::invalid_argument("unknown search method: " + name);
}

std::optional<double> SearchTrace::value_at(std::size_t index) const {
  for (const auto& [i, v] : evaluations) {
    if (i == index) return v;
  }
  return std::nullopt;
}

double SearchTrace::chosen_value() const {
  const auto v = value_at(chosen_index);
  if (!v) throw std::logic_error("search trace: chosen index was never evaluated");
  return *v;
}

SearchTrace search_exhaustive(const SimilarityEvaluator& eval, std::size_t n) {
  if (n < 1) throw std::invalid_argument("search_exhaustive: empty candidate set");
  SearchTrace trace;
  trace.method = SearchMethod::Exhaustive;
  trace.evaluations.reserve(n);
  std::size_t best = 0;
  double best_val = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = eval(i);
    trace.evaluations.emplace_back(i, v);
    if (i == 0 || v > best_val) {
      best = i;
      best_val = v;
    }
  }
  trace.chosen_index = best;
  trace.converged = true;
  return trace;
}

SearchTrace search_ternary(const SimilarityEvaluator& eval, std::size_t n, std::size_t eps_idx) {
  if (n < 1) throw std::invalid_argument("search_ternary: empty candidate set");
  if (eps_idx < 2) throw std::invalid_argument("search_ternary: eps_idx must be >= 2");

  SearchTrace trace;
  trace.method = SearchMethod::Ternary;

  std::map<std::size_t, double> memo;
  auto value = [&](std::size_t i) {
    auto it = memo.find(i);
    if (it != memo.end()) return it->second;
    const double v = eval(i);
    memo.emplace(i, v);
    trace.evaluations.emplace_back(i, v);
    return v;
  };

  std::size_t lo = 0, hi = n - 1;
  while (hi - lo > eps_idx) {
    const std::size_t step = (hi - lo) / 3;
    std::size_t m1 = lo + step;
    std::size_t m2 = hi - step;
    if (m1 == m2) m2 = m1 + 1;  // cannot occur while hi-lo > 2; kept for safety
    if (value(m1) < value(m2)) {
      lo = m1;
    } else {
      hi = m2;
    }
  }
  for (std::size_t i = lo; i <= hi; ++i) value(i);

  // Argmax over everything evaluated; under a strictly unimodal landscape
  // this coincides with the final bracket's best.
  std::size_t best = trace.evaluations.front().first;
  double best_val = trace.evaluations.front().second;
  for (const auto& [i, v] : trace.evaluations) {
    if (v > best_val || (v == best_val && i < best)) {
      best = i;
      best_val = v;
    }
  }
  trace.chosen_index = best;
  trace.converged = true;
  return trace;
}

double search_ternary_continuous(const std::function<double(double)>& eval, double lo, double hi,
                                 double eps_rel, std::size_t* eval_count) {
  if (!(lo < hi)) throw std::invalid_argument("search_ternary_continuous: need lo < hi");
  if (!(eps_rel > 0.0)) throw std::invalid_argument("search_ternary_continuous: eps_rel must be positive");
  const double stop = eps_rel * hi;
  std::size_t count = 0;
  while (hi - lo > stop) {
    const double m1 = lo + (hi - lo) / 3.0;
    const double m2 = hi - (hi - lo) / 3.0;
    const double s1 = eval(m1);
    const double s2 = eval(m2);
    count += 2;
    if (s1 < s2) {
      lo = m1;
    } else {
      hi = m2;
    }
  }
  if (eval_count) *eval_count = count;
  return 0.5 * (lo + hi);
}

double delta_from_range(double clip_range, const BitWidthSpec& bits) {
  bits.validate();
  if (!(clip_range > 0.0)) throw std::invalid_argument("delta_from_range: range must be positive");
  return clip_range / static_cast<double>(bits.q_max());
}

SearchTrace run_search(SearchMethod method, const SimilarityEvaluator& eval, std::size_t n,
                       std::size_t eps_idx) {
  return method == SearchMethod::Exhaustive ? search_exhaustive(eval, n)
                                            : search_ternary(eval, n, eps_idx);
}

UniformIntervalResult search_uniform_interval(const std::string& unit_name, const Tensor& target,
                                              const BitWidthSpec& bits,
                                              const std::function<double(const QuantParams&)>& sim_of,
                                              const LayerCalibConfig& cfg) {
  if (max_abs(target) == 0.0) {
    throw std::invalid_argument("interval search: degenerate all-zero tensor for unit " + unit_name);
  }
  CandidateGrid grid = make_grid(target, cfg.grid_n, cfg.grid_scale, cfg.lo_frac, cfg.hi_frac);
  auto eval = [&](std::size_t i) {
    QuantParams p{delta_from_range(grid.alphas[i], bits), bits};
    return sim_of(p);
  };
  SearchTrace trace = run_search(cfg.method, eval, grid.size(), cfg.eps_idx);

  UniformIntervalResult out;
  out.params = QuantParams{delta_from_range(grid.alphas[trace.chosen_index], bits), bits};
  out.search.unit = unit_name;
  out.search.chosen_alpha = grid.alphas[trace.chosen_index];
  out.search.chosen_delta = out.params.delta;
  out.search.grid = std::move(grid);
  out.search.trace = std::move(trace);
  return out;
}

namespace {

Tensor region_values(const Tensor& x, const TwinQuantParams& probe, bool region1) {
  std::vector<double> vals;
  vals.reserve(x.size());
  for (double v : x.data()) {
    if (probe.in_region1(v) == region1) vals.push_back(v);
  }
  if (vals.empty()) return Tensor{};
  return Tensor::vector(std::move(vals));
}

}  // namespace

TwinIntervalResult search_twin_interval(const std::string& unit_name, const Tensor& target,
                                        const BitWidthSpec& bits, TwinPartition partition,
                                        double threshold,
                                        const std::function<double(const TwinQuantParams&)>& sim_of,
                                        const LayerCalibConfig& cfg) {
  if (max_abs(target) == 0.0) {
    throw std::invalid_argument("interval search: degenerate all-zero tensor for unit " + unit_name);
  }

  TwinQuantParams params;
  params.bitwidth = bits;
  params.partition = partition;
  params.threshold = threshold;

  const Tensor r1 = region_values(target, params, true);
  const Tensor r2 = region_values(target, params, false);
  const bool search_r1 = !r1.empty() && max_abs(r1) > 0.0;
  const bool search_r2 = !r2.empty() && max_abs(r2) > 0.0;

  CandidateGrid grid1, grid2;
  if (search_r1) grid1 = make_grid(r1, cfg.grid_n, cfg.grid_scale, cfg.lo_frac, cfg.hi_frac);
  if (search_r2) grid2 = make_grid(r2, cfg.grid_n, cfg.grid_scale, cfg.lo_frac, cfg.hi_frac);

  // Max-range initialization; an unsearchable region inherits the other
  // region's fallback so both steps stay positive.
  const double init1 = search_r1 ? delta_from_range(grid1.alphas.back(), bits) : 0.0;
  const double init2 = search_r2 ? delta_from_range(grid2.alphas.back(), bits) : 0.0;
  params.delta_r1 = search_r1 ? init1 : (search_r2 ? init2 : 1.0);
  params.delta_r2 = search_r2 ? init2 : params.delta_r1;

  TwinIntervalResult out;
  for (int round = 0; round < cfg.twin_rounds; ++round) {
    for (int region = 1; region <= 2; ++region) {
      const bool is_r1 = region == 1;
      if ((is_r1 && !search_r1) || (!is_r1 && !search_r2)) continue;
      const CandidateGrid& grid = is_r1 ? grid1 : grid2;
      auto eval = [&](std::size_t i) {
        TwinQuantParams p = params;
        (is_r1 ? p.delta_r1 : p.delta_r2) = delta_from_range(grid.alphas[i], bits);
        return sim_of(p);
      };
      SearchTrace trace = run_search(cfg.method, eval, grid.size(), cfg.eps_idx);
      const double chosen_alpha = grid.alphas[trace.chosen_index];
      const double chosen_delta = delta_from_range(chosen_alpha, bits);
      (is_r1 ? params.delta_r1 : params.delta_r2) = chosen_delta;

      UnitSearch rec;
      rec.unit = unit_name + (is_r1 ? ".r1@" : ".r2@") + std::to_string(round);
      rec.trace = std::move(trace);
      rec.grid = grid;
      rec.chosen_alpha = chosen_alpha;
      rec.chosen_delta = chosen_delta;
      out.searches.push_back(std::move(rec));
    }
  }
  out.params = params;
  return out;
}

std::size_t LayerCalibResult::total_evaluations() const {
  std::size_t n = 0;
  for (const auto& s : searches) n += s.trace.distinct_evaluations();
  return n;
}

LayerCalibResult calibrate_layer(const Tensor& weight, const Tensor& x_cal, const LayerForward& forward,
                                 const SimilarityWeights& w, const LayerCalibConfig& cfg) {
  if (x_cal.size() == 0) throw std::invalid_argument("calibrate_layer: empty calibration input");
  if (max_abs(weight) == 0.0) {
    throw std::invalid_argument("calibrate_layer: degenerate all-zero weight tensor");
  }
  if (max_abs(x_cal) == 0.0) {
    throw std::invalid_argument("calibrate_layer: degenerate all-zero calibration input");
  }

  const Tensor y_fp = forward(weight, x_cal);
  LayerCalibResult result;

  // Weight interval first.
  auto weight_res = search_uniform_interval(
      "weight", weight, cfg.weight_bits,
      [&](const QuantParams& p) { return similarity(y_fp, forward(quantize_uniform(weight, p), x_cal), w); },
      cfg);
  result.weight_params = weight_res.params;
  result.searches.push_back(std::move(weight_res.search));
  const Tensor w_q = quantize_uniform(weight, result.weight_params);

  // Then the activation interval, with the chosen quantized weight held fixed.
  if (cfg.act_kind == ActQuantKind::Uniform) {
    auto act_res = search_uniform_interval(
        "activation", x_cal, cfg.act_bits,
        [&](const QuantParams& p) { return similarity(y_fp, forward(w_q, quantize_uniform(x_cal, p)), w); },
        cfg);
    result.act_params = act_res.params;
    result.searches.push_back(std::move(act_res.search));
  } else {
    const TwinPartition part =
        cfg.act_kind == ActQuantKind::TwinBySign ? TwinPartition::BySign : TwinPartition::ByThreshold;
    auto twin_res = search_twin_interval(
        "activation", x_cal, cfg.act_bits, part, cfg.twin_threshold,
        [&](const TwinQuantParams& p) { return similarity(y_fp, forward(w_q, quantize_twin(x_cal, p)), w); },
        cfg);
    result.act_params = twin_res.params;
    for (auto& s : twin_res.searches) result.searches.push_back(std::move(s));
  }
  return result;
}

}  // namespace tailquant
