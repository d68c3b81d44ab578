#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tailquant/bundle.hpp"
#include "tailquant/io.hpp"
#include "tailquant/linalg.hpp"
#include "tailquant/pipeline.hpp"
#include "tailquant/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tailquant;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitVerify = 3;

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

RunConfig resolve_config(const std::string& config_path) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::load(config_path);
  return cfg;
}

void parse_bits(const std::string& spec, RunConfig& cfg) {
  const auto comma = spec.find(',');
  if (comma == std::string::npos) {
    throw std::invalid_argument("--bits expects W,A (e.g. 4,8), got " + spec);
  }
  cfg.weight_bits = std::stoi(spec.substr(0, comma));
  cfg.act_bits = std::stoi(spec.substr(comma + 1));
}

struct CalibrationInputs {
  std::vector<std::string> ids;
  std::vector<Tensor> payloads;
  std::string resolved_path;
};

// --calib accepts a selection JSON (which references its pool) or a pool
// bundle manifest (selection is then run with the config's seed/target).
CalibrationInputs load_calibration(const std::string& calib_path, const RunConfig& cfg) {
  const json j = load_json_file(calib_path);
  CalibrationInputs out;
  out.resolved_path = fs::absolute(calib_path).string();

  if (j.value("kind", "") == "selection") {
    const std::string pool_path = j.at("pool").get<std::string>();
    const CalibrationPool pool = read_pool_bundle(pool_path);
    for (const auto& id : j.at("selected_ids")) {
      out.ids.push_back(id.get<std::string>());
      out.payloads.push_back(pool.by_id(out.ids.back()).payload);
    }
    return out;
  }
  if (j.value("format", "") == "tensor-bundle-v1") {
    const CalibrationPool pool = read_pool_bundle(calib_path);
    Rng rng(cfg.select_seed);
    const SelectionResult sel = build_calibration_set(pool, cfg.calib_target, rng);
    for (const auto& id : sel.selected_ids) {
      out.ids.push_back(id);
      out.payloads.push_back(pool.by_id(id).payload);
    }
    return out;
  }
  throw std::runtime_error("--calib must point to a selection JSON or a pool bundle: " + calib_path);
}

int cmd_gen(const std::string& config_path, const std::string& out_dir) {
  RunConfig cfg = resolve_config(config_path);
  cfg.validate();

  const ToyNet net = make_toynet(cfg.net);
  Rng pool_rng(cfg.pool_seed);
  const CalibrationPool pool =
      gen_calibration_pool(cfg.net, cfg.pool_size, cfg.pool_outlier_fraction, pool_rng);

  fs::create_directories(out_dir);
  write_net_bundle((fs::path(out_dir) / "net.json").string(), net);
  write_pool_bundle((fs::path(out_dir) / "pool.json").string(), pool);
  atomic_write_file((fs::path(out_dir) / "config.json").string(), cfg.to_json().dump(2) + "\n");

  std::cout << "wrote net (" << cfg.net.depth << " blocks, d_model " << cfg.net.d_model << ") and pool ("
            << pool.size() << " samples, " << pool.planted_outlier_ids.size() << " planted outliers) to "
            << out_dir << "\n";
  return kExitOk;
}

int cmd_select(const std::string& pool_path, std::size_t n_target, std::uint64_t seed,
               const std::string& out_file, const std::string& net_path,
               const std::string& config_path) {
  if (n_target == 0 || n_target % 2 != 0) {
    std::cerr << "error: --n must be even and positive\n";
    return kExitUsage;
  }
  RunConfig cfg = resolve_config(config_path);
  const CalibrationPool pool = read_pool_bundle(pool_path);

  Rng rng(seed);
  const SelectionResult sel = build_calibration_set(pool, n_target, rng);

  // Stability diagnostics need a model; use --net or a sibling net.json.
  StabilityReport stability;
  bool have_stability = false;
  std::string resolved_net = net_path;
  if (resolved_net.empty()) {
    const fs::path sibling = fs::path(pool_path).parent_path() / "net.json";
    if (fs::exists(sibling)) resolved_net = sibling.string();
  }
  if (!resolved_net.empty()) {
    const ToyNet net = read_net_bundle(resolved_net);
    stability = stability_scores(pool, layer_tap_model(net), cfg.stability_eps);
    have_stability = true;
  }

  json out = selection_to_json(sel, have_stability ? &stability : nullptr,
                               fs::absolute(pool_path).string(), seed);
  std::size_t planted_selected = 0;
  for (const auto& id : sel.selected_ids) {
    for (const auto& planted : pool.planted_outlier_ids) {
      if (id == planted) ++planted_selected;
    }
  }
  out["planted_selected"] = planted_selected;
  atomic_write_file(out_file, out.dump(2) + "\n");
  std::cout << "selected " << sel.selected_ids.size() << " of " << pool.size() << " samples ("
            << planted_selected << " planted outliers) -> " << out_file << "\n";
  return kExitOk;
}

int cmd_quantize(const std::string& net_path, const std::string& calib_path, const std::string& out_dir,
                 RunConfig cfg) {
  cfg.validate();
  const ToyNet net = read_net_bundle(net_path);
  const CalibrationInputs calib = load_calibration(calib_path, cfg);

  PipelineResult result = run_pipeline(net, calib.payloads, cfg.pipeline_options());

  fs::create_directories(out_dir);
  json report = report_to_json(result.report, cfg);
  report["inputs"] = {{"net", fs::absolute(net_path).string()},
                      {"calib", calib.resolved_path},
                      {"selected_ids", calib.ids}};
  atomic_write_file((fs::path(out_dir) / "report.json").string(), report.dump(2) + "\n");
  write_qnet_bundle((fs::path(out_dir) / "quantized_net.json").string(), result.qnet);
  write_curve_csvs((fs::path(out_dir) / "curves").string(), result.report);
  atomic_write_file((fs::path(out_dir) / "accum.csv").string(), render_accum_csv(report));

  std::size_t active = 0;
  for (const auto& m : result.report.modules) active += m.adapter_active ? 1 : 0;
  std::cout << "quantized " << result.report.modules.size() << " modules, "
            << result.report.total_evaluations << " similarity evaluations, " << active
            << " active adapters -> " << out_dir << "\n";
  return kExitOk;
}

int cmd_report(const std::string& run_dir, const std::string& format) {
  const json report = load_json_file((fs::path(run_dir) / "report.json").string());
  if (format == "json") {
    std::cout << report.dump(2) << "\n";
  } else if (format == "csv") {
    std::cout << render_accum_csv(report);
  } else if (format == "md") {
    std::cout << render_report_markdown(report);
  } else {
    std::cerr << "error: unknown format " << format << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

bool strictly_unimodal(const std::vector<double>& v) {
  std::size_t peak = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[peak]) peak = i;
  }
  for (std::size_t i = 0; i < peak; ++i) {
    if (!(v[i] < v[i + 1])) return false;
  }
  for (std::size_t i = peak; i + 1 < v.size(); ++i) {
    if (!(v[i] > v[i + 1])) return false;
  }
  return true;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.data() == b.data();
}

int cmd_verify(const std::string& run_dir) {
  const json stored_report = load_json_file((fs::path(run_dir) / "report.json").string());
  const QuantizedToyNet stored_qnet =
      read_qnet_bundle((fs::path(run_dir) / "quantized_net.json").string());
  const RunConfig cfg = RunConfig::from_json(stored_report.at("config"));
  const std::string net_path = stored_report.at("inputs").at("net").get<std::string>();
  const std::string calib_path = stored_report.at("inputs").at("calib").get<std::string>();

  const ToyNet net = read_net_bundle(net_path);
  const CalibrationInputs calib = load_calibration(calib_path, cfg);

  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    std::cout << (ok ? "[ok]   " : "[FAIL] ") << what << "\n";
    if (!ok) failures.push_back(what);
  };

  // Deterministic re-derivation must reproduce the report bit for bit.
  PipelineResult rerun = run_pipeline(net, calib.payloads, cfg.pipeline_options());
  {
    json expected = report_to_json(rerun.report, cfg);
    json got = stored_report;
    got.erase("timing");
    got.erase("inputs");
    expected.erase("timing");
    check(expected == got, "report matches deterministic re-run");
  }

  // Stored bundle equals the re-run state at storage precision.
  {
    bool ok = stored_qnet.modules.size() == rerun.qnet.modules.size();
    for (std::size_t i = 0; ok && i < rerun.qnet.modules.size(); ++i) {
      const SubmoduleQuant& a = stored_qnet.modules[i];
      const SubmoduleQuant& b = rerun.qnet.modules[i];
      ok = ok && a.weight_params.size() == b.weight_params.size();
      for (std::size_t w = 0; ok && w < b.weight_params.size(); ++w) {
        ok = ok && a.weight_params[w].delta == b.weight_params[w].delta;
      }
      ok = ok && a.input_params.delta == b.input_params.delta;
      ok = ok && a.nonlin_params.delta_r1 == b.nonlin_params.delta_r1;
      ok = ok && a.nonlin_params.delta_r2 == b.nonlin_params.delta_r2;
      ok = ok && a.adapter.active == b.adapter.active;
      ok = ok && tensors_equal(a.adapter.u, to_storage_precision(b.adapter.u));
      ok = ok && tensors_equal(a.adapter.v, to_storage_precision(b.adapter.v));
      ok = ok && tensors_equal(a.adapter.b, to_storage_precision(b.adapter.b));
    }
    check(ok, "quantized-net bundle matches re-run (intervals + adapters)");
  }

  // Recorded landscapes: chosen index is the argmax of what was evaluated;
  // on strictly unimodal exhaustive landscapes ternary must agree.
  {
    bool argmax_ok = true, ternary_ok = true;
    for (const auto& jm : stored_report.at("modules")) {
      for (const auto& js : jm.at("searches")) {
        const auto& evals = js.at("evaluations");
        std::size_t best_idx = 0;
        double best_val = 0.0;
        bool first = true;
        for (const auto& e : evals) {
          const std::size_t idx = e.at(0).get<std::size_t>();
          const double val = e.at(1).get<double>();
          if (first || val > best_val || (val == best_val && idx < best_idx)) {
            best_idx = idx;
            best_val = val;
            first = false;
          }
        }
        const std::size_t chosen = js.at("chosen_index").get<std::size_t>();
        if (chosen != best_idx) argmax_ok = false;

        if (js.at("method").get<std::string>() == "exhaustive") {
          std::vector<double> landscape(evals.size());
          for (const auto& e : evals) landscape.at(e.at(0).get<std::size_t>()) = e.at(1).get<double>();
          if (strictly_unimodal(landscape)) {
            const SearchTrace t = search_ternary(
                [&](std::size_t i) { return landscape[i]; }, landscape.size(), cfg.eps_idx);
            if (t.chosen_index != chosen) ternary_ok = false;
          }
        }
      }
    }
    check(argmax_ok, "recorded chosen indices are evaluation argmaxes");
    check(ternary_ok, "ternary search agrees on recorded unimodal landscapes");
  }

  // Least-squares optimality and TRE recomputation against an exact
  // re-propagation of the calibration batch.
  {
    std::vector<QuantizedForwardTaps> taps(calib.payloads.size());
    for (std::size_t s = 0; s < calib.payloads.size(); ++s) {
      quantized_forward_tapped(rerun.qnet, calib.payloads[s], taps[s]);
    }
    std::vector<ForwardTaps> fp_taps(calib.payloads.size());
    for (std::size_t s = 0; s < calib.payloads.size(); ++s) {
      forward(net, calib.payloads[s], &fp_taps[s]);
    }

    bool tre_ok = true, opt_ok = true;
    for (std::size_t m = 0; m < rerun.qnet.modules.size(); ++m) {
      std::vector<Tensor> hs, yqs, yfps;
      for (std::size_t s = 0; s < calib.payloads.size(); ++s) {
        hs.push_back(taps[s].inputs[m]);
        yqs.push_back(taps[s].pre_adapter[m]);
        yfps.push_back(fp_taps[s].submodules[m].output);
      }
      const Tensor x = stack_rows(hs);
      const Tensor yq = stack_rows(yqs);
      const Tensor yfp = stack_rows(yfps);

      const double tre_now = tre(yfp, yq, cfg.pipeline_options().tre_config);
      const double tre_stored = stored_report.at("modules").at(m).at("tre_at_fit").get<double>();
      if (std::abs(tre_now - tre_stored) > 1e-12 * std::max(1.0, std::abs(tre_stored))) tre_ok = false;

      const Adapter& ad = rerun.qnet.modules[m].adapter;
      if (!ad.active) continue;
      // Stored factors must reproduce an independent refit at storage
      // precision, and the untruncated refit must satisfy the ridge
      // normal-equation optimality condition.
      const Adapter refit =
          fit_adapter(x, yfp, yq, ad.rank, cfg.ridge_lambda, cfg.pipeline_options().tre_config);
      const Adapter& stored = stored_qnet.modules[m].adapter;
      const bool same = tensors_equal(stored.u, to_storage_precision(refit.u)) &&
                        tensors_equal(stored.v, to_storage_precision(refit.v)) &&
                        tensors_equal(stored.b, to_storage_precision(refit.b));
      if (!same) opt_ok = false;

      const std::size_t full_rank = std::min(x.cols(), yq.cols());
      const Adapter full =
          fit_adapter(x, yfp, yq, full_rank, cfg.ridge_lambda, cfg.pipeline_options().tre_config);
      const Tensor w_full = matmul(full.u, full.v);
      const Tensor r_full = sub(sub(yfp, yq), sub(apply_adapter(full, x, yq), yq));
      const Tensor grad = matmul(transpose(x), r_full);  // d_in x d_out
      double gmax = 0.0;
      for (std::size_t i = 0; i < grad.rows(); ++i) {
        for (std::size_t j = 0; j < grad.cols(); ++j) {
          const double penalty = cfg.ridge_lambda * w_full.at(j, i);
          gmax = std::max(gmax, std::abs(grad.at(i, j) - penalty));
        }
      }
      double ones_grad = 0.0;
      for (std::size_t j = 0; j < r_full.cols(); ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < r_full.rows(); ++i) col += r_full.at(i, j);
        ones_grad = std::max(ones_grad, std::abs(col));
      }
      const double scale =
          std::max(1.0, max_abs(yfp)) * std::max(1.0, max_abs(x)) * static_cast<double>(x.rows());
      if (gmax > 1e-9 * scale || ones_grad > 1e-9 * scale) opt_ok = false;
    }
    check(tre_ok, "stored TRE values match recomputation");
    check(opt_ok, "adapters are least-squares optimal for their rank");
  }

  if (!failures.empty()) {
    std::cerr << failures.size() << " verification check(s) failed\n";
    return kExitVerify;
  }
  std::cout << "verification passed\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tail-aware post-training quantization toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path, pool_path, net_path, calib_path, run_dir;
  std::string format = "md", method, bits;
  std::size_t n_target = 8;
  std::uint64_t seed = 3;
  double rho = -1.0, tau = -1.0;
  long long rank = -1, grid_n = -1;

  auto* gen = app.add_subcommand("gen", "generate a seeded network and calibration pool");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out_path, "output directory")->required();

  auto* select = app.add_subcommand("select", "build a calibration set from a pool");
  select->add_option("--pool", pool_path, "pool bundle manifest")->required();
  select->add_option("--n", n_target, "calibration set size (even)");
  select->add_option("--seed", seed, "selection seed");
  select->add_option("--out", out_path, "output selection JSON")->required();
  select->add_option("--net", net_path, "net bundle for stability diagnostics");
  select->add_option("--config", config_path, "run config JSON");

  auto* quantize = app.add_subcommand("quantize", "calibrate intervals and fit compensation");
  quantize->add_option("--net", net_path, "net bundle manifest")->required();
  quantize->add_option("--calib", calib_path, "selection JSON or pool bundle")->required();
  quantize->add_option("--out", out_path, "run output directory")->required();
  quantize->add_option("--config", config_path, "run config JSON");
  quantize->add_option("--method", method, "ternary|exhaustive");
  quantize->add_option("--bits", bits, "weight,activation bits (e.g. 4,8)");
  quantize->add_option("--rho", rho, "TRE tail fraction");
  quantize->add_option("--tau", tau, "compensation threshold");
  quantize->add_option("--rank", rank, "adapter rank");
  quantize->add_option("--grid-n", grid_n, "interval candidates per search");
  quantize->add_option("--seed", seed, "selection seed (pool input only)");

  auto* report = app.add_subcommand("report", "render a run report");
  report->add_option("--run", run_dir, "run directory")->required();
  report->add_option("--format", format, "json|csv|md");

  auto* verify = app.add_subcommand("verify", "re-derive a run and check its invariants");
  verify->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_path);
    if (select->parsed()) return cmd_select(pool_path, n_target, seed, out_path, net_path, config_path);
    if (quantize->parsed()) {
      RunConfig cfg = resolve_config(config_path);
      if (!method.empty()) cfg.method = method;
      if (!bits.empty()) parse_bits(bits, cfg);
      if (rho >= 0.0) cfg.rho = rho;
      if (tau >= 0.0) cfg.tau = tau;
      if (rank >= 0) cfg.adapter_rank = static_cast<std::size_t>(rank);
      if (grid_n >= 0) cfg.grid_n = static_cast<std::size_t>(grid_n);
      if (quantize->count("--seed") > 0) cfg.select_seed = seed;
      return cmd_quantize(net_path, calib_path, out_path, cfg);
    }
    if (report->parsed()) return cmd_report(run_dir, format);
    if (verify->parsed()) return cmd_verify(run_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
