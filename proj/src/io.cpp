#include "tailquant/io.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace tailquant {

namespace fs = std::filesystem;

std::string format_double(double v) { return nlohmann::json(v).dump(); }

nlohmann::json toynet_config_to_json(const ToyNetConfig& cfg) {
  return {{"depth", cfg.depth},
          {"d_model", cfg.d_model},
          {"n_heads", cfg.n_heads},
          {"d_ff", cfg.d_ff},
          {"seq_len", cfg.seq_len},
          {"outlier_channels", cfg.outlier_channels},
          {"outlier_scale", cfg.outlier_scale},
          {"seed", cfg.seed}};
}

ToyNetConfig toynet_config_from_json(const nlohmann::json& j) {
  ToyNetConfig cfg;
  cfg.depth = j.at("depth").get<std::size_t>();
  cfg.d_model = j.at("d_model").get<std::size_t>();
  cfg.n_heads = j.at("n_heads").get<std::size_t>();
  cfg.d_ff = j.at("d_ff").get<std::size_t>();
  cfg.seq_len = j.at("seq_len").get<std::size_t>();
  cfg.outlier_channels = j.at("outlier_channels").get<std::size_t>();
  cfg.outlier_scale = j.at("outlier_scale").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

namespace {

nlohmann::json bits_to_json(const BitWidthSpec& b) {
  return {{"bits", b.bits}, {"signed", b.is_signed}};
}

BitWidthSpec bits_from_json(const nlohmann::json& j) {
  return BitWidthSpec{j.at("bits").get<int>(), j.at("signed").get<bool>()};
}

nlohmann::json quant_params_to_json(const QuantParams& p) {
  return {{"delta", p.delta}, {"bitwidth", bits_to_json(p.bitwidth)}};
}

QuantParams quant_params_from_json(const nlohmann::json& j) {
  return QuantParams{j.at("delta").get<double>(), bits_from_json(j.at("bitwidth"))};
}

nlohmann::json twin_params_to_json(const TwinQuantParams& p) {
  return {{"delta_r1", p.delta_r1},
          {"delta_r2", p.delta_r2},
          {"bitwidth", bits_to_json(p.bitwidth)},
          {"partition", p.partition == TwinPartition::BySign ? "by_sign" : "by_threshold"},
          {"threshold", p.threshold}};
}

TwinQuantParams twin_params_from_json(const nlohmann::json& j) {
  TwinQuantParams p;
  p.delta_r1 = j.at("delta_r1").get<double>();
  p.delta_r2 = j.at("delta_r2").get<double>();
  p.bitwidth = bits_from_json(j.at("bitwidth"));
  p.partition =
      j.at("partition").get<std::string>() == "by_sign" ? TwinPartition::BySign : TwinPartition::ByThreshold;
  p.threshold = j.at("threshold").get<double>();
  return p;
}

const char* kBlockTensorNames[] = {"ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
                                   "wq",        "wk",       "wv",        "wo",
                                   "fc1",       "fc2"};

Tensor* block_tensor(BlockWeights& blk, const std::string& name) {
  if (name == "ln1_gamma") return &blk.ln1_gamma;
  if (name == "ln1_beta") return &blk.ln1_beta;
  if (name == "ln2_gamma") return &blk.ln2_gamma;
  if (name == "ln2_beta") return &blk.ln2_beta;
  if (name == "wq") return &blk.wq;
  if (name == "wk") return &blk.wk;
  if (name == "wv") return &blk.wv;
  if (name == "wo") return &blk.wo;
  if (name == "fc1") return &blk.w_fc1;
  if (name == "fc2") return &blk.w_fc2;
  return nullptr;
}

std::vector<std::pair<std::string, Tensor>> net_entries(const ToyNet& net) {
  std::vector<std::pair<std::string, Tensor>> entries;
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    BlockWeights blk = net.blocks[b];  // copy so block_tensor can address fields
    const std::string prefix = "block" + std::to_string(b) + "/";
    for (const char* name : kBlockTensorNames) {
      entries.emplace_back(prefix + name, *block_tensor(blk, name));
    }
  }
  return entries;
}

ToyNet net_from_bundle(const TensorBundle& bundle, const nlohmann::json& config_json) {
  ToyNet net;
  net.config = toynet_config_from_json(config_json);
  net.config.validate();
  for (std::size_t b = 0; b < net.config.depth; ++b) {
    BlockWeights blk;
    const std::string prefix = "block" + std::to_string(b) + "/";
    for (const char* name : kBlockTensorNames) {
      *block_tensor(blk, name) = bundle.tensor(prefix + name);
    }
    net.blocks.push_back(std::move(blk));
  }
  return net;
}

}  // namespace

nlohmann::json pipeline_options_to_json(const PipelineOptions& opt) {
  return {{"weight_bits", bits_to_json(opt.weight_bits)},
          {"act_bits", bits_to_json(opt.act_bits)},
          {"method", search_method_name(opt.method)},
          {"grid_n", opt.grid_n},
          {"grid_scale", opt.grid_scale == GridScale::Log ? "log" : "linear"},
          {"lo_frac", opt.lo_frac},
          {"hi_frac", opt.hi_frac},
          {"eps_idx", opt.eps_idx},
          {"twin_rounds", opt.twin_rounds},
          {"softmax_quant", act_kind_name(opt.softmax_quant)},
          {"gelu_quant", act_kind_name(opt.gelu_quant)},
          {"softmax_threshold", opt.softmax_threshold},
          {"use_gradient_weights", opt.use_gradient_weights},
          {"sim_on_final_output", opt.sim_on_final_output},
          {"compensate", opt.compensate},
          {"rho", opt.tre_config.rho},
          {"tau", opt.tre_config.tau},
          {"tre_eps", opt.tre_config.eps},
          {"adapter_rank", opt.adapter_rank},
          {"ridge_lambda", opt.ridge_lambda},
          {"fit_all_adapters", opt.fit_all_adapters}};
}

PipelineOptions pipeline_options_from_json(const nlohmann::json& j) {
  PipelineOptions opt;
  opt.weight_bits = bits_from_json(j.at("weight_bits"));
  opt.act_bits = bits_from_json(j.at("act_bits"));
  opt.method = search_method_from_name(j.at("method").get<std::string>());
  opt.grid_n = j.at("grid_n").get<std::size_t>();
  opt.grid_scale = j.at("grid_scale").get<std::string>() == "log" ? GridScale::Log : GridScale::Linear;
  opt.lo_frac = j.at("lo_frac").get<double>();
  opt.hi_frac = j.at("hi_frac").get<double>();
  opt.eps_idx = j.at("eps_idx").get<std::size_t>();
  opt.twin_rounds = j.at("twin_rounds").get<int>();
  opt.softmax_quant = act_kind_from_name(j.at("softmax_quant").get<std::string>());
  opt.gelu_quant = act_kind_from_name(j.at("gelu_quant").get<std::string>());
  opt.softmax_threshold = j.at("softmax_threshold").get<double>();
  opt.use_gradient_weights = j.at("use_gradient_weights").get<bool>();
  opt.sim_on_final_output = j.at("sim_on_final_output").get<bool>();
  opt.compensate = j.at("compensate").get<bool>();
  opt.tre_config.rho = j.at("rho").get<double>();
  opt.tre_config.tau = j.at("tau").get<double>();
  opt.tre_config.eps = j.at("tre_eps").get<double>();
  opt.adapter_rank = j.at("adapter_rank").get<std::size_t>();
  opt.ridge_lambda = j.at("ridge_lambda").get<double>();
  opt.fit_all_adapters = j.at("fit_all_adapters").get<bool>();
  return opt;
}

void write_net_bundle(const std::string& manifest_path, const ToyNet& net) {
  nlohmann::json meta = {{"kind", "toynet"}, {"config", toynet_config_to_json(net.config)}};
  write_bundle(manifest_path, net_entries(net), meta);
}

ToyNet read_net_bundle(const std::string& manifest_path) {
  const TensorBundle bundle = read_bundle(manifest_path);
  if (bundle.meta.value("kind", "") != "toynet") {
    throw std::runtime_error("not a toynet bundle: " + manifest_path);
  }
  return net_from_bundle(bundle, bundle.meta.at("config"));
}

void write_pool_bundle(const std::string& manifest_path, const CalibrationPool& pool) {
  std::vector<std::pair<std::string, Tensor>> entries;
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& s : pool.samples) {
    entries.emplace_back("sample/" + s.id, s.payload);
    ids.push_back(s.id);
  }
  nlohmann::json meta = {
      {"kind", "calibration-pool"}, {"ids", ids}, {"planted", pool.planted_outlier_ids}};
  write_bundle(manifest_path, entries, meta);
}

CalibrationPool read_pool_bundle(const std::string& manifest_path) {
  const TensorBundle bundle = read_bundle(manifest_path);
  if (bundle.meta.value("kind", "") != "calibration-pool") {
    throw std::runtime_error("not a calibration-pool bundle: " + manifest_path);
  }
  CalibrationPool pool;
  for (const auto& id : bundle.meta.at("ids")) {
    CalibrationSample s;
    s.id = id.get<std::string>();
    s.payload = bundle.tensor("sample/" + s.id);
    s.feature = default_feature_extractor(s.payload);
    pool.samples.push_back(std::move(s));
  }
  pool.planted_outlier_ids = bundle.meta.value("planted", std::vector<std::string>{});
  return pool;
}

void write_qnet_bundle(const std::string& manifest_path, const QuantizedToyNet& qnet) {
  std::vector<std::pair<std::string, Tensor>> entries = net_entries(qnet.net);
  nlohmann::json modules = nlohmann::json::array();
  for (std::size_t i = 0; i < qnet.modules.size(); ++i) {
    const SubmoduleQuant& m = qnet.modules[i];
    nlohmann::json weights = nlohmann::json::array();
    for (const auto& p : m.weight_params) weights.push_back(quant_params_to_json(p));
    modules.push_back({{"weights", weights},
                       {"input", quant_params_to_json(m.input_params)},
                       {"nonlin", twin_params_to_json(m.nonlin_params)},
                       {"adapter",
                        {{"rank", m.adapter.rank},
                         {"active", m.adapter.active},
                         {"tre_at_fit", m.adapter.tre_at_fit},
                         {"rho", qnet.options.tre_config.rho},
                         {"tau", qnet.options.tre_config.tau}}}});
    const std::string prefix = "mod" + std::to_string(i) + "/adapter/";
    entries.emplace_back(prefix + "u", m.adapter.u);
    entries.emplace_back(prefix + "v", m.adapter.v);
    entries.emplace_back(prefix + "b", m.adapter.b);
  }
  nlohmann::json meta = {{"kind", "quantized-toynet"},
                         {"config", toynet_config_to_json(qnet.net.config)},
                         {"options", pipeline_options_to_json(qnet.options)},
                         {"modules", modules}};
  write_bundle(manifest_path, entries, meta);
}

QuantizedToyNet read_qnet_bundle(const std::string& manifest_path) {
  const TensorBundle bundle = read_bundle(manifest_path);
  if (bundle.meta.value("kind", "") != "quantized-toynet") {
    throw std::runtime_error("not a quantized-toynet bundle: " + manifest_path);
  }
  QuantizedToyNet qnet;
  qnet.net = net_from_bundle(bundle, bundle.meta.at("config"));
  qnet.options = pipeline_options_from_json(bundle.meta.at("options"));
  const auto& modules = bundle.meta.at("modules");
  for (std::size_t i = 0; i < modules.size(); ++i) {
    const auto& jm = modules[i];
    SubmoduleQuant m;
    for (const auto& jw : jm.at("weights")) m.weight_params.push_back(quant_params_from_json(jw));
    m.input_params = quant_params_from_json(jm.at("input"));
    m.nonlin_params = twin_params_from_json(jm.at("nonlin"));
    const std::string prefix = "mod" + std::to_string(i) + "/adapter/";
    m.adapter.u = bundle.tensor(prefix + "u");
    m.adapter.v = bundle.tensor(prefix + "v");
    m.adapter.b = bundle.tensor(prefix + "b");
    m.adapter.rank = jm.at("adapter").at("rank").get<std::size_t>();
    m.adapter.active = jm.at("adapter").at("active").get<bool>();
    m.adapter.tre_at_fit = jm.at("adapter").at("tre_at_fit").get<double>();
    qnet.modules.push_back(std::move(m));
  }
  refresh_quant_weights(qnet);
  return qnet;
}

nlohmann::json selection_to_json(const SelectionResult& sel, const StabilityReport* stability,
                                 const std::string& pool_path, std::uint64_t seed) {
  nlohmann::json provenance = nlohmann::json::object();
  for (const auto& [id, p] : sel.provenance) {
    provenance[id] = {{"cluster", p.cluster}, {"rank", p.rank}};
  }
  nlohmann::json assignments = nlohmann::json::object();
  for (std::size_t i = 0; i < sel.stage2_ids.size(); ++i) {
    assignments[sel.stage2_ids[i]] = sel.stage2_clusters.assignments[i];
  }
  nlohmann::json out = {{"kind", "selection"},
                        {"pool", pool_path},
                        {"seed", seed},
                        {"selected_ids", sel.selected_ids},
                        {"stage1_kept", std::vector<std::string>(sel.stage1_kept.begin(), sel.stage1_kept.end())},
                        {"stage2",
                         {{"k", sel.stage2_clusters.k},
                          {"inertia", sel.stage2_clusters.inertia},
                          {"assignments", assignments}}},
                        {"provenance", provenance}};
  if (stability) {
    nlohmann::json stab = nlohmann::json::array();
    for (const auto& e : stability->per_sample) {
      stab.push_back({{"id", e.id},
                      {"v_bar", e.v_bar},
                      {"score", e.score},
                      {"layer_variances", e.layer_variances}});
    }
    out["stability"] = {{"eps", stability->eps}, {"per_sample", stab}};
  }
  return out;
}

namespace {

nlohmann::json search_to_json(const UnitSearch& s) {
  nlohmann::json evals = nlohmann::json::array();
  for (const auto& [idx, sim] : s.trace.evaluations) evals.push_back({idx, sim});
  return {{"unit", s.unit},
          {"method", search_method_name(s.trace.method)},
          {"converged", s.trace.converged},
          {"chosen_index", s.trace.chosen_index},
          {"chosen_alpha", s.chosen_alpha},
          {"chosen_delta", s.chosen_delta},
          {"grid",
           {{"n", s.grid.alphas.size()},
            {"scale", s.grid.scale == GridScale::Log ? "log" : "linear"},
            {"lo_frac", s.grid.lo_frac},
            {"hi_frac", s.grid.hi_frac},
            {"alphas", s.grid.alphas}}},
          {"evaluations", evals}};
}

}  // namespace

nlohmann::json report_to_json(const PipelineReport& report, const RunConfig& cfg) {
  nlohmann::json modules = nlohmann::json::array();
  std::size_t active = 0;
  for (const auto& m : report.modules) {
    nlohmann::json searches = nlohmann::json::array();
    for (const auto& s : m.searches) searches.push_back(search_to_json(s));
    active += m.adapter_active ? 1 : 0;
    modules.push_back({{"name", m.name},
                       {"tre_at_fit", m.tre_at_fit},
                       {"adapter_active", m.adapter_active},
                       {"mse_pre_adapter", m.mse_pre_adapter},
                       {"mse_post_adapter", m.mse_post_adapter},
                       {"accumulated_mse", m.accumulated_mse},
                       {"accumulated_tre", m.accumulated_tre},
                       {"eval_count", m.eval_count},
                       {"adapter_bytes", m.adapter_bytes},
                       {"searches", searches}});
  }
  return {{"kind", "pipeline-report"},
          {"config", cfg.to_json()},
          {"modules", modules},
          {"totals",
           {{"evaluations", report.total_evaluations},
            {"adapter_bytes", report.total_adapter_bytes},
            {"active_adapters", active}}},
          {"timing", {{"wall_time_ms", report.wall_time_ms}}}};
}

std::string render_accum_csv(const nlohmann::json& report) {
  std::ostringstream os;
  os << "module,accumulated_mse,accumulated_tre,mse_pre_adapter,mse_post_adapter,tre_at_fit,"
        "adapter_active,eval_count,adapter_bytes\n";
  for (const auto& m : report.at("modules")) {
    os << m.at("name").get<std::string>() << "," << format_double(m.at("accumulated_mse").get<double>())
       << "," << format_double(m.at("accumulated_tre").get<double>()) << ","
       << format_double(m.at("mse_pre_adapter").get<double>()) << ","
       << format_double(m.at("mse_post_adapter").get<double>()) << ","
       << format_double(m.at("tre_at_fit").get<double>()) << ","
       << (m.at("adapter_active").get<bool>() ? 1 : 0) << "," << m.at("eval_count").get<std::size_t>()
       << "," << m.at("adapter_bytes").get<std::size_t>() << "\n";
  }
  return os.str();
}

std::string render_report_markdown(const nlohmann::json& report) {
  std::ostringstream os;
  const auto& totals = report.at("totals");
  os << "# Quantization run report\n\n";
  const auto& q = report.at("config").at("quant");
  os << "Bits W" << q.at("weight_bits").get<int>() << "A" << q.at("act_bits").get<int>() << ", method "
     << q.at("method").get<std::string>() << ", grid N=" << q.at("grid_n").get<std::size_t>() << "\n\n";
  os << "| module | accumulated MSE | TRE at fit | adapter | evals |\n";
  os << "|---|---|---|---|---|\n";
  for (const auto& m : report.at("modules")) {
    os << "| " << m.at("name").get<std::string>() << " | "
       << format_double(m.at("accumulated_mse").get<double>()) << " | "
       << format_double(m.at("tre_at_fit").get<double>()) << " | "
       << (m.at("adapter_active").get<bool>() ? "active" : "off") << " | "
       << m.at("eval_count").get<std::size_t>() << " |\n";
  }
  const auto& comp = report.at("config").at("compensation");
  os << "\nTotals: " << totals.at("evaluations").get<std::size_t>() << " similarity evaluations, "
     << totals.at("active_adapters").get<std::size_t>() << " active adapters at tau="
     << format_double(comp.at("tau").get<double>()) << ", "
     << totals.at("adapter_bytes").get<std::size_t>() << " adapter bytes\n";
  return os.str();
}

std::string curve_csv(const UnitSearch& search) {
  std::vector<std::pair<std::size_t, double>> rows = search.trace.evaluations;
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::ostringstream os;
  os << "index,alpha,similarity,chosen\n";
  for (const auto& [idx, sim] : rows) {
    os << idx << "," << format_double(search.grid.alphas.at(idx)) << "," << format_double(sim) << ","
       << (idx == search.trace.chosen_index ? 1 : 0) << "\n";
  }
  return os.str();
}

void write_curve_csvs(const std::string& dir, const PipelineReport& report) {
  fs::create_directories(dir);
  for (const auto& m : report.modules) {
    for (const auto& s : m.searches) {
      const std::string path = (fs::path(dir) / (m.name + "__" + s.unit + ".csv")).string();
      atomic_write_file(path, curve_csv(s));
    }
  }
}

}  // namespace tailquant
