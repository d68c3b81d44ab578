#include "tailquant/run_config.hpp"

#include <fstream>
#include <stdexcept>

namespace tailquant {

nlohmann::json RunConfig::to_json() const {
  return {
      {"net",
       {{"depth", net.depth},
        {"d_model", net.d_model},
        {"n_heads", net.n_heads},
        {"d_ff", net.d_ff},
        {"seq_len", net.seq_len},
        {"outlier_channels", net.outlier_channels},
        {"outlier_scale", net.outlier_scale},
        {"seed", net.seed}}},
      {"pool",
       {{"size", pool_size}, {"outlier_fraction", pool_outlier_fraction}, {"seed", pool_seed}}},
      {"select",
       {{"n_target", calib_target}, {"seed", select_seed}, {"stability_eps", stability_eps}}},
      {"quant",
       {{"weight_bits", weight_bits},
        {"act_bits", act_bits},
        {"method", method},
        {"grid_n", grid_n},
        {"lo_frac", lo_frac},
        {"hi_frac", hi_frac},
        {"grid_scale", grid_scale},
        {"eps_idx", eps_idx},
        {"twin_rounds", twin_rounds},
        {"softmax_quant", softmax_quant},
        {"gelu_quant", gelu_quant},
        {"softmax_threshold", softmax_threshold},
        {"use_gradient_weights", use_gradient_weights},
        {"sim_on_final_output", sim_on_final_output}}},
      {"compensation",
       {{"enabled", compensate},
        {"rho", rho},
        {"tau", tau},
        {"eps", tre_eps},
        {"rank", adapter_rank},
        {"ridge_lambda", ridge_lambda},
        {"fit_all_adapters", fit_all_adapters}}},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  const auto net = j.value("net", nlohmann::json::object());
  c.net.depth = net.value("depth", c.net.depth);
  c.net.d_model = net.value("d_model", c.net.d_model);
  c.net.n_heads = net.value("n_heads", c.net.n_heads);
  c.net.d_ff = net.value("d_ff", c.net.d_ff);
  c.net.seq_len = net.value("seq_len", c.net.seq_len);
  c.net.outlier_channels = net.value("outlier_channels", c.net.outlier_channels);
  c.net.outlier_scale = net.value("outlier_scale", c.net.outlier_scale);
  c.net.seed = net.value("seed", c.net.seed);

  const auto pool = j.value("pool", nlohmann::json::object());
  c.pool_size = pool.value("size", c.pool_size);
  c.pool_outlier_fraction = pool.value("outlier_fraction", c.pool_outlier_fraction);
  c.pool_seed = pool.value("seed", c.pool_seed);

  const auto select = j.value("select", nlohmann::json::object());
  c.calib_target = select.value("n_target", c.calib_target);
  c.select_seed = select.value("seed", c.select_seed);
  c.stability_eps = select.value("stability_eps", c.stability_eps);

  const auto quant = j.value("quant", nlohmann::json::object());
  c.weight_bits = quant.value("weight_bits", c.weight_bits);
  c.act_bits = quant.value("act_bits", c.act_bits);
  c.method = quant.value("method", c.method);
  c.grid_n = quant.value("grid_n", c.grid_n);
  c.lo_frac = quant.value("lo_frac", c.lo_frac);
  c.hi_frac = quant.value("hi_frac", c.hi_frac);
  c.grid_scale = quant.value("grid_scale", c.grid_scale);
  c.eps_idx = quant.value("eps_idx", c.eps_idx);
  c.twin_rounds = quant.value("twin_rounds", c.twin_rounds);
  c.softmax_quant = quant.value("softmax_quant", c.softmax_quant);
  c.gelu_quant = quant.value("gelu_quant", c.gelu_quant);
  c.softmax_threshold = quant.value("softmax_threshold", c.softmax_threshold);
  c.use_gradient_weights = quant.value("use_gradient_weights", c.use_gradient_weights);
  c.sim_on_final_output = quant.value("sim_on_final_output", c.sim_on_final_output);

  const auto comp = j.value("compensation", nlohmann::json::object());
  c.compensate = comp.value("enabled", c.compensate);
  c.rho = comp.value("rho", c.rho);
  c.tau = comp.value("tau", c.tau);
  c.tre_eps = comp.value("eps", c.tre_eps);
  c.adapter_rank = comp.value("rank", c.adapter_rank);
  c.ridge_lambda = comp.value("ridge_lambda", c.ridge_lambda);
  c.fit_all_adapters = comp.value("fit_all_adapters", c.fit_all_adapters);
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed config " + path + ": " + e.what());
  }
  return from_json(j);
}

PipelineOptions RunConfig::pipeline_options() const {
  PipelineOptions opt;
  opt.weight_bits = BitWidthSpec{weight_bits, true};
  opt.act_bits = BitWidthSpec{act_bits, true};
  opt.method = search_method_from_name(method);
  opt.grid_n = grid_n;
  opt.grid_scale = grid_scale == "log" ? GridScale::Log : GridScale::Linear;
  opt.lo_frac = lo_frac;
  opt.hi_frac = hi_frac;
  opt.eps_idx = eps_idx;
  opt.twin_rounds = twin_rounds;
  opt.softmax_quant = act_kind_from_name(softmax_quant);
  opt.gelu_quant = act_kind_from_name(gelu_quant);
  opt.softmax_threshold = softmax_threshold;
  opt.use_gradient_weights = use_gradient_weights;
  opt.sim_on_final_output = sim_on_final_output;
  opt.compensate = compensate;
  opt.tre_config = TREConfig{rho, tau, tre_eps};
  opt.adapter_rank = adapter_rank;
  opt.ridge_lambda = ridge_lambda;
  opt.fit_all_adapters = fit_all_adapters;
  return opt;
}

void RunConfig::validate() const {
  net.validate();
  pipeline_options().validate();
  if (pool_size < 2) throw std::invalid_argument("config: pool size must be >= 2");
  if (calib_target == 0 || calib_target % 2 != 0) {
    throw std::invalid_argument("config: calibration target must be even and positive");
  }
  if (grid_scale != "linear" && grid_scale != "log") {
    throw std::invalid_argument("config: grid_scale must be linear or log");
  }
}

}  // namespace tailquant
