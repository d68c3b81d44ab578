#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tailquant/io.hpp"
#include "tailquant/linalg.hpp"
#include "tailquant/pipeline.hpp"
#include "test_util.hpp"

using namespace tailquant;

namespace {

ToyNetConfig small_net(std::uint64_t seed) {
  ToyNetConfig cfg;
  cfg.depth = 2;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.seq_len = 16;
  cfg.outlier_channels = 3;
  cfg.outlier_scale = 8.0;
  cfg.seed = seed;
  return cfg;
}

std::vector<Tensor> make_calib(const ToyNetConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(rand_normal(rng, {cfg.seq_len, cfg.d_model}));
  return out;
}

PipelineOptions small_options(int wbits, int abits) {
  PipelineOptions opt;
  opt.weight_bits = BitWidthSpec{wbits, true};
  opt.act_bits = BitWidthSpec{abits, true};
  opt.grid_n = 60;
  return opt;
}

}  // namespace

TEST_CASE("sixteen-bit quantization is near lossless at every module") {
  const ToyNetConfig cfg = small_net(3);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 4, 100);
  const PipelineResult res = run_pipeline(net, calib, small_options(16, 16));
  for (const auto& m : res.report.modules) {
    CHECK(m.accumulated_mse < 1e-4);
  }
}

TEST_CASE("tau gate extremes") {
  const ToyNetConfig cfg = small_net(5);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 4, 101);

  PipelineOptions opt = small_options(4, 8);
  opt.tre_config.tau = std::numeric_limits<double>::infinity();
  const PipelineResult closed = run_pipeline(net, calib, opt);
  for (const auto& m : closed.report.modules) CHECK_FALSE(m.adapter_active);
  CHECK(closed.report.total_adapter_bytes == 0);

  opt.tre_config.tau = 0.0;
  const PipelineResult open = run_pipeline(net, calib, opt);
  for (const auto& m : open.report.modules) {
    if (m.tre_at_fit > 0.0) CHECK(m.adapter_active);
  }
}

TEST_CASE("ternary matches exhaustive on unimodal landscapes and is much cheaper") {
  const ToyNetConfig cfg = small_net(7);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 4, 102);

  PipelineOptions opt = small_options(4, 8);
  opt.grid_n = 100;
  opt.method = SearchMethod::Exhaustive;
  const PipelineResult ex = run_pipeline(net, calib, opt);
  opt.method = SearchMethod::Ternary;
  const PipelineResult tr = run_pipeline(net, calib, opt);

  CHECK(static_cast<double>(tr.report.total_evaluations) <=
        0.3 * static_cast<double>(ex.report.total_evaluations));

  // Where the exhaustively recorded landscape is strictly unimodal the two
  // methods must choose the same interval. The comparison is only meaningful
  // while both methods have made identical choices so far (the landscapes
  // depend on earlier picks); on non-unimodal landscapes the similarity gap
  // is reported, never asserted zero.
  std::size_t compared = 0;
  double worst_gap = 0.0;
  bool prefix_equal = true;
  for (std::size_t m = 0; m < ex.report.modules.size() && prefix_equal; ++m) {
    REQUIRE(ex.report.modules[m].searches.size() == tr.report.modules[m].searches.size());
    for (std::size_t s = 0; s < ex.report.modules[m].searches.size() && prefix_equal; ++s) {
      const auto& es = ex.report.modules[m].searches[s];
      const auto& ts = tr.report.modules[m].searches[s];
      std::vector<double> landscape(es.grid.alphas.size());
      for (const auto& [i, v] : es.trace.evaluations) landscape[i] = v;
      const std::size_t peak = tq_test::argmax_of(landscape);
      bool unimodal = true;
      for (std::size_t i = 0; i < peak && unimodal; ++i) unimodal = landscape[i] < landscape[i + 1];
      for (std::size_t i = peak; i + 1 < landscape.size() && unimodal; ++i) {
        unimodal = landscape[i] > landscape[i + 1];
      }
      if (unimodal) {
        CHECK(ts.trace.chosen_index == es.trace.chosen_index);
        ++compared;
      } else {
        const double gap = std::abs(landscape[ts.trace.chosen_index] - landscape[peak]);
        worst_gap = std::max(worst_gap, gap / std::max(1.0, std::abs(landscape[peak])));
      }
      prefix_equal = ts.trace.chosen_index == es.trace.chosen_index;
    }
  }
  MESSAGE("unimodal landscapes compared: " << compared
                                           << ", worst relative similarity gap elsewhere: " << worst_gap);
}

TEST_CASE("pipeline reports are reproducible and consistent with re-propagation") {
  const ToyNetConfig cfg = small_net(9);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 3, 103);
  const PipelineOptions opt = small_options(4, 8);

  const PipelineResult a = run_pipeline(net, calib, opt);
  const PipelineResult b = run_pipeline(net, calib, opt);
  RunConfig rc;
  nlohmann::json ja = report_to_json(a.report, rc);
  nlohmann::json jb = report_to_json(b.report, rc);
  ja.erase("timing");
  jb.erase("timing");
  CHECK(ja == jb);

  // Re-running the quantized net on the calibration batch reproduces the
  // recorded per-module accumulated errors.
  std::vector<ForwardTaps> fp_taps(calib.size());
  for (std::size_t s = 0; s < calib.size(); ++s) forward(net, calib[s], &fp_taps[s]);
  std::vector<QuantizedForwardTaps> q_taps(calib.size());
  for (std::size_t s = 0; s < calib.size(); ++s) quantized_forward_tapped(a.qnet, calib[s], q_taps[s]);

  for (std::size_t m = 0; m < a.report.modules.size(); ++m) {
    std::vector<Tensor> fp_parts, q_parts;
    for (std::size_t s = 0; s < calib.size(); ++s) {
      fp_parts.push_back(fp_taps[s].submodules[m].output);
      q_parts.push_back(q_taps[s].post_adapter[m]);
    }
    const double mse = mean_squared_error(stack_rows(q_parts), stack_rows(fp_parts));
    CHECK(mse == doctest::Approx(a.report.modules[m].accumulated_mse).epsilon(1e-12));
  }
}

TEST_CASE("full-rank compensation never hurts any module") {
  const ToyNetConfig cfg = small_net(11);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 3, 104);

  PipelineOptions opt = small_options(4, 8);
  opt.adapter_rank = cfg.d_model;
  opt.ridge_lambda = 0.0;
  opt.tre_config.tau = 0.0;
  const PipelineResult res = run_pipeline(net, calib, opt);
  for (const auto& m : res.report.modules) {
    CHECK(m.mse_post_adapter <= m.mse_pre_adapter + 1e-10);
  }
}

TEST_CASE("accumulated error curve has one entry per module") {
  const ToyNetConfig cfg = small_net(13);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 3, 105);
  const PipelineResult res = run_pipeline(net, calib, small_options(8, 8));

  Rng rng(55);
  const Tensor probe = rand_normal(rng, {cfg.seq_len, cfg.d_model});
  const auto curve = measure_accumulated_error(net, res.qnet, probe);
  CHECK(curve.size() == 2 * cfg.depth);
  for (double v : curve) CHECK(v >= 0.0);

  // Identical full-precision nets give the all-zero curve.
  const auto zero_curve = measure_accumulated_error(net, net, probe);
  for (double v : zero_curve) CHECK(v == 0.0);

  ToyNetConfig other = cfg;
  other.d_model = 16;
  other.n_heads = 2;
  CHECK_THROWS_AS(measure_accumulated_error(net, make_toynet(other), probe), std::invalid_argument);
}

TEST_CASE("compensation reduces the final-module calibration error") {
  const ToyNetConfig cfg = small_net(15);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 3, 106);

  PipelineOptions with = small_options(4, 8);
  with.adapter_rank = cfg.d_model;
  with.ridge_lambda = 0.0;
  with.tre_config.tau = 0.0;
  PipelineOptions without = with;
  without.compensate = false;

  const PipelineResult on = run_pipeline(net, calib, with);
  const PipelineResult off = run_pipeline(net, calib, without);
  CHECK(on.report.modules.back().accumulated_mse <=
        off.report.modules.back().accumulated_mse + 1e-10);
}

TEST_CASE("degenerate all-zero weights raise a calibration error") {
  const ToyNetConfig cfg = small_net(17);
  ToyNet net = make_toynet(cfg);
  for (double& v : net.blocks[0].wq.data()) v = 0.0;
  const auto calib = make_calib(cfg, 2, 107);
  CHECK_THROWS_AS(run_pipeline(net, calib, small_options(4, 8)), std::invalid_argument);
}

TEST_CASE("pool-level pipeline entry selects and calibrates in one call") {
  const ToyNetConfig cfg = small_net(23);
  const ToyNet net = make_toynet(cfg);
  Rng pool_rng(301);
  const CalibrationPool pool = gen_calibration_pool(cfg, 12, 0.25, pool_rng);

  const PipelineResult a = run_pipeline(net, pool, 6, 77, small_options(4, 8));
  const PipelineResult b = run_pipeline(net, pool, 6, 77, small_options(4, 8));
  CHECK(a.report.modules.back().accumulated_mse == b.report.modules.back().accumulated_mse);
  CHECK(a.report.total_evaluations == b.report.total_evaluations);

  // Equivalent to selecting first and calibrating on the payloads.
  Rng sel_rng(77);
  const SelectionResult sel = build_calibration_set(pool, 6, sel_rng);
  std::vector<Tensor> calib;
  for (const auto& id : sel.selected_ids) calib.push_back(pool.by_id(id).payload);
  const PipelineResult c = run_pipeline(net, calib, small_options(4, 8));
  CHECK(c.report.modules.back().accumulated_mse == a.report.modules.back().accumulated_mse);
}

TEST_CASE("nonlinearity quantizer schemes are configurable") {
  const ToyNetConfig cfg = small_net(21);
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 2, 109);

  PipelineOptions opt = small_options(4, 8);
  opt.grid_n = 30;
  opt.softmax_quant = ActQuantKind::Uniform;
  opt.gelu_quant = ActQuantKind::TwinByThreshold;
  const PipelineResult res = run_pipeline(net, calib, opt);

  for (std::size_t m = 0; m < res.qnet.modules.size(); ++m) {
    const TwinQuantParams& p = res.qnet.modules[m].nonlin_params;
    if (m % 2 == 0) {
      CHECK(p.delta_r1 == p.delta_r2);  // uniform stored as a degenerate twin
    } else {
      CHECK(p.partition == TwinPartition::ByThreshold);
    }
  }
}

TEST_CASE("whole-network similarity scope runs and stays close to local scope") {
  ToyNetConfig cfg = small_net(19);
  cfg.depth = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.seq_len = 8;
  const ToyNet net = make_toynet(cfg);
  const auto calib = make_calib(cfg, 2, 108);

  PipelineOptions opt = small_options(4, 8);
  opt.grid_n = 24;
  opt.sim_on_final_output = true;
  const PipelineResult res = run_pipeline(net, calib, opt);
  CHECK(res.report.modules.size() == 2);
  CHECK(res.report.total_evaluations > 0);
}
