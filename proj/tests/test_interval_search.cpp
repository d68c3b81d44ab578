#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "tailquant/interval_search.hpp"
#include "tailquant/linalg.hpp"
#include "test_util.hpp"

using namespace tailquant;

TEST_CASE("similarity hand examples") {
  CHECK(similarity(Tensor::vector({1, 2}), Tensor::vector({1, 2}), SimilarityWeights::ones()) == 0.0);
  const double s = similarity(Tensor::vector({1, 2}), Tensor::vector({0, 2}),
                              SimilarityWeights::from(Tensor::vector({2, 1})));
  CHECK(s == doctest::Approx(-4.0).epsilon(1e-15));
  // Ones sentinel reduces to the negative sum of squared errors.
  CHECK(similarity(Tensor::vector({1, 2, 3}), Tensor::vector({0, 0, 0}), SimilarityWeights::ones()) ==
        doctest::Approx(-14.0));
  CHECK_THROWS_AS(similarity(Tensor({2}), Tensor({3}), SimilarityWeights::ones()),
                  std::invalid_argument);
}

TEST_CASE("similarity is permutation invariant") {
  Rng rng(3);
  const Tensor y = tq_test::random_tensor(rng, {16});
  const Tensor ya = tq_test::random_tensor(rng, {16});
  const Tensor g = tq_test::random_tensor(rng, {16});
  const double base = similarity(y, ya, SimilarityWeights::from(g));

  Tensor yp({16}), yap({16}), gp({16});
  for (std::size_t i = 0; i < 16; ++i) {
    yp[i] = y[15 - i];
    yap[i] = ya[15 - i];
    gp[i] = g[15 - i];
  }
  CHECK(similarity(yp, yap, SimilarityWeights::from(gp)) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("make_grid spans the requested fractions") {
  const CandidateGrid g = make_grid(Tensor::vector({2.0, -1.0}), 3, GridScale::Linear, 0.5, 1.0);
  REQUIRE(g.alphas.size() == 3);
  CHECK(g.alphas[0] == doctest::Approx(1.0));
  CHECK(g.alphas[1] == doctest::Approx(1.5));
  CHECK(g.alphas[2] == doctest::Approx(2.0));

  CHECK_THROWS_AS(make_grid(Tensor::vector({1.0}), 3, GridScale::Linear, 1.0, 0.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_grid(Tensor::vector({0.0, 0.0}), 3, GridScale::Linear, 0.1, 1.2),
                  std::invalid_argument);

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = tq_test::random_tensor(rng, {32}, 1.0 + rng.uniform() * 4.0);
    const auto scale = trial % 2 == 0 ? GridScale::Linear : GridScale::Log;
    const CandidateGrid grid = make_grid(x, 5 + rng.uniform_index(60), scale, 0.1, 1.2);
    for (std::size_t i = 1; i < grid.alphas.size(); ++i) CHECK(grid.alphas[i] > grid.alphas[i - 1]);
  }
}

TEST_CASE("exhaustive search evaluates everything and breaks ties low") {
  auto trace = search_exhaustive([](std::size_t) { return -1.0; }, 7);
  CHECK(trace.evaluations.size() == 7);
  CHECK(trace.chosen_index == 0);

  const std::vector<double> sims{-3, -1, -2};
  trace = search_exhaustive([&](std::size_t i) { return sims[i]; }, 3);
  CHECK(trace.chosen_index == 1);
}

TEST_CASE("ternary search finds the peak of monotone and unimodal arrays") {
  auto trace = search_ternary([](std::size_t i) { return static_cast<double>(i); }, 64);
  CHECK(trace.chosen_index == 63);

  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.uniform_index(498);
    const std::vector<double> v = tq_test::random_unimodal(rng, n);
    const auto t = search_ternary([&](std::size_t i) { return v[i]; }, n, 2);
    const auto e = search_exhaustive([&](std::size_t i) { return v[i]; }, n);
    CHECK(t.chosen_index == e.chosen_index);
  }
}

TEST_CASE("ternary search memoizes and never re-evaluates") {
  Rng rng(29);
  const std::vector<double> v = tq_test::random_unimodal(rng, 257);
  std::size_t calls = 0;
  std::set<std::size_t> seen;
  const auto trace = search_ternary(
      [&](std::size_t i) {
        ++calls;
        CHECK(seen.insert(i).second);
        return v[i];
      },
      v.size(), 2);
  CHECK(calls == trace.distinct_evaluations());
}

TEST_CASE("ternary search evaluation bound") {
  Rng rng(31);
  for (std::size_t n : {3ul, 5ul, 17ul, 50ul, 100ul, 500ul, 1000ul, 4096ul, 10000ul}) {
    const std::vector<double> v = tq_test::random_unimodal(rng, n);
    const auto t = search_ternary([&](std::size_t i) { return v[i]; }, n, 2);
    const double bound = 2.0 * std::ceil(std::log(static_cast<double>(n)) / std::log(1.5)) + 2 + 1;
    CHECK(static_cast<double>(t.distinct_evaluations()) <= bound);
  }
}

TEST_CASE("ternary search rejects invalid eps") {
  CHECK_THROWS_AS(search_ternary([](std::size_t) { return 0.0; }, 5, 1), std::invalid_argument);
}

TEST_CASE("continuous ternary search brackets a quadratic peak") {
  std::size_t evals = 0;
  const double best = search_ternary_continuous(
      [](double x) { return -(x - 0.37) * (x - 0.37); }, 0.0, 1.0, 1e-6, &evals);
  CHECK(best == doctest::Approx(0.37).epsilon(1e-4));
  CHECK(evals > 0);
}

TEST_CASE("delta_from_range divides by the positive code bound") {
  CHECK(delta_from_range(1.27, BitWidthSpec{8, true}) == doctest::Approx(0.01));
  CHECK(delta_from_range(2.55, BitWidthSpec{8, false}) == doctest::Approx(0.01));
}

namespace {

bool strictly_unimodal(const std::vector<double>& v) {
  const std::size_t peak = tq_test::argmax_of(v);
  for (std::size_t i = 0; i < peak; ++i)
    if (!(v[i] < v[i + 1])) return false;
  for (std::size_t i = peak; i + 1 < v.size(); ++i)
    if (!(v[i] > v[i + 1])) return false;
  return true;
}

}  // namespace

TEST_CASE("calibrate_layer searches weight then activation") {
  Rng rng(41);
  const Tensor w = tq_test::random_tensor(rng, {8, 8});
  const Tensor x = tq_test::random_tensor(rng, {32, 8});
  const LayerForward fwd = [](const Tensor& wq, const Tensor& xq) {
    return matmul(xq, transpose(wq));
  };

  LayerCalibConfig cfg;
  cfg.grid_n = 60;
  cfg.weight_bits = BitWidthSpec{4, true};
  cfg.act_bits = BitWidthSpec{8, true};

  cfg.method = SearchMethod::Exhaustive;
  const auto ex = calibrate_layer(w, x, fwd, SimilarityWeights::ones(), cfg);
  REQUIRE(ex.searches.size() == 2);
  CHECK(ex.searches[0].unit == "weight");
  CHECK(ex.searches[1].unit == "activation");
  CHECK(ex.searches[0].trace.evaluations.size() == 60);

  cfg.method = SearchMethod::Ternary;
  const auto tr = calibrate_layer(w, x, fwd, SimilarityWeights::ones(), cfg);
  CHECK(tr.total_evaluations() < ex.total_evaluations() / 2);

  // On unimodal landscapes the two methods must agree on the chosen step.
  std::vector<double> weight_landscape(60);
  for (const auto& [i, s] : ex.searches[0].trace.evaluations) weight_landscape[i] = s;
  if (strictly_unimodal(weight_landscape)) {
    CHECK(tr.weight_params.delta == ex.weight_params.delta);
  }

  CHECK_THROWS_AS(calibrate_layer(Tensor({8, 8}), x, fwd, SimilarityWeights::ones(), cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(calibrate_layer(w, Tensor({32, 8}), fwd, SimilarityWeights::ones(), cfg),
                  std::invalid_argument);
}

TEST_CASE("calibrate_layer twin activations alternate per region") {
  Rng rng(43);
  const Tensor w = tq_test::random_tensor(rng, {6, 6});
  Tensor x = tq_test::random_tensor(rng, {24, 6});
  const LayerForward fwd = [](const Tensor& wq, const Tensor& xq) {
    return matmul(xq, transpose(wq));
  };

  LayerCalibConfig cfg;
  cfg.grid_n = 40;
  cfg.act_kind = ActQuantKind::TwinBySign;
  cfg.twin_rounds = 2;
  const auto res = calibrate_layer(w, x, fwd, SimilarityWeights::ones(), cfg);
  // 1 weight search + 2 rounds x 2 regions.
  CHECK(res.searches.size() == 5);
  const auto& twin = std::get<TwinQuantParams>(res.act_params);
  CHECK(twin.delta_r1 > 0.0);
  CHECK(twin.delta_r2 > 0.0);
}
