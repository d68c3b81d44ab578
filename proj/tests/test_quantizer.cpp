#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tailquant/quantizer.hpp"
#include "tailquant/rng.hpp"
#include "test_util.hpp"

using namespace tailquant;

TEST_CASE("bit width ranges") {
  const BitWidthSpec s3{3, true};
  CHECK(s3.q_min() == -4);
  CHECK(s3.q_max() == 3);
  const BitWidthSpec u8{8, false};
  CHECK(u8.q_min() == 0);
  CHECK(u8.q_max() == 255);
  CHECK_THROWS_AS((BitWidthSpec{1, true}).validate(), std::invalid_argument);
  CHECK_THROWS_AS((BitWidthSpec{17, false}).validate(), std::invalid_argument);
}

TEST_CASE("round half to even") {
  CHECK(round_half_even(2.5) == 2.0);
  CHECK(round_half_even(3.5) == 4.0);
  CHECK(round_half_even(-2.5) == -2.0);
  CHECK(round_half_even(-3.5) == -4.0);
  CHECK(round_half_even(0.4) == 0.0);
  CHECK(round_half_even(-0.6) == -1.0);
}

TEST_CASE("uniform quantization hand examples") {
  const QuantParams p{0.5, BitWidthSpec{3, true}};

  CHECK(quantize_uniform(Tensor::vector({0.0}), p)[0] == 0.0);

  const Tensor q = quantize_uniform(Tensor::vector({0.4, -0.6}), p);
  CHECK(q[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(-0.5).epsilon(1e-15));

  CHECK(quantize_uniform(Tensor::vector({100.0}), p)[0] == doctest::Approx(1.5).epsilon(1e-15));

  CHECK_THROWS_AS(quantize_uniform(Tensor::vector({std::nan("")}), p), std::invalid_argument);
  CHECK_THROWS_AS(quantize_uniform(Tensor::vector({1.0}), QuantParams{0.0, BitWidthSpec{3, true}}),
                  std::invalid_argument);
}

TEST_CASE("twin quantization hand examples") {
  TwinQuantParams p;
  p.bitwidth = BitWidthSpec{4, true};
  p.partition = TwinPartition::BySign;
  p.delta_r1 = 0.2;
  p.delta_r2 = 0.5;
  const Tensor q = quantize_twin(Tensor::vector({-0.6, 0.6}), p);
  CHECK(q[0] == doctest::Approx(-0.6).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(0.5).epsilon(1e-15));

  // Degenerate twin equals the uniform rule.
  p.delta_r1 = p.delta_r2 = 0.3;
  Rng rng(5);
  const Tensor x = tq_test::random_tensor(rng, {64});
  const Tensor tw = quantize_twin(x, p);
  const Tensor un = quantize_uniform(x, QuantParams{0.3, p.bitwidth});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(tw[i] == un[i]);

  // Empty region: all values nonnegative under a by-sign split still map
  // through the R2 rule.
  p.delta_r1 = 0.111;
  p.delta_r2 = 0.25;
  const Tensor pos = Tensor::vector({0.0, 0.3, 0.8});
  const Tensor tq = quantize_twin(pos, p);
  const Tensor uq = quantize_uniform(pos, QuantParams{0.25, p.bitwidth});
  for (std::size_t i = 0; i < pos.size(); ++i) CHECK(tq[i] == uq[i]);
}

TEST_CASE("threshold partition routes by magnitude") {
  TwinQuantParams p;
  p.bitwidth = BitWidthSpec{8, false};
  p.partition = TwinPartition::ByThreshold;
  p.threshold = 0.1;
  p.delta_r1 = 0.001;
  p.delta_r2 = 0.01;
  const Tensor x = Tensor::vector({0.05, 0.5});
  const Tensor q = quantize_twin(x, p);
  CHECK(q[0] == doctest::Approx(0.05).epsilon(1e-12));  // fine grid in R1
  CHECK(q[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("quant_error basics") {
  CHECK(quant_error(Tensor::vector({1, 3}), Tensor::vector({1, 3})) == 0.0);
  CHECK(quant_error(Tensor::vector({1, 3}), Tensor::vector({0, 3})) == doctest::Approx(0.5));
  CHECK_THROWS_AS(quant_error(Tensor({2}), Tensor({3})), std::invalid_argument);
}

TEST_CASE("quantizer properties over random triples") {
  Rng rng(99);
  for (int trial = 0; trial < 10000; ++trial) {
    const int bits = 2 + static_cast<int>(rng.uniform_index(15));
    const bool is_signed = rng.uniform() < 0.5;
    const QuantParams p{std::exp(rng.normal()), BitWidthSpec{bits, is_signed}};
    const double span = p.delta * static_cast<double>(p.bitwidth.q_max());

    Tensor x({4});
    for (double& v : x.data()) v = rng.normal() * span;
    const Tensor xq = quantize_uniform(x, p);

    // Idempotence is exact.
    const Tensor xqq = quantize_uniform(xq, p);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(xq[i] == xqq[i]);

    for (std::size_t i = 0; i < x.size(); ++i) {
      // Grid membership: an integer level within the code range.
      const double level = xq[i] / p.delta;
      CHECK(std::abs(level - round_half_even(level)) < 1e-9);
      CHECK(level >= static_cast<double>(p.bitwidth.q_min()) - 1e-9);
      CHECK(level <= static_cast<double>(p.bitwidth.q_max()) + 1e-9);

      // Bounded error in range.
      const bool in_range = std::abs(x[i]) <= span && (is_signed || x[i] >= 0.0);
      if (in_range) CHECK(std::abs(x[i] - xq[i]) <= p.delta / 2 * (1.0 + 1e-12));
    }

    // Monotonicity on a sorted pair.
    const double a = rng.normal() * span, b = rng.normal() * span;
    const double lo = std::min(a, b), hi = std::max(a, b);
    const Tensor pair_q = quantize_uniform(Tensor::vector({lo, hi}), p);
    CHECK(pair_q[0] <= pair_q[1]);
  }
}
