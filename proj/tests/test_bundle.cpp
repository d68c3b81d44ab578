#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "tailquant/bundle.hpp"
#include "tailquant/io.hpp"
#include "tailquant/linalg.hpp"
#include "test_util.hpp"

using namespace tailquant;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("bundle round-trip is exact at storage precision and byte-stable") {
  tq_test::TempDir tmp("bundle_rt");
  Rng rng(1);
  const Tensor a = tq_test::random_tensor(rng, {5, 7});
  const Tensor b = tq_test::random_tensor(rng, {11});

  const std::string manifest = tmp.str("pack.json");
  write_bundle(manifest, {{"a", a}, {"b", b}}, {{"note", "x"}});
  const TensorBundle loaded = read_bundle(manifest);

  REQUIRE(loaded.entries.size() == 2);
  CHECK(loaded.meta.at("note") == "x");
  const Tensor a32 = to_storage_precision(a);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(loaded.tensor("a")[i] == a32[i]);

  // Write -> read -> write must reproduce both files byte for byte.
  const std::string manifest2 = tmp.str("pack2.json");
  write_bundle(manifest2, {{"a", loaded.tensor("a")}, {"b", loaded.tensor("b")}}, {{"note", "x"}});
  CHECK(slurp(tmp.str("pack.bin")) == slurp(tmp.str("pack2.bin")));
}

TEST_CASE("bundle read rejects corruption") {
  tq_test::TempDir tmp("bundle_bad");
  Rng rng(2);
  const std::string manifest = tmp.str("pack.json");
  write_bundle(manifest, {{"w", tq_test::random_tensor(rng, {4, 4})}});

  // Flip one payload byte: checksum must fail.
  std::string payload = slurp(tmp.str("pack.bin"));
  payload[5] = static_cast<char>(payload[5] ^ 0x40);
  spit(tmp.str("pack.bin"), payload);
  CHECK_THROWS_WITH_AS(read_bundle(manifest), doctest::Contains("checksum"), std::runtime_error);

  CHECK_THROWS_AS(read_bundle(tmp.str("missing.json")), std::runtime_error);
}

TEST_CASE("bundle refuses non-finite tensors and wrong shapes") {
  tq_test::TempDir tmp("bundle_nan");
  Tensor bad({2});
  bad[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(write_bundle(tmp.str("bad.json"), {{"bad", bad}}), std::runtime_error);

  // Mismatched shape in the manifest is rejected.
  Rng rng(3);
  write_bundle(tmp.str("ok.json"), {{"t", tq_test::random_tensor(rng, {3, 3})}});
  std::string manifest = slurp(tmp.str("ok.json"));
  const auto pos = manifest.find("[3,3]");
  if (pos == std::string::npos) {
    nlohmann::json j = nlohmann::json::parse(manifest);
    j["entries"][0]["shape"] = {3, 2};
    spit(tmp.str("ok.json"), j.dump(2));
  } else {
    manifest.replace(pos, 5, "[3,2]");
    spit(tmp.str("ok.json"), manifest);
  }
  CHECK_THROWS_AS(read_bundle(tmp.str("ok.json")), std::runtime_error);
}

TEST_CASE("fnv1a64 reference values") {
  // Published check values for the 64-bit FNV-1a function.
  const unsigned char a[] = {'a'};
  CHECK(fnv1a64(a, 1) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ULL);
}

TEST_CASE("toynet bundle round trip") {
  tq_test::TempDir tmp("net_rt");
  ToyNetConfig cfg;
  cfg.depth = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.seq_len = 8;
  cfg.outlier_channels = 2;
  cfg.seed = 9;
  const ToyNet net = make_toynet(cfg);
  write_net_bundle(tmp.str("net.json"), net);
  const ToyNet loaded = read_net_bundle(tmp.str("net.json"));
  CHECK(loaded.config.depth == cfg.depth);
  CHECK(loaded.config.seed == cfg.seed);
  const Tensor want = to_storage_precision(net.blocks[1].w_fc1);
  CHECK(loaded.blocks[1].w_fc1.data() == want.data());
}

TEST_CASE("pool bundle round trip recomputes features deterministically") {
  tq_test::TempDir tmp("pool_rt");
  ToyNetConfig cfg;
  cfg.depth = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.seq_len = 4;
  cfg.outlier_channels = 2;
  Rng rng(5);
  const CalibrationPool pool = gen_calibration_pool(cfg, 6, 0.5, rng);
  write_pool_bundle(tmp.str("pool.json"), pool);
  const CalibrationPool loaded = read_pool_bundle(tmp.str("pool.json"));
  CHECK(loaded.size() == 6);
  CHECK(loaded.planted_outlier_ids == pool.planted_outlier_ids);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(loaded.samples[i].id == pool.samples[i].id);
    CHECK(loaded.samples[i].feature.data() ==
          default_feature_extractor(loaded.samples[i].payload).data());
  }
}

TEST_CASE("run config json round trip keeps defaults for missing keys") {
  const RunConfig def;
  const RunConfig parsed = RunConfig::from_json(nlohmann::json::object());
  CHECK(parsed.rho == def.rho);
  CHECK(parsed.tau == def.tau);
  CHECK(parsed.adapter_rank == 16);
  CHECK(parsed.calib_target == 8);
  CHECK(parsed.pool_size == 20);

  RunConfig cfg;
  cfg.tau = 0.02;
  cfg.method = "exhaustive";
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.tau == 0.02);
  CHECK(back.method == "exhaustive");
  CHECK(back.to_json() == cfg.to_json());
}
