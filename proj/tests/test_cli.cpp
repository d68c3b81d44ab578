#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "test_util.hpp"

using nlohmann::json;

namespace {

std::string binary_path() {
  const char* env = std::getenv("TAILQUANT_BIN");
  REQUIRE_MESSAGE(env != nullptr, "TAILQUANT_BIN must point at the CLI binary");
  return env;
}

int run_cli(const std::string& args) {
  const std::string cmd = binary_path() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

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

const char* kSmallConfig = R"({
  "net":  {"depth": 2, "d_model": 32, "n_heads": 4, "d_ff": 64, "seq_len": 16,
           "outlier_channels": 3, "outlier_scale": 8.0, "seed": 7},
  "pool": {"size": 12, "outlier_fraction": 0.25, "seed": 11},
  "select": {"n_target": 6, "seed": 13},
  "quant": {"grid_n": 40}
})";

}  // namespace

TEST_CASE("cli end to end: gen, select, quantize, report, verify") {
  tq_test::TempDir tmp("cli_e2e");
  spit(tmp.str("config.json"), kSmallConfig);

  CHECK(run_cli("gen --config " + tmp.str("config.json") + " --out " + tmp.str("data")) == 0);
  CHECK(run_cli("gen --config " + tmp.str("config.json") + " --out " + tmp.str("data2")) == 0);
  // Same config twice -> byte-identical bundles.
  CHECK(slurp(tmp.str("data/net.bin")) == slurp(tmp.str("data2/net.bin")));
  CHECK(slurp(tmp.str("data/pool.bin")) == slurp(tmp.str("data2/pool.bin")));
  CHECK(slurp(tmp.str("data/net.json")) == slurp(tmp.str("data2/net.json")));

  // Selection runs with stability diagnostics from the sibling net.
  CHECK(run_cli("select --pool " + tmp.str("data/pool.json") + " --n 6 --seed 13 --out " +
                tmp.str("selection.json") + " --config " + tmp.str("config.json")) == 0);
  const json sel = json::parse(slurp(tmp.str("selection.json")));
  CHECK(sel.at("selected_ids").size() == 6);
  CHECK(sel.contains("stability"));
  CHECK(sel.at("stage2").at("k").get<std::size_t>() == 3);

  // The planted-outlier report must agree with the pool's ground truth, and
  // the constructed set avoids the planted samples.
  {
    const json pool_manifest = json::parse(slurp(tmp.str("data/pool.json")));
    std::size_t overlap = 0;
    for (const auto& planted : pool_manifest.at("meta").at("planted")) {
      for (const auto& chosen : sel.at("selected_ids")) {
        if (planted == chosen) ++overlap;
      }
    }
    CHECK(sel.at("planted_selected").get<std::size_t>() == overlap);
    CHECK(overlap == 0);
  }

  // Usage errors exit with 1.
  CHECK(run_cli("select --pool " + tmp.str("data/pool.json") + " --n 0 --out " +
                tmp.str("bad.json")) == 1);
  CHECK(run_cli("select --pool " + tmp.str("data/pool.json") + " --n 5 --out " +
                tmp.str("bad.json")) == 1);

  // Missing calibration file names the path and exits with the data code.
  {
    const std::string cmd = binary_path() + " quantize --net " + tmp.str("data/net.json") +
                            " --calib " + tmp.str("nope.json") + " --out " + tmp.str("runx") +
                            " 2> " + tmp.str("stderr.txt");
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 2);
    CHECK(slurp(tmp.str("stderr.txt")).find("nope.json") != std::string::npos);
  }

  CHECK(run_cli("quantize --net " + tmp.str("data/net.json") + " --calib " + tmp.str("selection.json") +
                " --config " + tmp.str("config.json") + " --method exhaustive --bits 4,8 --out " +
                tmp.str("run1")) == 0);

  // Exhaustive curves list every candidate: grid_n rows plus the header.
  {
    const std::string curve = slurp(tmp.str("run1/curves/block0.attn__wq.csv"));
    const std::size_t lines = static_cast<std::size_t>(std::count(curve.begin(), curve.end(), '\n'));
    CHECK(lines == 41);
  }

  CHECK(run_cli("report --run " + tmp.str("run1") + " --format json") == 0);
  CHECK(run_cli("report --run " + tmp.str("run1") + " --format csv") == 0);
  CHECK(run_cli("report --run " + tmp.str("run1") + " --format md") == 0);
  CHECK(run_cli("report --run " + tmp.str("run1") + " --format bogus") == 1);
  CHECK(run_cli("report --run " + tmp.str("no_such_run") + " --format md") == 2);

  CHECK(run_cli("verify --run " + tmp.str("run1")) == 0);

  // Tamper with an adapter value and rewrite the checksum so the bundle
  // parses: verification must now fail.
  {
    const std::string manifest_path = tmp.str("run1/quantized_net.json");
    const std::string payload_path = tmp.str("run1/quantized_net.bin");
    json manifest = json::parse(slurp(manifest_path));
    std::string payload = slurp(payload_path);

    for (auto& entry : manifest.at("entries")) {
      const std::string name = entry.at("name").get<std::string>();
      if (name.find("adapter/u") == std::string::npos) continue;
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      payload[offset + 2] = static_cast<char>(payload[offset + 2] ^ 0x31);
      // Recompute the checksum the same way the writer does (FNV-1a 64).
      std::uint64_t h = 14695981039346656037ULL;
      const std::size_t bytes = entry.at("bytes").get<std::size_t>();
      for (std::size_t i = 0; i < bytes; ++i) {
        h ^= static_cast<unsigned char>(payload[offset + i]);
        h *= 1099511628211ULL;
      }
      char buf[17];
      std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
      entry["checksum"] = buf;
      break;
    }
    spit(payload_path, payload);
    spit(manifest_path, manifest.dump(2) + "\n");
    CHECK(run_cli("verify --run " + tmp.str("run1")) == 3);
  }
}

TEST_CASE("cli tau sweep never grows the active adapter set at the extremes") {
  tq_test::TempDir tmp("cli_tau");
  spit(tmp.str("config.json"), kSmallConfig);
  REQUIRE(run_cli("gen --config " + tmp.str("config.json") + " --out " + tmp.str("data")) == 0);

  REQUIRE(run_cli("quantize --net " + tmp.str("data/net.json") + " --calib " + tmp.str("data/pool.json") +
                  " --config " + tmp.str("config.json") + " --bits 4,8 --tau 0 --out " +
                  tmp.str("run_t0")) == 0);
  REQUIRE(run_cli("quantize --net " + tmp.str("data/net.json") + " --calib " + tmp.str("data/pool.json") +
                  " --config " + tmp.str("config.json") + " --bits 4,8 --tau 1e30 --out " +
                  tmp.str("run_tinf")) == 0);

  const json lo = json::parse(slurp(tmp.str("run_t0/report.json")));
  const json hi = json::parse(slurp(tmp.str("run_tinf/report.json")));
  const auto active_lo = lo.at("totals").at("active_adapters").get<std::size_t>();
  const auto active_hi = hi.at("totals").at("active_adapters").get<std::size_t>();
  CHECK(active_hi <= active_lo);
  CHECK(active_hi == 0);
  CHECK(hi.at("totals").at("adapter_bytes").get<std::size_t>() <=
        lo.at("totals").at("adapter_bytes").get<std::size_t>());
}
