#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "deskvla/bridge/server.hpp"
#include "deskvla/cli.hpp"

using namespace deskvla;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("deskvla_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::string> data_lines(const fs::path& csv) {
  std::ifstream in(csv);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
  CHECK(run({"bench", "--presets", "turbo"}).code == cli::kUsage);
  CHECK(run({"bench", "--reps", "10"}).code == cli::kUsage);
  CHECK(run({"bench", "--flow-steps", "0"}).code == cli::kUsage);
  CHECK(run({"eval", "--policy", "psychic"}).code == cli::kUsage);
  CHECK(run({"golden"}).code == cli::kUsage);
  const Result r = run({"bench", "--presets", "turbo"});
  CHECK(r.err.find("turbo") != std::string::npos);
}

TEST_CASE("help exits 0") {
  const Result r = run({"--help"});
  CHECK(r.code == cli::kOk);
  CHECK(r.out.find("bench") != std::string::npos);
  CHECK(run({"bench", "--help"}).code == cli::kOk);
}

TEST_CASE("unwritable output exits 3") {
  CHECK(run({"golden", "--out", "/proc/deskvla/forbidden"}).code == cli::kWriteError);
  CHECK(run({"eval", "--episodes", "0", "--out", "/proc/deskvla/forbidden"}).code == cli::kWriteError);
}

TEST_CASE("a taken port exits 4") {
  bridge::ServerOptions o;
  o.port = 0;
  bridge::BridgeServer holder(cli::golden_weights(7), o);
  holder.start();
  CHECK(run({"serve", "--port", std::to_string(holder.port())}).code == cli::kPortInUse);
  holder.stop();
}

TEST_CASE("zero episodes gives an empty report") {
  const fs::path dir = scratch("eval0");
  const Result r = run({"eval", "--episodes", "0", "--out", dir.string()});
  CHECK(r.code == cli::kOk);
  const auto lines = data_lines(dir / "eval.csv");
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "config,episodes,successes,success_rate,max_divergence,mean_divergence");
  for (std::size_t i = 1; i < lines.size(); ++i) CHECK(lines[i].find(",0,0,") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("eval writes a report and per-episode verdicts") {
  const fs::path dir = scratch("eval");
  const Result r = run({"eval", "--episodes", "3", "--presets", "baseline,blurr", "--out", dir.string()});
  REQUIRE(r.code == cli::kOk);
  const auto lines = data_lines(dir / "eval.csv");
  REQUIRE(lines.size() == 3);
  CHECK(lines[1].rfind("baseline,3,3,1", 0) == 0);
  CHECK(lines[2].rfind("blurr,3,3,1", 0) == 0);
  const auto verdicts = data_lines(dir / "verdicts" / "blurr.csv");
  REQUIRE(verdicts.size() == 4);
  CHECK(verdicts[0] == "seed,success,steps,inference_calls,divergence");
  CHECK(verdicts[1].rfind("7,1,", 0) == 0);
  CHECK(fs::exists(dir / "eval.txt"));
  fs::remove_all(dir);
}

TEST_CASE("bench writes a csv row per config") {
  const fs::path dir = scratch("bench");
  const fs::path cfg = scratch("custom.cfg");
  std::ofstream(cfg) << "flow_steps=6\ncompiled=true\n";
  const Result r = run({"bench", "--presets", "blurr", "--config", cfg.string(), "--reps", "30",
                        "--out", dir.string()});
  REQUIRE(r.code == cli::kOk);
  const auto lines = data_lines(dir / "bench.csv");
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "config,latency_ms_median,latency_ms_iqr,flops,peak_bytes,gflops");
  CHECK(lines[1].rfind("blurr,", 0) == 0);
  CHECK(lines[2].rfind("deskvla_cli_custom,", 0) == 0);
  CHECK(fs::exists(dir / "bench.txt"));
  fs::remove_all(dir);
  fs::remove(cfg);
}

TEST_CASE("evaluate reuses the reference run and measures divergence against it") {
  cli::EvalOptions opt;
  opt.episodes = 4;
  opt.jobs = 2;
  const auto w = std::make_shared<const FrozenWeights>(build_weights(7, ModelDims{}, PolicyKind::AnalyticReach));
  const cli::EvalReport report = cli::evaluate(
      {{"baseline", preset("baseline")}, {"cache-only", preset("cache-only")}}, w, opt);
  REQUIRE(report.configs.size() == 2);
  CHECK(report.configs[0].max_divergence() == 0.0);
  CHECK(report.configs[1].max_divergence() <= 1e-5);
  CHECK(report.configs[1].success_rate() == 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(report.configs[1].episodes[i].seed == 7 + i);
  cli::ConfigReport empty;
  CHECK(empty.success_rate() == 0.0);
}

TEST_CASE("golden output matches the checked-in fixture") {
  const fs::path dir = scratch("golden");
  REQUIRE(run({"golden", "--out", dir.string(), "--seed", "7"}).code == cli::kOk);
  for (const char* name : {"image_features.bin", "state.bin", "prefix.bin", "step_tokens.bin",
                           "hidden.bin", "action.bin"}) {
    const Tensor fresh = load_tensor(dir / name);
    const Tensor fixture = load_tensor(fs::path(DESKVLA_GOLDEN_DIR) / name);
    CHECK_MESSAGE(fresh.rows() == fixture.rows(), name);
    CHECK_MESSAGE(max_abs_diff(fresh, fixture) <= 1e-6f, name);
  }
  fs::remove_all(dir);
}
