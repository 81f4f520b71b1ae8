#include <doctest.h>

#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "deskvla/profiler.hpp"

using namespace deskvla;

TEST_CASE("gflops arithmetic") {
  CHECK(StepMetrics::gflops_of(2'000'000'000, 1'000'000'000) == doctest::Approx(2.0));
  CHECK(StepMetrics::gflops_of(712'509'024, 12'500'000) == doctest::Approx(57.000722));
  CHECK(StepMetrics::gflops_of(5, 0) == 0.0);
  StepMetrics m;
  m.latency_ns = 3'500'000;
  CHECK(m.latency_ms() == doctest::Approx(3.5));
}

TEST_CASE("median and interquartile range") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 3.0, 2.0}) == 2.5);
  CHECK(median({}) == 0.0);
  // Sorted 1..9: quartiles at ranks 2 and 6 → 3 and 7.
  CHECK(interquartile_range({9, 1, 8, 2, 7, 3, 6, 4, 5}) == doctest::Approx(4.0));
  // 1..4: q1 = 1.75, q3 = 3.25.
  CHECK(interquartile_range({4, 3, 2, 1}) == doctest::Approx(1.5));
  CHECK(interquartile_range({5.0}) == 0.0);
}

TEST_CASE("time_step brackets the call and tracks transient bytes") {
  const StepMetrics m = time_step(
      [](FlopCounter& fc) {
        Tensor scratch(100, 10);
        fc.add("work", 1234);
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      },
      1000);
  CHECK(m.flops.total() == 1234);
  CHECK(m.peak_bytes == 1000 + 4000);
  CHECK(m.largest_buffer == 4000);
  CHECK(m.latency_ns >= 2'000'000);
  CHECK(m.gflops == doctest::Approx(1234.0 / static_cast<double>(m.latency_ns)));
}

TEST_CASE("bench refuses fewer than 30 repetitions") {
  const FrozenWeights w = build_weights(1, tiny_dims(), PolicyKind::Random);
  const std::vector<NamedConfig> configs = {{"baseline", preset("baseline")}};
  BenchOptions opt;
  opt.repetitions = kMinBenchRepetitions - 1;
  CHECK_THROWS_AS(bench_table(configs, w, opt), std::invalid_argument);
  opt.repetitions = kMinBenchRepetitions;
  CHECK(bench_table(configs, w, opt).size() == 1);
}

TEST_CASE("bench rows are deterministic apart from timing") {
  const FrozenWeights w = build_weights(1, tiny_dims(), PolicyKind::Random);
  const auto ladder = ablation_ladder();
  BenchOptions opt;
  opt.repetitions = 30;
  const auto a = bench_table(ladder, w, opt);
  const auto b = bench_table(ladder, w, opt);
  REQUIRE(a.size() == ladder.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == ladder[i].name);
    CHECK(a[i].flops == b[i].flops);
    CHECK(a[i].peak_bytes == b[i].peak_bytes);
    CHECK(a[i].breakdown == b[i].breakdown);
    CHECK(a[i].repetitions == 30);
    CHECK(a[i].latency_ms_median > 0.0);
    CHECK(a[i].gflops == doctest::Approx(static_cast<double>(a[i].flops) / (a[i].latency_ms_median * 1e6)));
  }
  for (std::size_t i = 1; i < a.size(); ++i) CHECK(a[i].flops <= a[i - 1].flops);
}

TEST_CASE("bench csv layout") {
  BenchRow row;
  row.name = "blurr";
  row.config = preset("blurr");
  row.latency_ms_median = 3.25;
  row.latency_ms_iqr = 0.5;
  row.flops = 84445616;
  row.peak_bytes = 278436;
  row.gflops = 25.98;
  const std::vector<BenchRow> rows = {row};
  const std::vector<std::string> meta = {"seed 7"};
  std::ostringstream os;
  write_bench_csv(os, rows, meta);
  std::istringstream in(os.str());
  std::string line;
  std::vector<std::string> data;
  while (std::getline(in, line)) {
    if (line.rfind("#", 0) == 0) continue;
    data.push_back(line);
  }
  REQUIRE(data.size() == 2);
  CHECK(data[0] == "config,latency_ms_median,latency_ms_iqr,flops,peak_bytes,gflops");
  CHECK(data[1] == "blurr,3.250000,0.500000,84445616,278436,25.980000");
  CHECK(os.str().find("# seed 7") == 0);

  std::ostringstream text;
  write_bench_text(text, rows, meta);
  CHECK(text.str().find("blurr") != std::string::npos);
  CHECK(text.str().find("84445616") != std::string::npos);
}
