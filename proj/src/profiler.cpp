// SPDX-License-Identifier: Apache-2.0

#include "deskvla/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>
#include <ostream>
#include <stdexcept>

#include "deskvla/controller.hpp"

namespace deskvla {

namespace {

// Linear interpolation between closest ranks on sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return quantile(values, 0.5);
}

double interquartile_range(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return quantile(values, 0.75) - quantile(values, 0.25);
}

std::vector<BenchRow> bench_table(std::span<const NamedConfig> configs, const FrozenWeights& weights,
                                  const BenchOptions& options) {
  if (options.repetitions < kMinBenchRepetitions) {
    throw std::invalid_argument("bench needs at least " + std::to_string(kMinBenchRepetitions) +
                                " repetitions, got " + std::to_string(options.repetitions));
  }
  auto base = std::make_shared<const FrozenWeights>(weights);
  std::vector<BenchRow> rows;
  for (const NamedConfig& named : configs) {
    Controller controller(base, named.config);
    Environment env(options.task, weights.dims);
    std::uint64_t episode = 0;
    auto start_episode = [&] {
      env.reset(options.seed + episode++);
      controller.begin_episode(env.instruction_tokens(), env.seed(), env.seed());
    };
    start_episode();

    BenchRow row;
    row.name = named.name;
    row.config = named.config;
    row.repetitions = options.repetitions;
    std::vector<double> latencies;
    latencies.reserve(options.repetitions);
    for (std::size_t i = 0; i < options.warmup + options.repetitions; ++i) {
      if (env.done()) start_episode();
      StepOutput out = controller.infer(env.observe(), env.state().step);
      env.step(out.action);
      if (i < options.warmup) continue;
      const StepMetrics& m = out.metrics;
      if (latencies.empty()) {
        row.flops = m.flops.total();
        row.breakdown = m.flops;
        row.peak_bytes = m.peak_bytes;
      } else if (m.flops.total() != row.flops || m.peak_bytes != row.peak_bytes) {
        throw std::logic_error("config " + named.name + " is not deterministic across steps");
      }
      latencies.push_back(m.latency_ms());
    }
    row.latency_ms_median = median(latencies);
    row.latency_ms_iqr = interquartile_range(latencies);
    row.gflops = row.latency_ms_median > 0.0
                     ? static_cast<double>(row.flops) / (row.latency_ms_median * 1e6)
                     : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows,
                     std::span<const std::string> metadata) {
  for (const auto& line : metadata) out << "# " << line << '\n';
  for (const auto& row : rows) out << "# config " << row.name << ": " << to_kv_line(row.config) << '\n';
  out << "config,latency_ms_median,latency_ms_iqr,flops,peak_bytes,gflops\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%llu,%lld,%.6f\n", row.name.c_str(),
                  row.latency_ms_median, row.latency_ms_iqr,
                  static_cast<unsigned long long>(row.flops),
                  static_cast<long long>(row.peak_bytes), row.gflops);
    out << buf;
  }
}

void write_bench_text(std::ostream& out, std::span<const BenchRow> rows,
                      std::span<const std::string> metadata) {
  for (const auto& line : metadata) out << line << '\n';
  out << '\n';
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %12s %10s %14s %12s %10s\n", "config", "median_ms",
                "iqr_ms", "flops", "peak_bytes", "gflops");
  out << buf;
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %12.3f %10.3f %14llu %12lld %10.2f\n", row.name.c_str(),
                  row.latency_ms_median, row.latency_ms_iqr,
                  static_cast<unsigned long long>(row.flops),
                  static_cast<long long>(row.peak_bytes), row.gflops);
    out << buf;
  }
  out << '\n';
  for (const auto& row : rows) out << row.name << ": " << to_kv_line(row.config) << '\n';
}

}  // namespace deskvla
