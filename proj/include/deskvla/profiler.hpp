// SPDX-License-Identifier: Apache-2.0
//
// Per-step timing, FLOP snapshots and transient-allocation high-water marks,
// plus the benchmark table built from them.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "deskvla/config.hpp"
#include "deskvla/envsim.hpp"
#include "deskvla/numerics.hpp"

namespace deskvla {

/// Steps discarded after any configuration change.
inline constexpr std::size_t kWarmupSteps = 10;

struct StepMetrics {
  std::uint64_t latency_ns = 0;
  FlopCounter flops;
  std::int64_t peak_bytes = 0;      // resident workspace plus transient high-water
  std::int64_t largest_buffer = 0;  // largest single allocation during the step
  double gflops = 0.0;              // flops.total() / latency, in 1e9 FLOP/s
  bool warmup = false;

  static double gflops_of(std::uint64_t flops, std::uint64_t latency_ns) {
    return latency_ns == 0 ? 0.0 : static_cast<double>(flops) / static_cast<double>(latency_ns);
  }
  double latency_ms() const { return static_cast<double>(latency_ns) * 1e-6; }
};

/// Runs f(FlopCounter&) once under a fresh counter and allocation tracker
/// whose baseline is `resident_bytes`; the clock brackets only the call.
template <class F>
StepMetrics time_step(F&& f, std::int64_t resident_bytes = 0) {
  StepMetrics m;
  AllocationTracker tracker;
  tracker.reset(resident_bytes);
  std::chrono::steady_clock::time_point start;
  std::chrono::steady_clock::time_point stop;
  {
    TrackingScope scope(tracker);
    start = std::chrono::steady_clock::now();
    f(m.flops);
    stop = std::chrono::steady_clock::now();
  }
  m.latency_ns = static_cast<std::uint64_t>(
      std::max<std::int64_t>(1, std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()));
  m.peak_bytes = tracker.peak();
  m.largest_buffer = tracker.largest_allocation();
  m.gflops = StepMetrics::gflops_of(m.flops.total(), m.latency_ns);
  return m;
}

double median(std::vector<double> values);
/// Interquartile range (linear interpolation between order statistics).
double interquartile_range(std::vector<double> values);

struct BenchRow {
  std::string name;
  ControllerConfig config;
  std::size_t repetitions = 0;
  double latency_ms_median = 0.0;
  double latency_ms_iqr = 0.0;
  std::uint64_t flops = 0;
  std::int64_t peak_bytes = 0;
  double gflops = 0.0;  // flops / median latency
  FlopCounter breakdown;
};

struct BenchOptions {
  std::size_t repetitions = 200;
  std::uint64_t seed = 7;
  TaskKind task = TaskKind::Reach;
  std::size_t warmup = kWarmupSteps;
};

/// Times `repetitions` inference calls per config after `warmup` discarded
/// ones, driving the environment with the decoded actions. Requires at least
/// 30 repetitions. Throws std::logic_error if FLOPs or peak bytes vary
/// between repetitions of one config.
std::vector<BenchRow> bench_table(std::span<const NamedConfig> configs, const FrozenWeights& weights,
                                  const BenchOptions& options);

inline constexpr std::size_t kMinBenchRepetitions = 30;

/// CSV: '#'-prefixed metadata lines, then
/// config,latency_ms_median,latency_ms_iqr,flops,peak_bytes,gflops.
void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows,
                     std::span<const std::string> metadata);
void write_bench_text(std::ostream& out, std::span<const BenchRow> rows,
                      std::span<const std::string> metadata);

}  // namespace deskvla
