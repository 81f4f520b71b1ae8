// SPDX-License-Identifier: Apache-2.0
//
// The deskvla command line (bench, eval, serve, golden) and the evaluation
// and golden-fixture routines it is built on.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deskvla/backbone.hpp"
#include "deskvla/config.hpp"
#include "deskvla/controller.hpp"
#include "deskvla/envsim.hpp"

namespace deskvla::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,       // bad flags, unknown preset, too few repetitions
  kWriteError = 3,  // an output file could not be written
  kPortInUse = 4,
};

class WriteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs the tool; `args` excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

// ── Evaluation ──────────────────────────────────────────────────────────

struct EvalOptions {
  std::size_t episodes = 100;
  std::uint64_t seed = 7;
  TaskKind task = TaskKind::Reach;
  std::size_t jobs = 1;
  std::string reference = "baseline";  // divergence is measured against this config
};

struct EpisodeVerdict {
  std::uint64_t seed = 0;
  bool success = false;
  std::size_t steps = 0;
  std::size_t inference_calls = 0;
  double divergence = 0.0;  // L∞ trajectory distance to the reference run
};

struct ConfigReport {
  std::string name;
  ControllerConfig config;
  std::vector<EpisodeVerdict> episodes;

  std::size_t successes() const;
  double success_rate() const;  // 0 for an empty report
  double max_divergence() const;
  double mean_divergence() const;
};

struct EvalReport {
  std::vector<std::string> metadata;
  std::vector<ConfigReport> configs;
};

/// Runs every config on the same `episodes` seeds (seed, seed+1, ...). The
/// reference config is always run, and reported only if it is in `configs`.
EvalReport evaluate(const std::vector<NamedConfig>& configs,
                    std::shared_ptr<const FrozenWeights> weights, const EvalOptions& options);

void write_eval_csv(std::ostream& out, const EvalReport& report);
void write_eval_text(std::ostream& out, const EvalReport& report);
void write_verdicts(std::ostream& out, const ConfigReport& report);

// ── Golden fixture ──────────────────────────────────────────────────────

struct GoldenCase {
  std::vector<TokenId> instruction;
  Observation observation;
  Tensor prefix;       // L_p × d
  Tensor step_tokens;  // L_v × d
  Tensor hidden;       // decoder output, fp32, naive attention
  Tensor action;       // 1 × d_action, flow 10 from the fixed noise seed
};

/// Seeded random weights at the default dims, a fixed instruction and a
/// deterministic observation.
std::shared_ptr<const FrozenWeights> golden_weights(std::uint64_t seed);
GoldenCase make_golden_case(const FrozenWeights& weights);
void write_golden(const std::filesystem::path& dir, std::uint64_t seed);

}  // namespace deskvla::cli
