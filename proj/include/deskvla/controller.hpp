// SPDX-License-Identifier: Apache-2.0
//
// Closed-loop scheduling: config → per-step pipeline, episodes, and the
// rollout-horizon semantics (one inference per `rollout_horizon` actions).

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deskvla/backbone.hpp"
#include "deskvla/config.hpp"
#include "deskvla/envsim.hpp"
#include "deskvla/flow_decoder.hpp"
#include "deskvla/prefix_cache.hpp"
#include "deskvla/profiler.hpp"

namespace deskvla {

struct StepOutput {
  Action action;
  StepMetrics metrics;
};

struct EpisodeContext {
  std::span<const TokenId> instruction;  // re-encoded each step when uncached
  std::uint64_t episode_id = 0;
  std::uint64_t episode_seed = 0;
  std::uint64_t step_index = 0;
};

/// Everything one control step writes. Kept alive across steps when the
/// config is compiled, rebuilt inside every step otherwise.
struct StepWorkspace {
  ObservationWorkspace observation;
  Tensor step_tokens;
  Tensor prefix;
  DecoderWorkspace decoder;
  Tensor hidden;
  FlowWorkspace flow;

  void reserve(const FrozenWeights& weights);
  std::size_t bytes() const;
};

/// encode_observation → decode (cached or not) → flow_decode, timed and
/// instrumented. `weights` must already be cast to the config's precision.
/// FLOPs of the step are independent of the horizon.
StepOutput control_step(const Observation& obs, const PrefixCache* cache,
                        const ControllerConfig& config, const FrozenWeights& weights,
                        const EpisodeContext& context, StepWorkspace* persistent = nullptr);

/// Owns the per-config pipeline: cast weights, optional persistent
/// workspace and the episode's prefix cache.
class Controller {
 public:
  Controller(std::shared_ptr<const FrozenWeights> base, const ControllerConfig& config);

  /// Applied between steps. A precision change recasts weights and rebuilds
  /// the cache; attention, flow steps and horizon changes keep it.
  void reconfigure(const ControllerConfig& config);

  void begin_episode(std::vector<TokenId> instruction, std::uint64_t episode_id,
                     std::uint64_t episode_seed);
  StepOutput infer(const Observation& obs, std::uint64_t step_index);

  const ControllerConfig& config() const { return config_; }
  const FrozenWeights& weights() const { return *weights_; }
  const FrozenWeights& base_weights() const { return *base_; }
  const PrefixCache* cache() const { return cache_ ? &*cache_ : nullptr; }
  /// FLOPs spent outside control steps (instruction encode + cache build).
  const FlopCounter& setup_flops() const { return setup_flops_; }
  std::size_t cache_builds() const { return cache_builds_; }

 private:
  void rebuild_cache();

  std::shared_ptr<const FrozenWeights> base_;
  std::shared_ptr<const FrozenWeights> weights_;
  ControllerConfig config_;
  std::unique_ptr<StepWorkspace> workspace_;
  std::vector<TokenId> instruction_;
  std::uint64_t episode_id_ = 0;
  std::uint64_t episode_seed_ = 0;
  bool in_episode_ = false;
  std::optional<PrefixCache> cache_;
  FlopCounter setup_flops_;
  std::size_t cache_builds_ = 0;
};

struct StepRecord {
  std::size_t step = 0;  // env step index before the action
  Observation observation;
  Action action;
  StepMetrics metrics;   // zero for steps that replay a previous action
  bool inferred = false;
  Vec2 position{0.0, 0.0};  // after the action
};

struct EpisodeRecord {
  ControllerConfig config;
  TaskKind task = TaskKind::Reach;
  std::uint64_t seed = 0;
  std::string instruction;
  Vec2 start{0.0, 0.0};
  Vec2 goal{0.0, 0.0};
  std::vector<StepRecord> steps;
  std::size_t inference_calls = 0;
  bool success = false;
  std::optional<double> divergence_vs_reference;
  FlopCounter setup_flops;

  /// Start position followed by the position after every step.
  std::vector<Vec2> trajectory() const;
};

class EpisodeError : public std::runtime_error {
 public:
  EpisodeError(std::size_t step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Runs from the environment's current (reset) state until success or
/// `max_steps`. The episode id and noise seed are the environment seed.
EpisodeRecord run_episode(Environment& env, Controller& controller, std::size_t max_steps);
EpisodeRecord run_episode(Environment& env, const ControllerConfig& config,
                          std::shared_ptr<const FrozenWeights> weights, std::size_t max_steps);

/// L∞ gap between position trajectories; the shorter one holds its final
/// position.
double trajectory_divergence(const EpisodeRecord& a, const EpisodeRecord& b);

/// Equality of everything except wall-clock fields (latency, gflops).
bool same_outcome(const EpisodeRecord& a, const EpisodeRecord& b);

/// One JSON object per step: step, position, action, inferred, flops,
/// peak_bytes, latency_ms.
void write_episode_log(std::ostream& out, const EpisodeRecord& record);

}  // namespace deskvla
