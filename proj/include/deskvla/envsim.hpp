// SPDX-License-Identifier: Apache-2.0
//
// Point-mass desk environments: reach a goal, or carry to a target and
// release. Deterministic given (task, seed) and the action sequence.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deskvla/backbone.hpp"

namespace deskvla {

enum class TaskKind : std::uint8_t { Reach, Place };

std::string_view to_string(TaskKind task);
TaskKind parse_task(std::string_view text);

using Vec2 = std::array<double, 2>;

struct EnvState {
  Vec2 position{0.0, 0.0};
  Vec2 velocity{0.0, 0.0};
  double gripper = 0.0;
  Vec2 goal{0.0, 0.0};
  std::size_t step = 0;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct EnvParams {
  double dt = 0.05;
  std::size_t max_steps = 100;
  double success_radius = 0.05;
  double velocity_tolerance = 0.1;
  double gripper_rate = 0.5;     // first-order filter coefficient per step
  double release_level = 0.5;    // Place: gripper must be at or below this
  double workspace = 1.0;        // positions live in [-workspace, workspace]²
  double goal_extent = 0.9;      // goals are sampled on the token grid inside this box
  double feature_noise = 0.01;
};

/// position += clip(a[0..2])·dt (then clamped to the workspace), velocity is
/// the applied displacement over dt, gripper moves toward clip(a[3], 0, 1).
/// Non-finite action components are treated as zero.
EnvState env_step(const EnvState& state, std::span<const float> action, double dt,
                  const EnvParams& params = {});

/// |position - goal| ≤ radius and |velocity| ≤ tolerance (closed thresholds).
bool success(const EnvState& state, const EnvParams& params = {});
bool success(const EnvState& state, TaskKind task, const EnvParams& params = {});

/// One seeded episode: start state, goal, instruction and observation renderer.
class Environment {
 public:
  Environment(TaskKind task, const ModelDims& dims, EnvParams params = {});

  void reset(std::uint64_t seed);
  /// Reset with an explicit start and goal (goal snapped to the token grid).
  void reset(std::uint64_t seed, const Vec2& start, const Vec2& goal);

  const EnvState& state() const { return state_; }
  TaskKind task() const { return task_; }
  const EnvParams& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }

  std::string instruction() const;
  std::vector<TokenId> instruction_tokens() const;

  /// image_features = fixed projection of (position, goal) plus seeded noise
  /// that depends on (episode seed, step); state = (px, py, vx, vy, gripper).
  Observation observe() const;

  void step(std::span<const float> action);
  bool succeeded() const { return success(state_, task_, params_); }
  bool done() const { return succeeded() || state_.step >= params_.max_steps; }

 private:
  TaskKind task_;
  ModelDims dims_;
  EnvParams params_;
  std::vector<float> projection_;  // image_feature_count × 4
  std::uint64_t seed_ = 0;
  EnvState state_;
};

}  // namespace deskvla
