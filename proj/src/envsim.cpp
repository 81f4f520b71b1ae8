// SPDX-License-Identifier: Apache-2.0

#include "deskvla/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace deskvla {

std::string_view to_string(TaskKind task) { return task == TaskKind::Reach ? "reach" : "place"; }

TaskKind parse_task(std::string_view text) {
  if (text == "reach") return TaskKind::Reach;
  if (text == "place") return TaskKind::Place;
  throw ConfigError("unknown task '" + std::string(text) + "' (expected reach or place)");
}

namespace {

double clip(double v, double lo, double hi) { return std::clamp(v, lo, hi); }

double component(std::span<const float> a, std::size_t i) {
  if (i >= a.size() || !std::isfinite(a[i])) return 0.0;
  return static_cast<double>(a[i]);
}

double norm(const Vec2& v) { return std::hypot(v[0], v[1]); }

constexpr std::uint64_t kProjectionSeed = 0x5EED0F1E1Dull;

}  // namespace

EnvState env_step(const EnvState& state, std::span<const float> action, double dt,
                  const EnvParams& params) {
  EnvState next = state;
  for (std::size_t i = 0; i < 2; ++i) {
    const double a = clip(component(action, i), -1.0, 1.0);
    const double moved = clip(state.position[i] + a * dt, -params.workspace, params.workspace);
    next.velocity[i] = (moved - state.position[i]) / dt;
    next.position[i] = moved;
  }
  const double target = clip(component(action, 3), 0.0, 1.0);
  next.gripper = state.gripper + params.gripper_rate * (target - state.gripper);
  next.step = state.step + 1;
  return next;
}

bool success(const EnvState& state, const EnvParams& params) {
  const Vec2 offset{state.position[0] - state.goal[0], state.position[1] - state.goal[1]};
  return norm(offset) <= params.success_radius && norm(state.velocity) <= params.velocity_tolerance;
}

bool success(const EnvState& state, TaskKind task, const EnvParams& params) {
  if (!success(state, params)) return false;
  return task == TaskKind::Reach || state.gripper <= params.release_level;
}

Environment::Environment(TaskKind task, const ModelDims& dims, EnvParams params)
    : task_(task), dims_(dims), params_(params) {
  const std::size_t n = dims.image_feature_count() * 4;
  projection_ = sample_noise(kProjectionSeed, n);
  for (float& v : projection_) v *= 0.5f;
  reset(0);
}

void Environment::reset(std::uint64_t seed) {
  // Hand-rolled draws rather than std distributions, whose output differs
  // between standard libraries.
  std::mt19937_64 rng(seed ^ 0xE7A15EEDull);
  auto start = [&] {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return -params_.workspace + 2.0 * params_.workspace * u;
  };
  const int lo = Vocabulary::bin_of(-params_.goal_extent);
  const int hi = Vocabulary::bin_of(params_.goal_extent);
  auto bin = [&] { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
  const double sx = start();
  const double sy = start();
  const int gx = bin();
  const int gy = bin();
  reset(seed, {sx, sy}, {Vocabulary::bin_value(gx), Vocabulary::bin_value(gy)});
}

void Environment::reset(std::uint64_t seed, const Vec2& start, const Vec2& goal) {
  seed_ = seed;
  state_ = EnvState{};
  state_.position = {clip(start[0], -params_.workspace, params_.workspace),
                     clip(start[1], -params_.workspace, params_.workspace)};
  state_.goal = {Vocabulary::bin_value(Vocabulary::bin_of(goal[0])),
                 Vocabulary::bin_value(Vocabulary::bin_of(goal[1]))};
  state_.gripper = task_ == TaskKind::Place ? 1.0 : 0.0;
}

std::string Environment::instruction() const {
  const std::string x = Vocabulary::coordinate_token('x', Vocabulary::bin_of(state_.goal[0]));
  const std::string y = Vocabulary::coordinate_token('y', Vocabulary::bin_of(state_.goal[1]));
  if (task_ == TaskKind::Reach) return "reach red " + x + " " + y;
  return "place on target " + x + " " + y;
}

std::vector<TokenId> Environment::instruction_tokens() const {
  return Vocabulary::standard().encode(instruction());
}

Observation Environment::observe() const {
  Observation obs;
  const std::size_t n = dims_.image_feature_count();
  obs.image_features.resize(n);
  const double scene[4] = {state_.position[0], state_.position[1], state_.goal[0], state_.goal[1]};
  const auto noise = sample_noise(seed_ * 0x100000001B3ull + state_.step + 1, n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < 4; ++j) v += static_cast<double>(projection_[i * 4 + j]) * scene[j];
    obs.image_features[i] = static_cast<float>(v + params_.feature_noise * noise[i]);
  }
  obs.state.assign(dims_.state_dim, 0.0f);
  const double values[5] = {state_.position[0], state_.position[1], state_.velocity[0],
                            state_.velocity[1], state_.gripper};
  for (std::size_t i = 0; i < std::min<std::size_t>(5, dims_.state_dim); ++i) {
    obs.state[i] = static_cast<float>(values[i]);
  }
  return obs;
}

void Environment::step(std::span<const float> action) {
  state_ = env_step(state_, action, params_.dt, params_);
}

}  // namespace deskvla
