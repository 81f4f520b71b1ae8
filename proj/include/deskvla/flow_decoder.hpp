// SPDX-License-Identifier: Apache-2.0
//
// Flow-matching action head. A frozen network conditioned on the decoder's
// step-token states gives a velocity field; Euler integration carries a
// Gaussian latent from t = 0 to t = 1.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deskvla/numerics.hpp"

namespace deskvla {

/// How the network output f(z, t, h) maps to a velocity.
///   Velocity: v = f
///   Target:   v = (f - z) / (1 - t), i.e. f predicts the endpoint
enum class FlowParametrization : std::uint8_t { Velocity, Target };

/// Token-wise MLP over rows [h_i ; z ; t], mean-pooled over rows, plus a
/// linear skip from [mean(h) ; z].
struct FlowHeadWeights {
  FlowParametrization parametrization = FlowParametrization::Velocity;
  Tensor w_in;  // (d + d_a + 1) × width
  Tensor b_in;  // 1 × width
  std::vector<Tensor> w_hidden;  // width × width
  std::vector<Tensor> b_hidden;
  Tensor w_out;   // width × d_a
  Tensor b_out;   // 1 × d_a
  Tensor w_skip;  // (d + d_a) × d_a
  Tensor b_skip;  // 1 × d_a

  std::size_t hidden_dim() const { return w_skip.rows() - w_out.cols(); }
  std::size_t action_dim() const { return w_out.cols(); }
  std::size_t width() const { return w_in.cols(); }
  std::size_t depth() const { return w_hidden.size(); }
};

/// Zero-initialized head (the zero velocity field).
FlowHeadWeights zero_flow_head(std::size_t hidden_dim, std::size_t action_dim, std::size_t width,
                               std::size_t depth,
                               FlowParametrization parametrization = FlowParametrization::Velocity);

struct FlowConfig {
  std::size_t n_steps = 10;
  std::uint64_t noise_seed = 0;
};

using Action = std::vector<float>;

/// Standard normal draws from a seed; identical on every platform.
std::vector<float> sample_noise(std::uint64_t seed, std::size_t count);

/// Per-step seed derived from (episode seed, step index).
std::uint64_t noise_seed_for(std::uint64_t episode_seed, std::uint64_t step_index);

/// FLOPs of one network evaluation for `rows` hidden rows, including pooling,
/// the skip path, the parametrization conversion and the Euler update.
std::uint64_t flow_evaluation_flops(const FlowHeadWeights& head, std::size_t rows);

/// Scratch reused across evaluations and, when kept alive, across steps.
struct FlowWorkspace {
  Tensor input;
  Tensor act_a;
  Tensor act_b;
  Tensor token_out;
  Tensor pooled;
  Tensor pooled_hidden;
  Tensor skip_in;
  Tensor skip_out;

  void reserve(const FlowHeadWeights& head, std::size_t rows);
  std::size_t bytes() const;
};

/// z_0 ~ N(0, I) from cfg.noise_seed, then n_steps Euler updates
/// z_{k+1} = z_k + v(z_k, k/n, hidden)/n. The latent itself stays fp32 in
/// either precision; only the network runs under `mode`.
Action flow_decode(ConstMatrixView hidden, const FlowConfig& cfg, const FlowHeadWeights& head,
                   PrecisionMode mode, FlowWorkspace& workspace, FlopCounter* counter);
Action flow_decode(const Tensor& hidden, const FlowConfig& cfg, const FlowHeadWeights& head,
                   FlopCounter& counter, PrecisionMode mode = PrecisionMode::Full32);

/// One network evaluation f(z, t, hidden) (before parametrization).
Action flow_network(ConstMatrixView hidden, std::span<const float> z, float t,
                    const FlowHeadWeights& head, PrecisionMode mode, FlowWorkspace& workspace,
                    FlopCounter* counter);

struct ActionGap {
  float max = 0.0f;   // largest L∞ gap over the corpus
  double mean = 0.0;  // mean L∞ gap
};

/// Decodes every hidden state under both configs and compares actions.
ActionGap action_gap(const FlowConfig& cfg_a, const FlowConfig& cfg_b,
                     std::span<const Tensor> corpus, const FlowHeadWeights& head,
                     PrecisionMode mode = PrecisionMode::Full32);

}  // namespace deskvla
