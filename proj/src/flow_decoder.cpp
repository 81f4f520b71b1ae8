// SPDX-License-Identifier: Apache-2.0

#include "deskvla/flow_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace deskvla {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Uniform in (0, 1], 53 bits.
double unit_open(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 1.0) * (1.0 / 9007199254740992.0);
}

}  // namespace

FlowHeadWeights zero_flow_head(std::size_t hidden_dim, std::size_t action_dim, std::size_t width,
                               std::size_t depth, FlowParametrization parametrization) {
  FlowHeadWeights head;
  head.parametrization = parametrization;
  head.w_in = Tensor(hidden_dim + action_dim + 1, width);
  head.b_in = Tensor(1, width);
  for (std::size_t i = 0; i < depth; ++i) {
    head.w_hidden.emplace_back(width, width);
    head.b_hidden.emplace_back(1, width);
  }
  head.w_out = Tensor(width, action_dim);
  head.b_out = Tensor(1, action_dim);
  head.w_skip = Tensor(hidden_dim + action_dim, action_dim);
  head.b_skip = Tensor(1, action_dim);
  return head;
}

std::vector<float> sample_noise(std::uint64_t seed, std::size_t count) {
  std::mt19937_64 rng(seed);
  std::vector<float> out;
  out.reserve(count);
  while (out.size() < count) {
    const double u1 = unit_open(rng);
    const double u2 = unit_open(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    out.push_back(static_cast<float>(r * std::cos(theta)));
    if (out.size() < count) out.push_back(static_cast<float>(r * std::sin(theta)));
  }
  return out;
}

std::uint64_t noise_seed_for(std::uint64_t episode_seed, std::uint64_t step_index) {
  return splitmix64(splitmix64(episode_seed) ^ (step_index * 0xD1B54A32D192ED03ull));
}

std::uint64_t flow_evaluation_flops(const FlowHeadWeights& head, std::size_t rows) {
  const std::uint64_t d = head.hidden_dim();
  const std::uint64_t da = head.action_dim();
  const std::uint64_t w = head.width();
  const std::uint64_t n = rows;
  std::uint64_t f = 0;
  f += 2 * n * (d + da + 1) * w + 2 * n * w;  // input layer, bias, relu
  f += head.depth() * (2 * n * w * w + 2 * n * w);
  f += 2 * n * w * da + n * da;               // output layer and bias
  f += n * da;                                // pool over rows
  f += n * d;                                 // mean of hidden rows for the skip
  f += 2 * (d + da) * da + da;                // skip layer and bias
  f += da;                                    // pooled + skip
  if (head.parametrization == FlowParametrization::Target) f += 2 * da;
  f += 2 * da;                                // Euler update
  return f;
}

void FlowWorkspace::reserve(const FlowHeadWeights& head, std::size_t rows) {
  const std::size_t d = head.hidden_dim();
  const std::size_t da = head.action_dim();
  const std::size_t w = head.width();
  input.resize(rows, d + da + 1);
  act_a.resize(rows, w);
  act_b.resize(rows, w);
  token_out.resize(rows, da);
  pooled.resize(1, da);
  pooled_hidden.resize(1, d);
  skip_in.resize(1, d + da);
  skip_out.resize(1, da);
}

std::size_t FlowWorkspace::bytes() const {
  return input.bytes() + act_a.bytes() + act_b.bytes() + token_out.bytes() + pooled.bytes() +
         pooled_hidden.bytes() + skip_in.bytes() + skip_out.bytes();
}

Action flow_network(ConstMatrixView hidden, std::span<const float> z, float t,
                    const FlowHeadWeights& head, PrecisionMode mode, FlowWorkspace& ws,
                    FlopCounter* counter) {
  const std::size_t d = head.hidden_dim();
  const std::size_t da = head.action_dim();
  if (hidden.cols != d) {
    throw ShapeError("flow head expects hidden width " + std::to_string(d) + ", got " +
                     std::to_string(hidden.cols));
  }
  if (hidden.rows == 0) throw ShapeError("flow head needs at least one hidden row");
  if (z.size() != da) throw ShapeError("latent size does not match action dimension");
  const std::size_t rows = hidden.rows;
  const auto flow = bucket::kFlow;

  ws.input.resize(rows, d + da + 1);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = ws.input.row(r);
    std::copy_n(hidden.row(r), d, dst.begin());
    std::copy(z.begin(), z.end(), dst.begin() + static_cast<std::ptrdiff_t>(d));
    dst[d + da] = t;
  }
  matmul_into(ws.input, head.w_in, ws.act_a, mode, counter, flow);
  add_row_bias(ws.act_a, head.b_in, mode, counter, flow);
  relu_inplace(ws.act_a, mode, counter, flow);
  Tensor* cur = &ws.act_a;
  Tensor* next = &ws.act_b;
  for (std::size_t i = 0; i < head.depth(); ++i) {
    matmul_into(*cur, head.w_hidden[i], *next, mode, counter, flow);
    add_row_bias(*next, head.b_hidden[i], mode, counter, flow);
    relu_inplace(*next, mode, counter, flow);
    std::swap(cur, next);
  }
  matmul_into(*cur, head.w_out, ws.token_out, mode, counter, flow);
  add_row_bias(ws.token_out, head.b_out, mode, counter, flow);
  mean_rows_into(ws.token_out, ws.pooled, mode, counter, flow);

  mean_rows_into(hidden, ws.pooled_hidden, mode, counter, flow);
  ws.skip_in.resize(1, d + da);
  auto skip_row = ws.skip_in.row(0);
  std::copy_n(ws.pooled_hidden.row(0).begin(), d, skip_row.begin());
  std::copy(z.begin(), z.end(), skip_row.begin() + static_cast<std::ptrdiff_t>(d));
  matmul_into(ws.skip_in, head.w_skip, ws.skip_out, mode, counter, flow);
  add_row_bias(ws.skip_out, head.b_skip, mode, counter, flow);
  add_inplace(ws.skip_out, ws.pooled, mode, counter, flow);
  const auto f = ws.skip_out.row(0);
  return Action(f.begin(), f.end());
}

Action flow_decode(ConstMatrixView hidden, const FlowConfig& cfg, const FlowHeadWeights& head,
                   PrecisionMode mode, FlowWorkspace& ws, FlopCounter* counter) {
  if (cfg.n_steps == 0) throw ConfigError("flow n_steps must be at least 1");
  const std::size_t da = head.action_dim();
  Action z = sample_noise(cfg.noise_seed, da);
  const float dt = 1.0f / static_cast<float>(cfg.n_steps);
  for (std::size_t k = 0; k < cfg.n_steps; ++k) {
    const float t = static_cast<float>(k) / static_cast<float>(cfg.n_steps);
    Action f = flow_network(hidden, z, t, head, mode, ws, counter);
    if (head.parametrization == FlowParametrization::Target) {
      const float remaining = 1.0f - t;
      for (std::size_t i = 0; i < da; ++i) f[i] = (f[i] - z[i]) / remaining;
      if (counter) counter->add(bucket::kFlow, 2 * da);
    }
    for (std::size_t i = 0; i < da; ++i) z[i] += dt * f[i];
    if (counter) counter->add(bucket::kFlow, 2 * da);
  }
  return z;
}

Action flow_decode(const Tensor& hidden, const FlowConfig& cfg, const FlowHeadWeights& head,
                   FlopCounter& counter, PrecisionMode mode) {
  FlowWorkspace ws;
  return flow_decode(hidden.view(), cfg, head, mode, ws, &counter);
}

ActionGap action_gap(const FlowConfig& cfg_a, const FlowConfig& cfg_b,
                     std::span<const Tensor> corpus, const FlowHeadWeights& head,
                     PrecisionMode mode) {
  if (corpus.empty()) throw std::invalid_argument("action_gap needs a nonempty corpus");
  FlowWorkspace ws;
  ActionGap gap;
  double total = 0.0;
  for (const Tensor& hidden : corpus) {
    const Action a = flow_decode(hidden.view(), cfg_a, head, mode, ws, nullptr);
    const Action b = flow_decode(hidden.view(), cfg_b, head, mode, ws, nullptr);
    float worst = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
    gap.max = std::max(gap.max, worst);
    total += worst;
  }
  gap.mean = total / static_cast<double>(corpus.size());
  return gap;
}

}  // namespace deskvla
