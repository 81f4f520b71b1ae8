#include <doctest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "deskvla/controller.hpp"
#include "deskvla/flow_decoder.hpp"
#include "support/flop_model.hpp"

using namespace deskvla;

namespace {

constexpr std::size_t kD = 8, kA = 3, kW = 16, kDepth = 2;

Tensor hidden_rows(std::size_t rows, std::uint64_t seed) {
  const auto v = sample_noise(seed, rows * kD);
  return Tensor::from_values(rows, kD, v);
}

// Head whose output is λ·z + b, through the skip path only.
FlowHeadWeights linear_head(float lambda, std::span<const float> b) {
  FlowHeadWeights h = zero_flow_head(kD, kA, kW, kDepth);
  for (std::size_t i = 0; i < kA; ++i) {
    h.w_skip(kD + i, i) = lambda;
    h.b_skip(0, i) = b[i];
  }
  return h;
}

// Corpus of decoder hidden states along reach episodes.
std::vector<Tensor> reach_corpus(const std::shared_ptr<const FrozenWeights>& w, std::size_t count) {
  std::vector<Tensor> corpus;
  Environment env(TaskKind::Reach, w->dims);
  std::uint64_t seed = 100;
  while (corpus.size() < count) {
    env.reset(seed++);
    const Tensor prefix = encode_instruction(env.instruction_tokens(), *w);
    for (int i = 0; i < 5 && corpus.size() < count; ++i) {
      const Tensor step = encode_observation(env.observe(), *w);
      Tensor seq(prefix.rows() + step.rows(), w->dims.d_model);
      for (std::size_t r = 0; r < prefix.rows(); ++r)
        std::copy(prefix.row(r).begin(), prefix.row(r).end(), seq.row(r).begin());
      for (std::size_t r = 0; r < step.rows(); ++r)
        std::copy(step.row(r).begin(), step.row(r).end(), seq.row(prefix.rows() + r).begin());
      FlopCounter fc;
      corpus.push_back(decode(seq, *w, {}, fc));
      const Action a = flow_decode(corpus.back(), FlowConfig{10, 1}, w->flow, fc);
      env.step(a);
    }
  }
  return corpus;
}

}  // namespace

TEST_CASE("zero field leaves the noise unchanged") {
  const FlowHeadWeights h = zero_flow_head(kD, kA, kW, kDepth);
  for (std::size_t n : {1u, 4u, 10u}) {
    FlopCounter fc;
    const Action a = flow_decode(hidden_rows(5, 1), FlowConfig{n, 77}, h, fc);
    CHECK(a == sample_noise(77, kA));
  }
}

TEST_CASE("one Euler step adds the field at t = 0") {
  const float b[kA] = {0.5f, -0.25f, 2.0f};
  const FlowHeadWeights h = linear_head(0.0f, b);
  FlopCounter fc;
  const Action a = flow_decode(hidden_rows(3, 2), FlowConfig{1, 5}, h, fc);
  const auto z0 = sample_noise(5, kA);
  for (std::size_t i = 0; i < kA; ++i) CHECK(a[i] == doctest::Approx(z0[i] + b[i]).epsilon(1e-6));
}

TEST_CASE("linear field matches the Euler closed form") {
  const float b[kA] = {0.3f, -0.7f, 0.1f};
  for (float lambda : {-1.5f, -0.2f, 0.8f}) {
    const FlowHeadWeights h = linear_head(lambda, b);
    for (std::size_t n : {1u, 2u, 4u, 6u, 10u, 25u}) {
      FlopCounter fc;
      const Action a = flow_decode(hidden_rows(4, 3), FlowConfig{n, 9}, h, fc);
      const auto z0 = sample_noise(9, kA);
      // z_{k+1} = (1 + λ/n) z_k + b/n
      const double g = 1.0 + static_cast<double>(lambda) / static_cast<double>(n);
      const double growth = std::pow(g, static_cast<double>(n));
      for (std::size_t i = 0; i < kA; ++i) {
        const double forced = lambda == 0.0f ? b[i] : b[i] * (growth - 1.0) / lambda;
        CHECK(std::fabs(a[i] - (growth * z0[i] + forced)) <= 1e-5);
      }
    }
  }
}

TEST_CASE("time-dependent field integrates as a left Riemann sum") {
  // f = relu(t)·s through the token MLP: Euler gives z0 + s·(n-1)/(2n).
  FlowHeadWeights h = zero_flow_head(kD, kA, kW, 0);
  h.w_in(kD + kA, 0) = 1.0f;
  const float s[kA] = {1.0f, -2.0f, 0.5f};
  for (std::size_t i = 0; i < kA; ++i) h.w_out(0, i) = s[i];
  for (std::size_t n : {1u, 3u, 10u}) {
    FlopCounter fc;
    const Action a = flow_decode(hidden_rows(2, 4), FlowConfig{n, 13}, h, fc);
    const auto z0 = sample_noise(13, kA);
    const double sum = static_cast<double>(n - 1) / (2.0 * static_cast<double>(n));
    for (std::size_t i = 0; i < kA; ++i) CHECK(std::fabs(a[i] - (z0[i] + s[i] * sum)) <= 1e-6);
  }
}

TEST_CASE("flow cost scales exactly with the step count") {
  const auto w = build_weights(3, ModelDims{}, PolicyKind::Random);
  const Tensor hidden = Tensor::from_values(w.dims.L_v, w.dims.d_model,
                                            sample_noise(8, w.dims.L_v * w.dims.d_model));
  FlopCounter one, ten;
  flow_decode(hidden, FlowConfig{1, 1}, w.flow, one);
  flow_decode(hidden, FlowConfig{10, 1}, w.flow, ten);
  CHECK(ten.bucket(bucket::kFlow) == 10 * one.bucket(bucket::kFlow));
  CHECK(one.total() == one.bucket(bucket::kFlow));
  CHECK(one.total() == flow_evaluation_flops(w.flow, w.dims.L_v));
  CHECK(one.total() == testing::FlopModel{w.dims}.flow_evaluation());

  const auto reach = build_weights(3, ModelDims{}, PolicyKind::AnalyticReach);
  CHECK(reach.flow.parametrization == FlowParametrization::Target);
  CHECK(flow_evaluation_flops(reach.flow, w.dims.L_v) ==
        testing::FlopModel{w.dims, true}.flow_evaluation());
}

TEST_CASE("action gap agrees with a brute-force comparison") {
  const auto w = std::make_shared<const FrozenWeights>(build_weights(7, ModelDims{}, PolicyKind::AnalyticReach));
  const std::vector<Tensor> corpus = reach_corpus(w, 50);
  for (std::size_t steps : {1u, 4u, 6u}) {
    const FlowConfig ref{10, 21}, fast{steps, 21};
    const ActionGap gap = action_gap(ref, fast, corpus, w->flow);
    float worst = 0.0f;
    double total = 0.0;
    for (const Tensor& h : corpus) {
      FlopCounter fc;
      const Action a = flow_decode(h, ref, w->flow, fc);
      const Action b = flow_decode(h, fast, w->flow, fc);
      float m = 0.0f;
      for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
      worst = std::max(worst, m);
      total += m;
    }
    CHECK(gap.max == worst);
    CHECK(gap.mean == doctest::Approx(total / 50.0));
    // Straight-path parametrization: Euler lands on the endpoint for any n.
    CHECK(gap.max <= 1e-4f);
  }
}

TEST_CASE("invalid flow inputs") {
  const FlowHeadWeights h = zero_flow_head(kD, kA, kW, kDepth);
  FlopCounter fc;
  CHECK_THROWS_AS(flow_decode(hidden_rows(2, 1), FlowConfig{0, 1}, h, fc), ConfigError);
  CHECK_THROWS_AS(flow_decode(Tensor(2, kD + 1), FlowConfig{1, 1}, h, fc), ShapeError);
  CHECK_THROWS_AS(flow_decode(Tensor(0, kD), FlowConfig{1, 1}, h, fc), ShapeError);
  CHECK_THROWS_AS(action_gap(FlowConfig{}, FlowConfig{}, std::span<const Tensor>{}, h),
                  std::invalid_argument);
}

TEST_CASE("noise is seeded and standard normal") {
  CHECK(sample_noise(3, 8) == sample_noise(3, 8));
  CHECK(sample_noise(3, 8) != sample_noise(4, 8));
  CHECK(noise_seed_for(7, 0) != noise_seed_for(7, 1));
  CHECK(noise_seed_for(7, 0) != noise_seed_for(8, 0));
  const auto v = sample_noise(99, 200000);
  double mean = 0.0, var = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (float x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.02);
}
