#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <memory>

#include "deskvla/backbone.hpp"
#include "deskvla/controller.hpp"
#include "deskvla/envsim.hpp"
#include "support/reference_model.hpp"

using namespace deskvla;
namespace fs = std::filesystem;

namespace {

Tensor stack(const Tensor& top, const Tensor& bottom) {
  Tensor out(top.rows() + bottom.rows(), top.cols());
  for (std::size_t r = 0; r < top.rows(); ++r)
    std::copy(top.row(r).begin(), top.row(r).end(), out.row(r).begin());
  for (std::size_t r = 0; r < bottom.rows(); ++r)
    std::copy(bottom.row(r).begin(), bottom.row(r).end(), out.row(top.rows() + r).begin());
  return out;
}

Tensor run_decode(const Tensor& prefix, const Tensor& step, const FrozenWeights& w,
                  DecodeOptions options = {}) {
  FlopCounter fc;
  return decode(stack(prefix, step), w, options, fc);
}

Observation sample_observation(const ModelDims& dims, std::uint64_t seed) {
  Environment env(TaskKind::Reach, dims);
  env.reset(seed);
  return env.observe();
}

void zero(Tensor& t) {
  for (float& v : t.values()) v = 0.0f;
}

Action reach_action(const std::shared_ptr<const FrozenWeights>& w, const Vec2& start, const Vec2& goal) {
  Environment env(TaskKind::Reach, w->dims);
  env.reset(3, start, goal);
  Controller c(w, preset("baseline"));
  c.begin_episode(env.instruction_tokens(), 3, 3);
  return c.infer(env.observe(), 0).action;
}

}  // namespace

TEST_CASE("decoder matches the double-precision recompute-all reference") {
  for (const ModelDims& dims : {tiny_dims(), ModelDims{}}) {
    const FrozenWeights w = build_weights(5, dims, PolicyKind::Random);
    const Tensor prefix = encode_instruction(Vocabulary::standard().encode("reach red x=+0.30 y=+0.40"), w);
    const Tensor step = encode_observation(sample_observation(dims, 5), w);
    const Tensor hidden = run_decode(prefix, step, w);
    CHECK(hidden.rows() == dims.L_v);
    CHECK(testing::max_abs(testing::reference_decode(prefix, step, w), hidden) <= 1e-4);
  }
}

TEST_CASE("decode is pure") {
  const FrozenWeights w = build_weights(1, tiny_dims(), PolicyKind::Random);
  const Tensor prefix = encode_instruction(Vocabulary::standard().encode("reach red"), w);
  const Tensor step = encode_observation(sample_observation(w.dims, 1), w);
  const Tensor first = run_decode(prefix, step, w);
  const Tensor second = run_decode(prefix, step, w);
  CHECK(first.bit_equal(second));
  const Tensor again = run_decode(prefix, step, w, {PrecisionMode::Full32, AttentionKernel::naive()});
  CHECK(first.bit_equal(again));
}

TEST_CASE("instruction padding") {
  const FrozenWeights w = build_weights(2, tiny_dims(), PolicyKind::Random);
  const auto& vocab = Vocabulary::standard();
  const auto ids = vocab.encode("reach red");
  const Tensor p = encode_instruction(ids, w);
  CHECK(p.rows() == w.dims.L_p);
  std::vector<TokenId> padded = ids;
  padded.resize(w.dims.L_p, Vocabulary::kPad);
  CHECK(encode_instruction(padded, w).bit_equal(p));

  std::vector<TokenId> too_long(w.dims.L_p + 1, vocab.id("red"));
  CHECK_THROWS_AS(encode_instruction(too_long, w), ShapeError);
  std::vector<TokenId> bad = {static_cast<TokenId>(vocab.size() + 3)};
  CHECK_THROWS_AS(encode_instruction(bad, w), VocabularyError);
}

TEST_CASE("zero observation is accepted, non-finite is not") {
  const FrozenWeights w = build_weights(2, tiny_dims(), PolicyKind::Random);
  const Tensor v = encode_observation(Observation::zeros(w.dims), w);
  CHECK(v.rows() == w.dims.L_v);
  for (float x : v.values()) CHECK(std::isfinite(x));
  Observation bad = Observation::zeros(w.dims);
  bad.state[0] = NAN;
  CHECK_THROWS_AS(encode_observation(bad, w), std::domain_error);
  Observation shape = Observation::zeros(w.dims);
  shape.state.pop_back();
  CHECK_THROWS_AS(encode_observation(shape, w), ShapeError);
}

TEST_CASE("a layer with zero output projection and zero mlp output is the identity") {
  ModelDims dims = tiny_dims();
  dims.n_layers = 1;
  FrozenWeights w = build_weights(4, dims, PolicyKind::Random);
  zero(w.layers[0].w_o);
  zero(w.layers[0].w_mlp2);
  zero(w.layers[0].b_mlp2);
  const Tensor prefix = encode_instruction(Vocabulary::standard().encode("reach red"), w);
  const Tensor step = encode_observation(sample_observation(dims, 4), w);
  CHECK(run_decode(prefix, step, w).bit_equal(step));
}

TEST_CASE("decoder flop breakdown") {
  const FrozenWeights w = build_weights(2, tiny_dims(), PolicyKind::Random);
  const Tensor prefix = encode_instruction(Vocabulary::standard().encode("reach red"), w);
  const Tensor step = encode_observation(sample_observation(w.dims, 2), w);
  FlopCounter fc;
  decode(stack(prefix, step), w, {}, fc);
  const std::uint64_t d = 16, lv = 6, lp = 8, dm = 32, layers = 2;
  CHECK(fc.bucket(bucket::kProjection) == layers * (2 * lv * d * d * 2 + 2 * (lp + lv) * d * d * 2));
  CHECK(fc.bucket(bucket::kAttention) == layers * attention_flops(lv, lp + lv, 2, 8));
  CHECK(fc.bucket(bucket::kNorm) == layers * 2 * 5 * lv * d);
  CHECK(fc.bucket(bucket::kMlp) == layers * (2 * lv * d * dm + 2 * lv * dm + 2 * lv * dm * d + lv * d));
  CHECK(fc.bucket(bucket::kResidual) == layers * 2 * lv * d);
}

TEST_CASE("golden tensors") {
  const fs::path dir = DESKVLA_GOLDEN_DIR;
  REQUIRE(fs::exists(dir / "hidden.bin"));
  const FrozenWeights w = build_weights(7, ModelDims{}, PolicyKind::Random);
  const Tensor image = load_tensor(dir / "image_features.bin");
  const Tensor state = load_tensor(dir / "state.bin");
  Observation obs;
  obs.image_features.assign(image.values().begin(), image.values().end());
  obs.state.assign(state.values().begin(), state.values().end());

  Environment env(TaskKind::Reach, w.dims);
  env.reset(7, {-0.5, 0.3}, {0.1, -0.2});
  CHECK(env.observe() == obs);

  const Tensor prefix = encode_instruction(Vocabulary::standard().encode("reach red x=+0.10 y=-0.20"), w);
  const Tensor step = encode_observation(obs, w);
  CHECK(max_abs_diff(prefix, load_tensor(dir / "prefix.bin")) <= 1e-6f);
  CHECK(max_abs_diff(step, load_tensor(dir / "step_tokens.bin")) <= 1e-6f);
  const Tensor hidden = run_decode(prefix, step, w);
  const Tensor golden_hidden = load_tensor(dir / "hidden.bin");
  CHECK(max_abs_diff(hidden, golden_hidden) <= 1e-6f);
  CHECK(testing::max_abs(testing::reference_decode(prefix, step, w), golden_hidden) <= 1e-4);

  FlopCounter fc;
  const Action a = flow_decode(hidden, FlowConfig{10, noise_seed_for(7, 0)}, w.flow, fc);
  const Tensor golden_action = load_tensor(dir / "action.bin");
  REQUIRE(golden_action.cols() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - golden_action(0, i)) <= 1e-6f);
}

TEST_CASE("weights round-trip through a file") {
  const fs::path path = fs::temp_directory_path() / "deskvla_weights_roundtrip.bin";
  for (PolicyKind kind : {PolicyKind::Random, PolicyKind::AnalyticReach}) {
    const FrozenWeights w = build_weights(9, ModelDims{}, kind);
    save_weights(path, w);
    const FrozenWeights back = load_weights(path);
    CHECK(back.dims == w.dims);
    CHECK(back.kind == w.kind);
    CHECK(back.seed == w.seed);
    CHECK(back.bit_equal(w));
  }
  fs::remove(path);
  CHECK_THROWS(load_weights(path));
}

TEST_CASE("cast weights are representable in reduced precision") {
  const FrozenWeights w = cast_weights(build_weights(3, tiny_dims(), PolicyKind::Random),
                                       PrecisionMode::Reduced16);
  w.for_each_tensor([](const std::string&, const Tensor& t) {
    for (float v : t.values()) REQUIRE(round_reduced(v) == v);
  });
}

TEST_CASE("vocabulary coordinates") {
  const auto& vocab = Vocabulary::standard();
  CHECK(Vocabulary::bin_of(0.1) == 110);
  CHECK(Vocabulary::bin_of(-2.0) == 0);
  CHECK(Vocabulary::bin_of(2.0) == 200);
  CHECK(Vocabulary::coordinate_token('x', 110) == "x=+0.10");
  CHECK(Vocabulary::coordinate_token('y', 80) == "y=-0.20");
  const auto ids = vocab.encode("reach red x=+0.10");
  CHECK(ids.front() == Vocabulary::kBos);
  CHECK(ids.back() == Vocabulary::kEos);
  CHECK(vocab.is_x(ids[3]));
  CHECK(vocab.decode(ids).find("x=+0.10") != std::string::npos);
  CHECK_THROWS_AS(vocab.id("blue-ish"), VocabularyError);
}

TEST_CASE("reach policy fixed points") {
  const auto w = std::make_shared<const FrozenWeights>(build_weights(7, ModelDims{}, PolicyKind::AnalyticReach));
  for (const Vec2& p : {Vec2{0.2, -0.3}, Vec2{-0.6, 0.5}, Vec2{0.0, 0.0}}) {
    const Action at_goal = reach_action(w, p, p);
    CHECK(std::hypot(at_goal[0], at_goal[1]) < 1e-3);
  }
  const Vec2 start{-0.2, 0.3};
  const Action a = reach_action(w, start, {start[0] + 0.5, start[1] - 0.5});
  CHECK(std::fabs(a[0] - 0.5f) <= 1e-2f);
  CHECK(std::fabs(a[1] + 0.5f) <= 1e-2f);
}

TEST_CASE("reach policy closes the loop") {
  const auto w = std::make_shared<const FrozenWeights>(build_weights(7, ModelDims{}, PolicyKind::AnalyticReach));
  Environment env(TaskKind::Reach, w->dims);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    env.reset(seed);
    const EpisodeRecord r = run_episode(env, preset("baseline"), w, env.params().max_steps);
    CHECK(r.success);
  }
}

TEST_CASE("one control step at default dims stays under 100 ms") {
  const auto w = std::make_shared<const FrozenWeights>(build_weights(7, ModelDims{}, PolicyKind::Random));
  Environment env(TaskKind::Reach, w->dims);
  env.reset(7);
  Controller c(w, preset("baseline"));
  c.begin_episode(env.instruction_tokens(), 7, 7);
  const Observation obs = env.observe();
  c.infer(obs, 0);
  double best = 1e9;
  for (int i = 0; i < 5; ++i) best = std::min(best, c.infer(obs, 1).metrics.latency_ms());
  CHECK(best < 100.0);
}
