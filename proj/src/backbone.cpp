// SPDX-License-Identifier: Apache-2.0

#include "deskvla/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "deskvla/prefix_cache.hpp"

namespace deskvla {

// ── Dims ────────────────────────────────────────────────────────────────

void ModelDims::validate() const {
  auto require = [](bool ok, const char* field, const std::string& what) {
    if (!ok) throw ConfigError(std::string(field) + ": " + what);
  };
  require(d_model >= 1, "d_model", "must be at least 1");
  require(n_layers >= 1, "n_layers", "must be at least 1");
  require(n_heads >= 1, "n_heads", "must be at least 1");
  require(d_head >= 1, "d_head", "must be at least 1");
  require(L_p >= 1, "L_p", "must be at least 1");
  require(L_v >= 2, "L_v", "needs at least one image token and the state token");
  require(d_action >= 1, "d_action", "must be at least 1");
  require(mlp_ratio >= 1, "mlp_ratio", "must be at least 1");
  require(patch_dim >= 1, "patch_dim", "must be at least 1");
  require(state_dim >= 1, "state_dim", "must be at least 1");
  require(flow_width >= 1, "flow_width", "must be at least 1");
  require(d_model == n_heads * d_head, "d_model",
          std::to_string(d_model) + " != n_heads * d_head = " + std::to_string(n_heads * d_head));
}

ModelDims tiny_dims() {
  ModelDims d;
  d.d_model = 16;
  d.n_layers = 2;
  d.n_heads = 2;
  d.d_head = 8;
  d.L_p = 8;
  d.L_v = 6;
  d.d_action = 4;
  d.mlp_ratio = 2;
  d.patch_dim = 4;
  d.state_dim = 5;
  d.flow_width = 32;
  d.flow_depth = 2;
  return d;
}

std::string_view to_string(PolicyKind kind) {
  return kind == PolicyKind::Random ? "random" : "reach";
}

PolicyKind parse_policy_kind(std::string_view text) {
  if (text == "random") return PolicyKind::Random;
  if (text == "reach" || text == "analytic") return PolicyKind::AnalyticReach;
  throw ConfigError("unknown policy '" + std::string(text) + "' (expected random or reach)");
}

// ── Vocabulary ──────────────────────────────────────────────────────────

namespace {
constexpr const char* kWords[] = {
    "<pad>", "<bos>", "<eos>", "reach", "place", "move", "to", "the", "on", "target", "goal",
    "block", "cube", "red", "green", "blue", "yellow", "and", "at", "gripper",
};
}

Vocabulary::Vocabulary() {
  for (const char* w : kWords) tokens_.emplace_back(w);
  x_base_ = static_cast<TokenId>(tokens_.size());
  for (int b = 0; b < kCoordinateBins; ++b) tokens_.push_back(coordinate_token('x', b));
  y_base_ = static_cast<TokenId>(tokens_.size());
  for (int b = 0; b < kCoordinateBins; ++b) tokens_.push_back(coordinate_token('y', b));
  for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw VocabularyError("unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids{kBos};
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) ids.push_back(id(word));
  ids.push_back(kEos);
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == kBos || id == kEos || id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

int Vocabulary::bin_of(double value) {
  const double clamped = std::clamp(value, -1.0, 1.0);
  return static_cast<int>(std::lround((clamped + 1.0) * 100.0));
}

std::string Vocabulary::coordinate_token(char axis, int bin) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c=%+.2f", axis, bin_value(bin));
  return buf;
}

// ── Weights ─────────────────────────────────────────────────────────────

void FrozenWeights::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("token_embedding", token_embedding);
  fn("position", position);
  fn("text_ln_gain", text_ln_gain);
  fn("text_ln_bias", text_ln_bias);
  fn("image_w1", image_w1);
  fn("image_b1", image_b1);
  fn("image_w2", image_w2);
  fn("image_b2", image_b2);
  fn("state_w1", state_w1);
  fn("state_b1", state_b1);
  fn("state_w2", state_w2);
  fn("state_b2", state_b2);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights& l = layers[i];
    fn(p + "ln1_gain", l.ln1_gain);
    fn(p + "ln1_bias", l.ln1_bias);
    fn(p + "w_q", l.w_q);
    fn(p + "w_k", l.w_k);
    fn(p + "w_v", l.w_v);
    fn(p + "w_o", l.w_o);
    fn(p + "ln2_gain", l.ln2_gain);
    fn(p + "ln2_bias", l.ln2_bias);
    fn(p + "w_mlp1", l.w_mlp1);
    fn(p + "b_mlp1", l.b_mlp1);
    fn(p + "w_mlp2", l.w_mlp2);
    fn(p + "b_mlp2", l.b_mlp2);
  }
  fn("flow.w_in", flow.w_in);
  fn("flow.b_in", flow.b_in);
  for (std::size_t i = 0; i < flow.w_hidden.size(); ++i) {
    fn("flow.w_hidden." + std::to_string(i), flow.w_hidden[i]);
    fn("flow.b_hidden." + std::to_string(i), flow.b_hidden[i]);
  }
  fn("flow.w_out", flow.w_out);
  fn("flow.b_out", flow.b_out);
  fn("flow.w_skip", flow.w_skip);
  fn("flow.b_skip", flow.b_skip);
}

void FrozenWeights::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<FrozenWeights*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor& t) { fn(name, t); });
}

std::size_t FrozenWeights::bytes() const {
  std::size_t total = 0;
  for_each_tensor([&](const std::string&, const Tensor& t) { total += t.size() * sizeof(float); });
  return total;
}

bool FrozenWeights::bit_equal(const FrozenWeights& other) const {
  if (!(dims == other.dims) || kind != other.kind || seed != other.seed ||
      precision != other.precision || flow.parametrization != other.flow.parametrization) {
    return false;
  }
  std::vector<const Tensor*> mine;
  std::vector<const Tensor*> theirs;
  for_each_tensor([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
  other.for_each_tensor([&](const std::string&, const Tensor& t) { theirs.push_back(&t); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (!mine[i]->bit_equal(*theirs[i])) return false;
  }
  return true;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9E3779B97F4A7C15ull);
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Tensor gaussian(std::size_t rows, std::size_t cols, float scale, std::uint64_t seed,
                std::uint64_t salt) {
  const auto draws = sample_noise(mix_seed(seed, salt), rows * cols);
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < draws.size(); ++i) t.values()[i] = draws[i] * scale;
  return t;
}

Tensor filled(std::size_t rows, std::size_t cols, float value) {
  Tensor t(rows, cols);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

float inv_sqrt(std::size_t n) { return 1.0f / std::sqrt(static_cast<float>(n)); }

FrozenWeights zero_weights(std::uint64_t seed, const ModelDims& dims, PolicyKind kind) {
  const std::size_t d = dims.d_model;
  FrozenWeights w;
  w.dims = dims;
  w.kind = kind;
  w.seed = seed;
  w.token_embedding = Tensor(Vocabulary::standard().size(), d);
  w.position = Tensor(dims.L_p + dims.L_v, d);
  w.text_ln_gain = Tensor(1, d);
  w.text_ln_bias = Tensor(1, d);
  w.image_w1 = Tensor(dims.patch_dim, d);
  w.image_b1 = Tensor(1, d);
  w.image_w2 = Tensor(d, d);
  w.image_b2 = Tensor(1, d);
  w.state_w1 = Tensor(dims.state_dim, d);
  w.state_b1 = Tensor(1, d);
  w.state_w2 = Tensor(d, d);
  w.state_b2 = Tensor(1, d);
  for (std::size_t i = 0; i < dims.n_layers; ++i) {
    LayerWeights l;
    l.ln1_gain = Tensor(1, d);
    l.ln1_bias = Tensor(1, d);
    l.w_q = Tensor(d, d);
    l.w_k = Tensor(d, d);
    l.w_v = Tensor(d, d);
    l.w_o = Tensor(d, d);
    l.ln2_gain = Tensor(1, d);
    l.ln2_bias = Tensor(1, d);
    l.w_mlp1 = Tensor(d, dims.d_mlp());
    l.b_mlp1 = Tensor(1, dims.d_mlp());
    l.w_mlp2 = Tensor(dims.d_mlp(), d);
    l.b_mlp2 = Tensor(1, d);
    w.layers.push_back(std::move(l));
  }
  w.flow = zero_flow_head(d, dims.d_action, dims.flow_width, dims.flow_depth);
  return w;
}

void fill_sinusoidal(Tensor& pos) {
  const std::size_t d = pos.cols();
  for (std::size_t p = 0; p < pos.rows(); ++p) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pos(p, i) = static_cast<float>(std::sin(static_cast<double>(p) * freq));
      if (i + 1 < d) pos(p, i + 1) = static_cast<float>(std::cos(static_cast<double>(p) * freq));
    }
  }
}

FrozenWeights random_weights(std::uint64_t seed, const ModelDims& dims) {
  FrozenWeights w = zero_weights(seed, dims, PolicyKind::Random);
  const std::size_t d = dims.d_model;
  const std::size_t da = dims.d_action;
  std::uint64_t salt = 0;
  auto draw = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    return gaussian(rows, cols, inv_sqrt(fan_in), seed, ++salt);
  };
  w.token_embedding = draw(w.token_embedding.rows(), d, d);
  fill_sinusoidal(w.position);
  w.text_ln_gain = filled(1, d, 1.0f);
  w.image_w1 = draw(dims.patch_dim, d, dims.patch_dim);
  w.image_w2 = draw(d, d, d);
  w.state_w1 = draw(dims.state_dim, d, dims.state_dim);
  w.state_w2 = draw(d, d, d);
  for (LayerWeights& l : w.layers) {
    l.ln1_gain = filled(1, d, 1.0f);
    l.ln2_gain = filled(1, d, 1.0f);
    l.w_q = draw(d, d, d);
    l.w_k = draw(d, d, d);
    l.w_v = draw(d, d, d);
    l.w_o = draw(d, d, d);
    l.w_mlp1 = draw(d, dims.d_mlp(), d);
    l.w_mlp2 = draw(dims.d_mlp(), d, dims.d_mlp());
  }
  FlowHeadWeights& f = w.flow;
  f.parametrization = FlowParametrization::Velocity;
  f.w_in = draw(d + da + 1, dims.flow_width, d + da + 1);
  for (Tensor& h : f.w_hidden) h = draw(dims.flow_width, dims.flow_width, dims.flow_width);
  f.w_out = draw(dims.flow_width, da, dims.flow_width);
  f.w_skip = draw(d + da, da, d + da);
  return w;
}

// Channel layout of the hand-built reach policy. Every feature lives in a
// (+v, -v) pair so row means stay zero and layer norm reduces to a scale.
namespace reach {
constexpr std::size_t kAnchor = 0;   // ±A on every token: dominates the row variance
constexpr std::size_t kOne = 2;      // 1 on step tokens: the query
constexpr std::size_t kCarrier = 4;  // 1 on coordinate tokens: the key
constexpr std::size_t kGoalX = 6;
constexpr std::size_t kGoalY = 8;
constexpr std::size_t kPosX = 10;
constexpr std::size_t kPosY = 12;
constexpr std::size_t kChannels = 14;
constexpr float kAnchorValue = 256.0f;
constexpr float kLogitGap = 40.0f;  // coordinate-token score over every other key
}  // namespace reach

void set_pair(Tensor& t, std::size_t row, std::size_t channel, float value) {
  t(row, channel) = value;
  t(row, channel + 1) = -value;
}

FrozenWeights reach_weights(std::uint64_t seed, const ModelDims& dims) {
  using namespace reach;
  if (dims.d_model < kChannels) throw ConfigError("d_model: reach policy needs at least 14 channels");
  if (dims.d_head < 2) throw ConfigError("d_head: reach policy needs at least 2");
  if (dims.d_action < 2) throw ConfigError("d_action: reach policy needs at least 2");
  if (dims.state_dim < 2) throw ConfigError("state_dim: reach policy needs position in the state");
  if (dims.L_p < 6) throw ConfigError("L_p: reach policy needs room for a reach instruction");

  FrozenWeights w = zero_weights(seed, dims, PolicyKind::AnalyticReach);
  const std::size_t d = dims.d_model;
  const float a = kAnchorValue;
  // Layer norm of a row carrying only the anchor pair has σ = sqrt(2A²/d + ε);
  // using it as the gain makes the norm an identity on such rows.
  const float gain = std::sqrt(2.0f * a * a / static_cast<float>(d) + 1e-5f);

  const Vocabulary& vocab = Vocabulary::standard();
  for (std::size_t tok = 0; tok < vocab.size(); ++tok) {
    set_pair(w.token_embedding, tok, kAnchor, a);
    const auto id = static_cast<TokenId>(tok);
    if (vocab.is_x(id) || vocab.is_y(id)) {
      const int bin = static_cast<int>(id - (vocab.is_x(id) ? vocab.x_token(0) : vocab.y_token(0)));
      set_pair(w.token_embedding, tok, kCarrier, 1.0f);
      set_pair(w.token_embedding, tok, vocab.is_x(id) ? kGoalX : kGoalY,
               static_cast<float>(Vocabulary::bin_value(bin)));
    }
  }
  w.text_ln_gain = filled(1, d, gain);

  set_pair(w.image_b2, 0, kAnchor, a);
  set_pair(w.image_b2, 0, kOne, 1.0f);
  set_pair(w.state_b2, 0, kAnchor, a);
  set_pair(w.state_b2, 0, kOne, 1.0f);
  // relu(±px), relu(±py) in hidden units 0..3, recombined into signed pairs.
  w.state_w1(0, 0) = 1.0f;
  w.state_w1(0, 1) = -1.0f;
  w.state_w1(1, 2) = 1.0f;
  w.state_w1(1, 3) = -1.0f;
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const std::size_t channel = axis == 0 ? kPosX : kPosY;
    w.state_w2(2 * axis, channel) = 1.0f;
    w.state_w2(2 * axis + 1, channel) = -1.0f;
    w.state_w2(2 * axis, channel + 1) = -1.0f;
    w.state_w2(2 * axis + 1, channel + 1) = 1.0f;
  }

  for (LayerWeights& l : w.layers) {
    l.ln1_gain = filled(1, d, gain);
    l.ln2_gain = filled(1, d, gain);
  }
  // Layer 0, head 0: every step token attends to the two coordinate tokens
  // with weight 1/2 each and copies their goal channels.
  LayerWeights& l0 = w.layers.front();
  const float qk = std::sqrt(kLogitGap * std::sqrt(static_cast<float>(dims.d_head)));
  l0.w_q(kOne, 0) = qk;
  l0.w_k(kCarrier, 0) = qk;
  l0.w_v(kGoalX, 0) = 1.0f;
  l0.w_v(kGoalY, 1) = 1.0f;
  set_pair(l0.w_o, 0, kGoalX, 2.0f);
  set_pair(l0.w_o, 1, kGoalY, 2.0f);

  // Head output is the endpoint goal - position, read off mean(H):
  // mean goal channel = g, mean position channel = p / L_v (state row only).
  FlowHeadWeights& f = w.flow;
  f.parametrization = FlowParametrization::Target;
  const float pos_weight = 0.5f * static_cast<float>(dims.L_v);
  for (std::size_t axis = 0; axis < 2; ++axis) {
    const std::size_t goal = axis == 0 ? kGoalX : kGoalY;
    const std::size_t pos = axis == 0 ? kPosX : kPosY;
    f.w_skip(goal, axis) = 0.5f;
    f.w_skip(goal + 1, axis) = -0.5f;
    f.w_skip(pos, axis) = -pos_weight;
    f.w_skip(pos + 1, axis) = pos_weight;
  }
  return w;
}

}  // namespace

FrozenWeights build_weights(std::uint64_t seed, const ModelDims& dims, PolicyKind kind) {
  dims.validate();
  return kind == PolicyKind::Random ? random_weights(seed, dims) : reach_weights(seed, dims);
}

FrozenWeights cast_weights(const FrozenWeights& weights, PrecisionMode mode) {
  FrozenWeights out = weights;
  out.for_each_tensor([&](const std::string&, Tensor& t) {
    if (mode == PrecisionMode::Reduced16) {
      t.round_to(mode);
    } else {
      t.set_precision_tag(PrecisionMode::Full32);
    }
  });
  out.precision = mode;
  return out;
}

// ── Encoders ────────────────────────────────────────────────────────────

Observation Observation::zeros(const ModelDims& dims) {
  return {std::vector<float>(dims.image_feature_count(), 0.0f),
          std::vector<float>(dims.state_dim, 0.0f)};
}

namespace {

inline float rounded(float v, bool reduced) { return reduced ? round_reduced(v) : v; }

// dst[r] += row for every row of the block.
void add_bias_rows(MatrixView dst, std::span<const float> bias, bool reduced) {
  for (std::size_t r = 0; r < dst.rows; ++r) {
    float* row = dst.row(r);
    for (std::size_t c = 0; c < dst.cols; ++c) row[c] = rounded(row[c] + bias[c], reduced);
  }
}

}  // namespace

void encode_instruction_into(std::span<const TokenId> tokens, const FrozenWeights& weights,
                             PrecisionMode mode, FlopCounter* counter, Tensor& out) {
  const ModelDims& dims = weights.dims;
  if (tokens.size() > dims.L_p) {
    throw ShapeError("instruction has " + std::to_string(tokens.size()) + " tokens, prefix holds " +
                     std::to_string(dims.L_p));
  }
  const std::size_t vocab = weights.token_embedding.rows();
  for (TokenId id : tokens) {
    if (id >= vocab) throw VocabularyError("token id " + std::to_string(id) + " out of vocabulary");
  }
  const bool reduced = mode == PrecisionMode::Reduced16;
  const std::size_t d = dims.d_model;
  out.resize(dims.L_p, d);
  for (std::size_t i = 0; i < dims.L_p; ++i) {
    const TokenId id = i < tokens.size() ? tokens[i] : Vocabulary::kPad;
    auto dst = out.row(i);
    const auto emb = weights.token_embedding.row(id);
    const auto pos = weights.position.row(i);
    for (std::size_t c = 0; c < d; ++c) dst[c] = rounded(emb[c] + pos[c], reduced);
  }
  if (counter) counter->add(bucket::kEncode, dims.L_p * d);
  layer_norm_into(out.view(), weights.text_ln_gain, weights.text_ln_bias, out, mode, counter,
                  bucket::kEncode);
}

Tensor encode_instruction(std::span<const TokenId> tokens, const FrozenWeights& weights) {
  Tensor out;
  encode_instruction_into(tokens, weights, weights.precision, nullptr, out);
  return out;
}

std::size_t ObservationWorkspace::bytes() const {
  return image_in.bytes() + image_hidden.bytes() + state_in.bytes() + state_hidden.bytes() +
         state_out.bytes();
}

void encode_observation_into(const Observation& obs, const FrozenWeights& weights,
                             PrecisionMode mode, FlopCounter* counter, ObservationWorkspace& ws,
                             Tensor& out) {
  const ModelDims& dims = weights.dims;
  if (obs.image_features.size() != dims.image_feature_count()) {
    throw ShapeError("observation has " + std::to_string(obs.image_features.size()) +
                     " image features, expected " + std::to_string(dims.image_feature_count()));
  }
  if (obs.state.size() != dims.state_dim) {
    throw ShapeError("observation has " + std::to_string(obs.state.size()) +
                     " state values, expected " + std::to_string(dims.state_dim));
  }
  auto finite = [](float v) { return std::isfinite(v); };
  if (!std::all_of(obs.image_features.begin(), obs.image_features.end(), finite) ||
      !std::all_of(obs.state.begin(), obs.state.end(), finite)) {
    throw std::domain_error("observation contains a non-finite value");
  }
  const bool reduced = mode == PrecisionMode::Reduced16;
  const std::size_t d = dims.d_model;
  const std::size_t n_img = dims.image_tokens();
  const auto enc = bucket::kEncode;

  ws.image_in.resize(n_img, dims.patch_dim);
  std::copy(obs.image_features.begin(), obs.image_features.end(), ws.image_in.values().begin());
  matmul_into(ws.image_in, weights.image_w1, ws.image_hidden, mode, counter, enc);
  add_row_bias(ws.image_hidden, weights.image_b1, mode, counter, enc);
  relu_inplace(ws.image_hidden, mode, counter, enc);

  ws.state_in.resize(1, dims.state_dim);
  std::copy(obs.state.begin(), obs.state.end(), ws.state_in.values().begin());
  matmul_into(ws.state_in, weights.state_w1, ws.state_hidden, mode, counter, enc);
  add_row_bias(ws.state_hidden, weights.state_b1, mode, counter, enc);
  relu_inplace(ws.state_hidden, mode, counter, enc);

  out.resize(dims.L_v, d);
  MatrixView all = out.mutable_view();
  matmul(ws.image_hidden, weights.image_w2, all.row_block(0, n_img), mode, counter, enc);
  matmul(ws.state_hidden, weights.state_w2, all.row_block(n_img, 1), mode, counter, enc);
  add_bias_rows(all.row_block(0, n_img), weights.image_b2.row(0), reduced);
  add_bias_rows(all.row_block(n_img, 1), weights.state_b2.row(0), reduced);
  for (std::size_t r = 0; r < dims.L_v; ++r) {
    auto dst = out.row(r);
    const auto pos = weights.position.row(dims.L_p + r);
    for (std::size_t c = 0; c < d; ++c) dst[c] = rounded(dst[c] + pos[c], reduced);
  }
  out.set_precision_tag(mode);
  if (counter) counter->add(enc, 2 * dims.L_v * d);
}

Tensor encode_observation(const Observation& obs, const FrozenWeights& weights) {
  ObservationWorkspace ws;
  Tensor out;
  encode_observation_into(obs, weights, weights.precision, nullptr, ws, out);
  return out;
}

// ── Decoder ─────────────────────────────────────────────────────────────

void DecoderWorkspace::reserve(const ModelDims& dims) {
  const std::size_t d = dims.d_model;
  const std::size_t lk = dims.L_p + dims.L_v;
  normed.resize(dims.L_v, d);
  queries.resize(dims.L_v, d);
  keys.resize(lk, d);
  values.resize(lk, d);
  attended.resize(dims.L_v, d);
  projected.resize(dims.L_v, d);
  normed2.resize(dims.L_v, d);
  mlp_hidden.resize(dims.L_v, dims.d_mlp());
  mlp_out.resize(dims.L_v, d);
}

std::size_t DecoderWorkspace::bytes() const {
  return normed.bytes() + queries.bytes() + keys.bytes() + values.bytes() + attended.bytes() +
         projected.bytes() + normed2.bytes() + mlp_hidden.bytes() + mlp_out.bytes();
}

namespace {

void check_step_tokens(const Tensor& step_tokens, const ModelDims& dims) {
  if (step_tokens.cols() != dims.d_model || step_tokens.rows() != dims.L_v) {
    throw ShapeError("step tokens are " + std::to_string(step_tokens.rows()) + "x" +
                     std::to_string(step_tokens.cols()) + ", expected " + std::to_string(dims.L_v) +
                     "x" + std::to_string(dims.d_model));
  }
}

// Projects prefix and normalized step tokens separately into the two row
// blocks of `out`, so no concatenated input is materialized.
void project_stacked(const Tensor& prefix, const Tensor& normed, const Tensor& w, Tensor& out,
                     PrecisionMode mode, FlopCounter* counter) {
  const std::size_t lp = prefix.rows();
  out.resize(lp + normed.rows(), w.cols());
  MatrixView all = out.mutable_view();
  matmul(prefix, w, all.row_block(0, lp), mode, counter, bucket::kProjection);
  matmul(normed, w, all.row_block(lp, normed.rows()), mode, counter, bucket::kProjection);
  out.set_precision_tag(mode);
}

template <class KeyValueFn>
void run_layers(const Tensor& step_tokens, const FrozenWeights& weights,
                const DecodeOptions& options, DecoderWorkspace& ws, FlopCounter* counter,
                Tensor& hidden, KeyValueFn&& key_values) {
  const ModelDims& dims = weights.dims;
  const PrecisionMode mode = options.precision;
  hidden = step_tokens;
  for (std::size_t li = 0; li < dims.n_layers; ++li) {
    const LayerWeights& l = weights.layers[li];
    layer_norm_into(hidden, l.ln1_gain, l.ln1_bias, ws.normed, mode, counter, bucket::kNorm);
    matmul_into(ws.normed, l.w_q, ws.queries, mode, counter, bucket::kProjection);
    key_values(li, ws.normed);

    ws.attended.resize(dims.L_v, dims.d_model);
    const AttentionInput input{ws.queries, ws.keys, ws.values, dims.n_heads, dims.L_p};
    attend_into(options.attention, input, ws.attended.mutable_view(), mode, counter);
    ws.attended.set_precision_tag(mode);

    matmul_into(ws.attended, l.w_o, ws.projected, mode, counter, bucket::kProjection);
    add_inplace(hidden, ws.projected, mode, counter, bucket::kResidual);

    layer_norm_into(hidden, l.ln2_gain, l.ln2_bias, ws.normed2, mode, counter, bucket::kNorm);
    matmul_into(ws.normed2, l.w_mlp1, ws.mlp_hidden, mode, counter, bucket::kMlp);
    add_row_bias(ws.mlp_hidden, l.b_mlp1, mode, counter, bucket::kMlp);
    gelu_inplace(ws.mlp_hidden, mode, counter, bucket::kMlp);
    matmul_into(ws.mlp_hidden, l.w_mlp2, ws.mlp_out, mode, counter, bucket::kMlp);
    add_row_bias(ws.mlp_out, l.b_mlp2, mode, counter, bucket::kMlp);
    add_inplace(hidden, ws.mlp_out, mode, counter, bucket::kResidual);
  }
}

}  // namespace

void decode_into(const Tensor& prefix, const Tensor& step_tokens, const FrozenWeights& weights,
                 const DecodeOptions& options, DecoderWorkspace& ws, FlopCounter* counter,
                 Tensor& hidden) {
  const ModelDims& dims = weights.dims;
  check_step_tokens(step_tokens, dims);
  if (prefix.rows() != dims.L_p || prefix.cols() != dims.d_model) {
    throw ShapeError("prefix is " + std::to_string(prefix.rows()) + "x" +
                     std::to_string(prefix.cols()) + ", expected " + std::to_string(dims.L_p) + "x" +
                     std::to_string(dims.d_model));
  }
  run_layers(step_tokens, weights, options, ws, counter, hidden,
             [&](std::size_t li, const Tensor& normed) {
               const LayerWeights& l = weights.layers[li];
               project_stacked(prefix, normed, l.w_k, ws.keys, options.precision, counter);
               project_stacked(prefix, normed, l.w_v, ws.values, options.precision, counter);
             });
}

void decode_cached_into(const PrefixCache& cache, std::uint64_t episode_id,
                        const Tensor& step_tokens, const FrozenWeights& weights,
                        const DecodeOptions& options, DecoderWorkspace& ws, FlopCounter* counter,
                        Tensor& hidden) {
  check_step_tokens(step_tokens, weights.dims);
  cache.check(episode_id, options.precision);
  if (cache.n_layers() != weights.dims.n_layers) throw ShapeError("cache layer count mismatch");
  run_layers(step_tokens, weights, options, ws, counter, hidden,
             [&](std::size_t li, const Tensor& normed) {
               assemble_kv(cache, episode_id, normed, li, weights, options.precision, counter,
                           ws.keys, ws.values);
             });
}

Tensor decode(const Tensor& sequence, const FrozenWeights& weights, const DecodeOptions& options,
              FlopCounter& counter) {
  const ModelDims& dims = weights.dims;
  if (sequence.rows() != dims.L_p + dims.L_v || sequence.cols() != dims.d_model) {
    throw ShapeError("sequence is " + std::to_string(sequence.rows()) + "x" +
                     std::to_string(sequence.cols()) + ", expected " +
                     std::to_string(dims.L_p + dims.L_v) + "x" + std::to_string(dims.d_model));
  }
  Tensor prefix = Tensor::from_values(dims.L_p, dims.d_model,
                                      sequence.values().subspan(0, dims.L_p * dims.d_model));
  Tensor steps = Tensor::from_values(dims.L_v, dims.d_model,
                                     sequence.values().subspan(dims.L_p * dims.d_model));
  prefix.set_precision_tag(sequence.precision());
  steps.set_precision_tag(sequence.precision());
  DecoderWorkspace ws;
  Tensor hidden;
  decode_into(prefix, steps, weights, options, ws, &counter, hidden);
  return hidden;
}

Tensor decode_cached(const PrefixCache& cache, std::uint64_t episode_id, const Tensor& step_tokens,
                     const FrozenWeights& weights, const DecodeOptions& options,
                     FlopCounter& counter) {
  DecoderWorkspace ws;
  Tensor hidden;
  decode_cached_into(cache, episode_id, step_tokens, weights, options, ws, &counter, hidden);
  return hidden;
}

// ── Serialization ───────────────────────────────────────────────────────

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host byte order, which must be little-endian");

namespace {

constexpr char kTensorMagic[4] = {'D', 'V', 'T', 'N'};
constexpr char kWeightsMagic[4] = {'D', 'V', 'W', 'T'};
constexpr std::uint32_t kWeightsVersion = 1;

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw std::runtime_error("unexpected end of file");
  return value;
}

void write_record(std::ostream& out, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
}

Tensor read_record(std::istream& in) {
  const auto rows = get<std::uint32_t>(in);
  const auto cols = get<std::uint32_t>(in);
  Tensor t(rows, cols);
  in.read(reinterpret_cast<char*>(t.values().data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated tensor data");
  return t;
}

void expect_magic(std::istream& in, const char (&magic)[4], const std::filesystem::path& path) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::memcmp(buf, magic, 4) != 0) {
    throw std::runtime_error(path.string() + ": bad magic");
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  auto out = open_out(path);
  out.write(kTensorMagic, 4);
  write_record(out, tensor);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_magic(in, kTensorMagic, path);
  return read_record(in);
}

void save_weights(const std::filesystem::path& path, const FrozenWeights& weights) {
  auto out = open_out(path);
  out.write(kWeightsMagic, 4);
  put<std::uint32_t>(out, kWeightsVersion);
  const ModelDims& d = weights.dims;
  for (std::size_t v : {d.d_model, d.n_layers, d.n_heads, d.d_head, d.L_p, d.L_v, d.d_action,
                        d.mlp_ratio, d.patch_dim, d.state_dim, d.flow_width, d.flow_depth}) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(weights.kind));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(weights.precision));
  put<std::uint64_t>(out, weights.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(weights.flow.parametrization));
  weights.for_each_tensor([&](const std::string&, const Tensor& t) { write_record(out, t); });
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

FrozenWeights load_weights(const std::filesystem::path& path) {
  auto in = open_in(path);
  expect_magic(in, kWeightsMagic, path);
  if (get<std::uint32_t>(in) != kWeightsVersion) {
    throw std::runtime_error(path.string() + ": unsupported weights version");
  }
  FrozenWeights w;
  ModelDims& d = w.dims;
  for (std::size_t* field : {&d.d_model, &d.n_layers, &d.n_heads, &d.d_head, &d.L_p, &d.L_v,
                             &d.d_action, &d.mlp_ratio, &d.patch_dim, &d.state_dim, &d.flow_width,
                             &d.flow_depth}) {
    *field = get<std::uint32_t>(in);
  }
  d.validate();
  w.kind = static_cast<PolicyKind>(get<std::uint32_t>(in));
  w.precision = static_cast<PrecisionMode>(get<std::uint32_t>(in));
  w.seed = get<std::uint64_t>(in);
  w.flow.parametrization = static_cast<FlowParametrization>(get<std::uint32_t>(in));
  w.layers.resize(d.n_layers);
  w.flow.w_hidden.resize(d.flow_depth);
  w.flow.b_hidden.resize(d.flow_depth);
  w.for_each_tensor([&](const std::string&, Tensor& t) {
    t = read_record(in);
    t.set_precision_tag(w.precision);
  });
  return w;
}

}  // namespace deskvla
