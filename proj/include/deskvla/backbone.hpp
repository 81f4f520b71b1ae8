// SPDX-License-Identifier: Apache-2.0
//
// The frozen controller: instruction encoder, observation encoder and an
// N-layer pre-norm transformer decoder whose queries are the step tokens and
// whose keys/values span [prefix ; step tokens].

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "deskvla/attention.hpp"
#include "deskvla/flow_decoder.hpp"
#include "deskvla/numerics.hpp"

namespace deskvla {

struct ModelDims {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t L_p = 16;
  std::size_t L_v = 32;
  std::size_t d_action = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch_dim = 8;    // features per image token
  std::size_t state_dim = 5;    // px, py, vx, vy, gripper
  std::size_t flow_width = 512;
  std::size_t flow_depth = 4;

  std::size_t d_mlp() const { return d_model * mlp_ratio; }
  std::size_t image_tokens() const { return L_v - 1; }
  std::size_t image_feature_count() const { return image_tokens() * patch_dim; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Small dims for fast tests.
ModelDims tiny_dims();

enum class PolicyKind : std::uint8_t { Random, AnalyticReach };

std::string_view to_string(PolicyKind kind);
PolicyKind parse_policy_kind(std::string_view text);

// ── Vocabulary ──────────────────────────────────────────────────────────

using TokenId = std::uint32_t;

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Words plus two banks of coordinate tokens "x=+0.35" / "y=-0.20" on a
/// 0.01 grid over [-1, 1].
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr int kCoordinateBins = 201;

  static const Vocabulary& standard();

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;

  /// Whitespace-separated words, wrapped in BOS/EOS.
  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  TokenId x_token(int bin) const { return x_base_ + static_cast<TokenId>(bin); }
  TokenId y_token(int bin) const { return y_base_ + static_cast<TokenId>(bin); }
  bool is_x(TokenId id) const { return id >= x_base_ && id < x_base_ + kCoordinateBins; }
  bool is_y(TokenId id) const { return id >= y_base_ && id < y_base_ + kCoordinateBins; }
  /// Coordinate value carried by an x/y token.
  static double bin_value(int bin) { return -1.0 + 0.01 * bin; }
  /// Nearest bin for a value, clamped to [-1, 1].
  static int bin_of(double value);
  static std::string coordinate_token(char axis, int bin);

 private:
  Vocabulary();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId x_base_ = 0;
  TokenId y_base_ = 0;
};

// ── Weights ─────────────────────────────────────────────────────────────

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_mlp1, b_mlp1, w_mlp2, b_mlp2;
};

struct FrozenWeights {
  ModelDims dims;
  PolicyKind kind = PolicyKind::Random;
  std::uint64_t seed = 0;
  PrecisionMode precision = PrecisionMode::Full32;

  Tensor token_embedding;  // vocab × d
  Tensor position;         // (L_p + L_v) × d; prefix uses rows [0, L_p)
  Tensor text_ln_gain, text_ln_bias;

  Tensor image_w1, image_b1, image_w2, image_b2;  // patch_dim → d → d
  Tensor state_w1, state_b1, state_w2, state_b2;  // state_dim → d → d

  std::vector<LayerWeights> layers;
  FlowHeadWeights flow;

  /// Visits every tensor in the fixed serialization order.
  void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t bytes() const;
  bool bit_equal(const FrozenWeights& other) const;
};

/// Random: Gaussian entries scaled by 1/√fan_in (1/√d_model for every
/// d_model-input matrix), unit norm gains, sinusoidal positions.
/// AnalyticReach: hand-built so that action ≈ goal - position, with the goal
/// read from the instruction's coordinate tokens through attention.
FrozenWeights build_weights(std::uint64_t seed, const ModelDims& dims, PolicyKind kind);

/// Copy with every tensor rounded to `mode` (done once per pipeline).
FrozenWeights cast_weights(const FrozenWeights& weights, PrecisionMode mode);

// ── Encoders and decoder ────────────────────────────────────────────────

struct Observation {
  std::vector<float> image_features;  // image_tokens × patch_dim, row-major
  std::vector<float> state;           // px, py, vx, vy, gripper

  static Observation zeros(const ModelDims& dims);
  friend bool operator==(const Observation&, const Observation&) = default;
};

/// Instruction → P (L_p × d). Pads with PAD to L_p rows. Throws
/// VocabularyError on unknown ids and ShapeError when too long.
void encode_instruction_into(std::span<const TokenId> tokens, const FrozenWeights& weights,
                             PrecisionMode mode, FlopCounter* counter, Tensor& out);
Tensor encode_instruction(std::span<const TokenId> tokens, const FrozenWeights& weights);

/// Observation → V_t (L_v × d): one row per image patch, the state row last.
/// Throws std::domain_error on non-finite input.
struct ObservationWorkspace {
  Tensor image_in, image_hidden, state_in, state_hidden, state_out;
  std::size_t bytes() const;
};
void encode_observation_into(const Observation& obs, const FrozenWeights& weights,
                             PrecisionMode mode, FlopCounter* counter, ObservationWorkspace& ws,
                             Tensor& out);
Tensor encode_observation(const Observation& obs, const FrozenWeights& weights);

struct DecodeOptions {
  PrecisionMode precision = PrecisionMode::Full32;
  AttentionKernel attention = AttentionKernel::naive();
};

/// Per-step activations of the decoder. Reused when kept alive.
struct DecoderWorkspace {
  Tensor normed, queries, keys, values, attended, projected, normed2, mlp_hidden, mlp_out;
  void reserve(const ModelDims& dims);
  std::size_t bytes() const;
};

class PrefixCache;

/// Uncached: every layer projects [P ; Hn] to keys and values.
void decode_into(const Tensor& prefix, const Tensor& step_tokens, const FrozenWeights& weights,
                 const DecodeOptions& options, DecoderWorkspace& ws, FlopCounter* counter,
                 Tensor& hidden);

/// Cached: prefix keys/values come from `cache`, which must belong to
/// `episode_id`.
void decode_cached_into(const PrefixCache& cache, std::uint64_t episode_id,
                        const Tensor& step_tokens, const FrozenWeights& weights,
                        const DecodeOptions& options, DecoderWorkspace& ws, FlopCounter* counter,
                        Tensor& hidden);

/// `sequence` is X_t = [P ; V_t] ((L_p + L_v) × d). Returns L_v × d.
Tensor decode(const Tensor& sequence, const FrozenWeights& weights, const DecodeOptions& options,
              FlopCounter& counter);
Tensor decode_cached(const PrefixCache& cache, std::uint64_t episode_id, const Tensor& step_tokens,
                     const FrozenWeights& weights, const DecodeOptions& options,
                     FlopCounter& counter);

// ── Serialization ───────────────────────────────────────────────────────
//
// Tensor file: "DVTN", u32 rows, u32 cols, rows·cols little-endian f32.
// Weights file: "DVWT", u32 version, u32 dims[12], u32 kind, u32 precision,
// u64 seed, u32 flow parametrization, then every tensor as a tensor record.

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);
void save_weights(const std::filesystem::path& path, const FrozenWeights& weights);
FrozenWeights load_weights(const std::filesystem::path& path);

}  // namespace deskvla
