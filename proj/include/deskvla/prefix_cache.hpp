// SPDX-License-Identifier: Apache-2.0
//
// Instruction-prefix key/value cache: P·W_K and P·W_V for every layer, built
// once per episode and stacked under the step-token projections each step.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "deskvla/backbone.hpp"

namespace deskvla {

class StaleCacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PrefixCache {
 public:
  struct LayerKV {
    Tensor keys;    // L_p × d
    Tensor values;  // L_p × d
  };

  PrefixCache(std::vector<LayerKV> layers, std::uint64_t episode_id, PrecisionMode precision);

  const std::vector<LayerKV>& layers() const { return layers_; }
  std::size_t n_layers() const { return layers_.size(); }
  std::size_t prefix_len() const { return layers_.empty() ? 0 : layers_.front().keys.rows(); }
  std::uint64_t episode_id() const { return episode_id_; }
  PrecisionMode precision() const { return precision_; }
  std::size_t bytes() const;

  /// Throws StaleCacheError unless built for this episode and precision.
  void check(std::uint64_t episode_id, PrecisionMode precision) const;

 private:
  std::vector<LayerKV> layers_;
  std::uint64_t episode_id_;
  PrecisionMode precision_;
};

/// FLOPs go to the setup bucket.
PrefixCache build_prefix_cache(const Tensor& prefix, const FrozenWeights& weights,
                               PrecisionMode precision, std::uint64_t episode_id,
                               FlopCounter* setup_counter = nullptr);

/// keys = [K_pref ; step·W_K], values = [V_pref ; step·W_V]. Charges only the
/// step-token projections. With zero step rows the prefix comes back as is.
void assemble_kv(const PrefixCache& cache, std::uint64_t episode_id, ConstMatrixView step_tokens,
                 std::size_t layer, const FrozenWeights& weights, PrecisionMode precision,
                 FlopCounter* counter, Tensor& keys, Tensor& values);

}  // namespace deskvla
