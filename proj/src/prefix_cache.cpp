// SPDX-License-Identifier: Apache-2.0

#include "deskvla/prefix_cache.hpp"

#include <algorithm>

namespace deskvla {

PrefixCache::PrefixCache(std::vector<LayerKV> layers, std::uint64_t episode_id,
                         PrecisionMode precision)
    : layers_(std::move(layers)), episode_id_(episode_id), precision_(precision) {}

std::size_t PrefixCache::bytes() const {
  std::size_t total = 0;
  for (const auto& kv : layers_) total += kv.keys.bytes() + kv.values.bytes();
  return total;
}

void PrefixCache::check(std::uint64_t episode_id, PrecisionMode precision) const {
  if (episode_id != episode_id_) {
    throw StaleCacheError("prefix cache was built for episode " + std::to_string(episode_id_) +
                          ", used in episode " + std::to_string(episode_id));
  }
  if (precision != precision_) {
    throw StaleCacheError("prefix cache was built under " + std::string(to_string(precision_)) +
                          ", used under " + std::string(to_string(precision)));
  }
}

PrefixCache build_prefix_cache(const Tensor& prefix, const FrozenWeights& weights,
                               PrecisionMode precision, std::uint64_t episode_id,
                               FlopCounter* setup_counter) {
  const ModelDims& dims = weights.dims;
  if (prefix.rows() != dims.L_p || prefix.cols() != dims.d_model) {
    throw ShapeError("prefix is " + std::to_string(prefix.rows()) + "x" +
                     std::to_string(prefix.cols()) + ", expected " + std::to_string(dims.L_p) + "x" +
                     std::to_string(dims.d_model));
  }
  std::vector<PrefixCache::LayerKV> layers;
  layers.reserve(dims.n_layers);
  for (const LayerWeights& l : weights.layers) {
    PrefixCache::LayerKV kv;
    matmul_into(prefix, l.w_k, kv.keys, precision, setup_counter, bucket::kSetup);
    matmul_into(prefix, l.w_v, kv.values, precision, setup_counter, bucket::kSetup);
    layers.push_back(std::move(kv));
  }
  return PrefixCache(std::move(layers), episode_id, precision);
}

void assemble_kv(const PrefixCache& cache, std::uint64_t episode_id, ConstMatrixView step_tokens,
                 std::size_t layer, const FrozenWeights& weights, PrecisionMode precision,
                 FlopCounter* counter, Tensor& keys, Tensor& values) {
  cache.check(episode_id, precision);
  if (layer >= cache.n_layers() || layer >= weights.layers.size()) {
    throw ShapeError("layer " + std::to_string(layer) + " out of range");
  }
  const auto& kv = cache.layers()[layer];
  const LayerWeights& l = weights.layers[layer];
  if (step_tokens.rows > 0 && step_tokens.cols != l.w_k.rows()) {
    throw ShapeError("step tokens have width " + std::to_string(step_tokens.cols) + ", expected " +
                     std::to_string(l.w_k.rows()));
  }
  const std::size_t lp = kv.keys.rows();
  const std::size_t d = kv.keys.cols();
  auto stack = [&](const Tensor& cached, const Tensor& w, Tensor& out) {
    out.resize(lp + step_tokens.rows, d);
    std::copy(cached.values().begin(), cached.values().end(), out.values().begin());
    if (step_tokens.rows > 0) {
      matmul(step_tokens, w, out.mutable_view().row_block(lp, step_tokens.rows), precision,
             counter, bucket::kProjection);
    }
    out.set_precision_tag(precision);
  };
  stack(kv.keys, l.w_k, keys);
  stack(kv.values, l.w_v, values);
}

}  // namespace deskvla
