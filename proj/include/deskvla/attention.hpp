// SPDX-License-Identifier: Apache-2.0
//
// Multi-head scaled dot-product attention over [prefix; step] keys. Two
// kernels with the same result: one materializes the score matrix, the other
// walks key tiles with a running max and normalizer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "deskvla/numerics.hpp"

namespace deskvla {

/// Queries/keys/values are packed per head along columns: head h owns
/// columns [h·d_head, (h+1)·d_head).
struct AttentionInput {
  ConstMatrixView queries;
  ConstMatrixView keys;
  ConstMatrixView values;
  std::size_t n_heads = 1;
  std::size_t prefix_len = 0;  // leading key/value rows that came from a cache

  std::size_t d_head() const { return n_heads == 0 ? 0 : queries.cols / n_heads; }
};

/// Throws ShapeError when the input is inconsistent.
void validate(const AttentionInput& input);

enum class AttentionKind : std::uint8_t { Naive, Streaming };

struct AttentionKernel {
  AttentionKind kind = AttentionKind::Naive;
  std::size_t tile = 8;  // only used by Streaming

  static AttentionKernel naive() { return {AttentionKind::Naive, 8}; }
  static AttentionKernel streaming(std::size_t tile = 8) { return {AttentionKind::Streaming, tile}; }

  friend bool operator==(const AttentionKernel& a, const AttentionKernel& b) {
    return a.kind == b.kind && (a.kind == AttentionKind::Naive || a.tile == b.tile);
  }
};

/// "naive" or "streaming(8)".
std::string to_string(const AttentionKernel& kernel);
/// Accepts "naive", "streaming" (tile 8) and "streaming(N)". Throws ConfigError.
AttentionKernel parse_attention_kernel(std::string_view text);

/// Charged by both kernels: Q·Kᵀ and P·V as matmuls, one FLOP per score for
/// the 1/√d_head scale, softmax at the per-element convention.
std::uint64_t attention_flops(std::size_t lq, std::size_t lk, std::size_t n_heads, std::size_t d_head);

void attend_naive_into(const AttentionInput& input, MatrixView out, PrecisionMode mode,
                       FlopCounter* counter);
void attend_streaming_into(const AttentionInput& input, std::size_t tile, MatrixView out,
                           PrecisionMode mode, FlopCounter* counter);
void attend_into(const AttentionKernel& kernel, const AttentionInput& input, MatrixView out,
                 PrecisionMode mode, FlopCounter* counter);

Tensor attend_naive(const AttentionInput& input, FlopCounter& counter,
                    PrecisionMode mode = PrecisionMode::Full32);
Tensor attend_streaming(const AttentionInput& input, std::size_t tile, FlopCounter& counter,
                        PrecisionMode mode = PrecisionMode::Full32);

}  // namespace deskvla
