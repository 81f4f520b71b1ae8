// SPDX-License-Identifier: Apache-2.0

#include "deskvla/attention.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <limits>

namespace deskvla {

namespace {

std::string dims(const ConstMatrixView& v) {
  return std::to_string(v.rows) + "x" + std::to_string(v.cols);
}

float scale_for(std::size_t d_head) { return 1.0f / std::sqrt(static_cast<float>(d_head)); }

float dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// out[j] = scale · dot(q, keys.row(first + j) + offset) for j < n. Eight
// independent sums run side by side; each keeps dot()'s summation order.
void scores_into(const float* q, const ConstMatrixView& keys, std::size_t first, std::size_t n,
                 std::size_t offset, std::size_t dh, float scale, float* out) {
  constexpr std::size_t kBlock = 8;
  const std::size_t stride = keys.stride;
  std::size_t j = 0;
  for (; j + kBlock <= n; j += kBlock) {
    const float* __restrict base = keys.row(first + j) + offset;
    float acc[kBlock] = {};
    for (std::size_t c = 0; c < dh; ++c) {
      const float qc = q[c];
      for (std::size_t b = 0; b < kBlock; ++b) acc[b] += qc * base[b * stride + c];
    }
    for (std::size_t b = 0; b < kBlock; ++b) out[j + b] = acc[b] * scale;
  }
  for (; j < n; ++j) out[j] = dot(q, keys.row(first + j) + offset, dh) * scale;
}

// Under Reduced16 the operands must be bf16 values; copies are only made
// when a view is not already tagged.
struct RoundedOperand {
  Tensor storage;
  ConstMatrixView view;

  RoundedOperand(ConstMatrixView v, PrecisionMode mode) : view(v) {
    if (mode != PrecisionMode::Reduced16 || v.precision == PrecisionMode::Reduced16) return;
    storage.resize(v.rows, v.cols);
    for (std::size_t r = 0; r < v.rows; ++r) {
      for (std::size_t c = 0; c < v.cols; ++c) storage(r, c) = round_reduced(v(r, c));
    }
    storage.set_precision_tag(PrecisionMode::Reduced16);
    view = storage.view();
  }
};

}  // namespace

void validate(const AttentionInput& input) {
  if (input.n_heads == 0) throw ShapeError("attention needs at least one head");
  if (input.queries.cols != input.keys.cols) {
    throw ShapeError("query width " + dims(input.queries) + " does not match key width " +
                     dims(input.keys));
  }
  if (input.keys.rows != input.values.rows) {
    throw ShapeError("keys " + dims(input.keys) + " and values " + dims(input.values) +
                     " differ in row count");
  }
  if (input.values.cols != input.keys.cols) {
    throw ShapeError("value width " + dims(input.values) + " does not match key width " +
                     dims(input.keys));
  }
  if (input.queries.cols % input.n_heads != 0) {
    throw ShapeError("width " + std::to_string(input.queries.cols) + " not divisible by " +
                     std::to_string(input.n_heads) + " heads");
  }
  if (input.prefix_len > input.keys.rows) throw ShapeError("prefix_len exceeds key count");
  if (input.keys.rows == 0) throw ShapeError("attention over zero keys");
}

std::string to_string(const AttentionKernel& kernel) {
  if (kernel.kind == AttentionKind::Naive) return "naive";
  return "streaming(" + std::to_string(kernel.tile) + ")";
}

AttentionKernel parse_attention_kernel(std::string_view text) {
  if (text == "naive") return AttentionKernel::naive();
  if (text == "streaming") return AttentionKernel::streaming();
  constexpr std::string_view prefix = "streaming(";
  if (text.starts_with(prefix) && text.ends_with(")")) {
    const auto digits = text.substr(prefix.size(), text.size() - prefix.size() - 1);
    std::size_t tile = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), tile);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && tile >= 1) {
      return AttentionKernel::streaming(tile);
    }
  }
  throw ConfigError("unknown attention kernel '" + std::string(text) +
                    "' (expected naive or streaming(N))");
}

std::uint64_t attention_flops(std::size_t lq, std::size_t lk, std::size_t n_heads, std::size_t d_head) {
  const std::uint64_t scores = static_cast<std::uint64_t>(n_heads) * lq * lk;
  const std::uint64_t width = static_cast<std::uint64_t>(n_heads) * d_head;
  return 2 * lq * lk * width + scores + kSoftmaxFlopsPerElement * scores + 2 * lq * lk * width;
}

void attend_naive_into(const AttentionInput& input, MatrixView out, PrecisionMode mode,
                       FlopCounter* counter) {
  validate(input);
  const std::size_t lq = input.queries.rows;
  const std::size_t lk = input.keys.rows;
  const std::size_t heads = input.n_heads;
  const std::size_t dh = input.d_head();
  if (out.rows != lq || out.cols != input.queries.cols) throw ShapeError("attention output shape");
  const bool reduced = mode == PrecisionMode::Reduced16;
  const RoundedOperand q(input.queries, mode);
  const RoundedOperand k(input.keys, mode);
  const RoundedOperand v(input.values, mode);
  const float scale = scale_for(dh);

  Tensor scores(heads * lq, lk);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < lq; ++i) {
      float* row = scores.row(h * lq + i).data();
      scores_into(q.view.row(i) + h * dh, k.view, 0, lk, h * dh, dh, scale, row);
      if (reduced) {
        for (std::size_t j = 0; j < lk; ++j) row[j] = round_reduced(row[j]);
      }
    }
  }
  Tensor probs = scores;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto row = probs.row(r);
    softmax_row_inplace(row);
    if (reduced) {
      for (float& p : row) p = round_reduced(p);
    }
  }
  for (std::size_t i = 0; i < lq; ++i) std::fill_n(out.row(i), out.cols, 0.0f);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < lq; ++i) {
      float* __restrict dst = out.row(i) + h * dh;
      const float* p = probs.row(h * lq + i).data();
      for (std::size_t j = 0; j < lk; ++j) {
        const float* __restrict vj = v.view.row(j) + h * dh;
        const float pj = p[j];
        for (std::size_t c = 0; c < dh; ++c) dst[c] += pj * vj[c];
      }
      if (reduced) {
        for (std::size_t c = 0; c < dh; ++c) dst[c] = round_reduced(dst[c]);
      }
    }
  }
  if (counter) counter->add(bucket::kAttention, attention_flops(lq, lk, heads, dh));
}

void attend_streaming_into(const AttentionInput& input, std::size_t tile, MatrixView out,
                           PrecisionMode mode, FlopCounter* counter) {
  validate(input);
  if (tile == 0) throw ConfigError("attention tile must be at least 1");
  const std::size_t lq = input.queries.rows;
  const std::size_t lk = input.keys.rows;
  const std::size_t heads = input.n_heads;
  const std::size_t dh = input.d_head();
  if (out.rows != lq || out.cols != input.queries.cols) throw ShapeError("attention output shape");
  const bool reduced = mode == PrecisionMode::Reduced16;
  const RoundedOperand q(input.queries, mode);
  const RoundedOperand k(input.keys, mode);
  const RoundedOperand v(input.values, mode);
  const float scale = scale_for(dh);
  const std::size_t width = std::min(tile, lk);

  Tensor block(lq, width);
  Tensor row_max(1, lq);
  Tensor row_sum(1, lq);
  for (std::size_t h = 0; h < heads; ++h) {
    std::fill(row_max.values().begin(), row_max.values().end(),
              -std::numeric_limits<float>::infinity());
    std::fill(row_sum.values().begin(), row_sum.values().end(), 0.0f);
    for (std::size_t i = 0; i < lq; ++i) std::fill_n(out.row(i) + h * dh, dh, 0.0f);

    for (std::size_t start = 0; start < lk; start += width) {
      const std::size_t n = std::min(width, lk - start);
      for (std::size_t i = 0; i < lq; ++i) {
        const float* qi = q.view.row(i) + h * dh;
        float* s = block.row(i).data();
        float tile_max = -std::numeric_limits<float>::infinity();
        scores_into(qi, k.view, start, n, h * dh, dh, scale, s);
        for (std::size_t j = 0; j < n; ++j) {
          if (reduced) s[j] = round_reduced(s[j]);
          tile_max = std::max(tile_max, s[j]);
        }
        const float m_old = row_max(0, i);
        const float m_new = std::max(m_old, tile_max);
        const float rescale = std::exp(m_old - m_new);  // exp(-inf) == 0 on the first tile
        float* __restrict acc = out.row(i) + h * dh;
        for (std::size_t c = 0; c < dh; ++c) acc[c] *= rescale;
        float sum = row_sum(0, i) * rescale;
        exp_shifted_inplace(s, n, m_new);
        for (std::size_t j = 0; j < n; ++j) {
          const float p = s[j];
          sum += p;
          const float* __restrict vj = v.view.row(start + j) + h * dh;
          for (std::size_t c = 0; c < dh; ++c) acc[c] += p * vj[c];
        }
        row_max(0, i) = m_new;
        row_sum(0, i) = sum;
      }
    }
    for (std::size_t i = 0; i < lq; ++i) {
      float* acc = out.row(i) + h * dh;
      const float inv = 1.0f / row_sum(0, i);
      for (std::size_t c = 0; c < dh; ++c) {
        const float o = acc[c] * inv;
        acc[c] = reduced ? round_reduced(o) : o;
      }
    }
  }
  if (counter) counter->add(bucket::kAttention, attention_flops(lq, lk, heads, dh));
}

void attend_into(const AttentionKernel& kernel, const AttentionInput& input, MatrixView out,
                 PrecisionMode mode, FlopCounter* counter) {
  if (kernel.kind == AttentionKind::Naive) {
    attend_naive_into(input, out, mode, counter);
  } else {
    attend_streaming_into(input, kernel.tile, out, mode, counter);
  }
}

Tensor attend_naive(const AttentionInput& input, FlopCounter& counter, PrecisionMode mode) {
  validate(input);
  Tensor out(input.queries.rows, input.queries.cols);
  attend_naive_into(input, out.mutable_view(), mode, &counter);
  out.set_precision_tag(mode);
  return out;
}

Tensor attend_streaming(const AttentionInput& input, std::size_t tile, FlopCounter& counter,
                        PrecisionMode mode) {
  validate(input);
  Tensor out(input.queries.rows, input.queries.cols);
  attend_streaming_into(input, tile, out.mutable_view(), mode, &counter);
  out.set_precision_tag(mode);
  return out;
}

}  // namespace deskvla
