// SPDX-License-Identifier: Apache-2.0

#include "deskvla/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <sstream>

#include <Eigen/Core>

namespace deskvla {

std::string_view to_string(PrecisionMode mode) {
  return mode == PrecisionMode::Full32 ? "full32" : "reduced16";
}

// ── FlopCounter ─────────────────────────────────────────────────────────

void FlopCounter::add(std::string_view bucket_name, std::uint64_t flops) {
  auto it = breakdown_.find(bucket_name);
  if (it == breakdown_.end()) it = breakdown_.emplace(std::string(bucket_name), 0).first;
  it->second += flops;
  total_ += flops;
}

void FlopCounter::merge(const FlopCounter& other) {
  for (const auto& [name, flops] : other.breakdown_) add(name, flops);
}

void FlopCounter::reset() noexcept {
  total_ = 0;
  breakdown_.clear();
}

std::uint64_t FlopCounter::bucket(std::string_view bucket_name) const {
  auto it = breakdown_.find(bucket_name);
  return it == breakdown_.end() ? 0 : it->second;
}

// ── AllocationTracker ───────────────────────────────────────────────────

namespace {
thread_local AllocationTracker* g_tracker = nullptr;
}

AllocationTracker* active_tracker() noexcept { return g_tracker; }

void AllocationTracker::reset(std::int64_t resident_bytes) noexcept {
  current_ = resident_bytes;
  peak_ = resident_bytes;
  largest_ = 0;
}

void AllocationTracker::on_allocate(std::size_t bytes) noexcept {
  const auto b = static_cast<std::int64_t>(bytes);
  current_ += b;
  peak_ = std::max(peak_, current_);
  largest_ = std::max(largest_, b);
}

void AllocationTracker::on_release(std::size_t bytes) noexcept {
  current_ -= static_cast<std::int64_t>(bytes);
}

TrackingScope::TrackingScope(AllocationTracker& tracker) noexcept : previous_(g_tracker) {
  g_tracker = &tracker;
}

TrackingScope::~TrackingScope() { g_tracker = previous_; }

// ── Views ───────────────────────────────────────────────────────────────

ConstMatrixView ConstMatrixView::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows) throw ShapeError("row block out of range");
  return {data + begin * stride, count, cols, stride, precision};
}

ConstMatrixView ConstMatrixView::col_block(std::size_t begin, std::size_t count) const {
  if (begin + count > cols) throw ShapeError("column block out of range");
  return {data + begin, rows, count, stride, precision};
}

MatrixView MatrixView::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows) throw ShapeError("row block out of range");
  return {data + begin * stride, count, cols, stride};
}

MatrixView MatrixView::col_block(std::size_t begin, std::size_t count) const {
  if (begin + count > cols) throw ShapeError("column block out of range");
  return {data + begin, rows, count, stride};
}

// ── Tensor ──────────────────────────────────────────────────────────────

Tensor::Tensor(std::size_t rows, std::size_t cols, PrecisionMode precision)
    : rows_(rows), cols_(cols), precision_(precision), data_(rows * cols, 0.0f) {}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Tensor t(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged initializer");
    std::copy(row.begin(), row.end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
    ++i;
  }
  return t;
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::span<const float> values) {
  if (values.size() != rows * cols) throw ShapeError("value count does not match shape");
  Tensor t(rows, cols);
  std::copy(values.begin(), values.end(), t.data_.begin());
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

ConstMatrixView Tensor::rows_view(std::size_t begin, std::size_t count) const {
  return view().row_block(begin, count);
}

void Tensor::resize(std::size_t rows, std::size_t cols) {
  rows_ = rows;
  cols_ = cols;
  precision_ = PrecisionMode::Full32;
  if (data_.size() < rows * cols) data_.resize(rows * cols);
}

void Tensor::round_to(PrecisionMode mode) {
  if (mode == PrecisionMode::Reduced16 && precision_ != PrecisionMode::Reduced16) {
    for (float& v : values()) v = round_reduced(v);
  }
  precision_ = mode;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (rows_ != other.rows_ || cols_ != other.cols_) return false;
  return std::memcmp(data_.data(), other.data_.data(), size() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff shape mismatch");
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
  }
  return worst;
}

// ── Kernels ─────────────────────────────────────────────────────────────

namespace {

std::string shape_of(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

void round_view(MatrixView out) {
  for (std::size_t i = 0; i < out.rows; ++i) {
    float* row = out.row(i);
    for (std::size_t j = 0; j < out.cols; ++j) row[j] = round_reduced(row[j]);
  }
}

inline float maybe_round(float v, bool round) { return round ? round_reduced(v) : v; }

// Accumulation over k runs in index order for every output element, so the
// result matches a plain triple loop exactly. Zero entries of `a` are skipped;
// for finite operands that only drops additions of ±0.
void gemm_scalar(ConstMatrixView a, bool round_a, ConstMatrixView b, MatrixView c) {
  const std::size_t m = a.rows;
  const std::size_t k = a.cols;
  const std::size_t n = b.cols;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    float* __restrict c0 = c.row(i);
    float* __restrict c1 = c.row(i + 1);
    float* __restrict c2 = c.row(i + 2);
    float* __restrict c3 = c.row(i + 3);
    std::fill_n(c0, n, 0.0f);
    std::fill_n(c1, n, 0.0f);
    std::fill_n(c2, n, 0.0f);
    std::fill_n(c3, n, 0.0f);
    const float* a0 = a.row(i);
    const float* a1 = a.row(i + 1);
    const float* a2 = a.row(i + 2);
    const float* a3 = a.row(i + 3);
    for (std::size_t p = 0; p < k; ++p) {
      const float v0 = maybe_round(a0[p], round_a);
      const float v1 = maybe_round(a1[p], round_a);
      const float v2 = maybe_round(a2[p], round_a);
      const float v3 = maybe_round(a3[p], round_a);
      if (v0 == 0.0f && v1 == 0.0f && v2 == 0.0f && v3 == 0.0f) continue;
      const float* __restrict bp = b.row(p);
      for (std::size_t j = 0; j < n; ++j) {
        const float bv = bp[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    float* __restrict ci = c.row(i);
    std::fill_n(ci, n, 0.0f);
    const float* ai = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const float v = maybe_round(ai[p], round_a);
      if (v == 0.0f) continue;
      const float* __restrict bp = b.row(p);
      for (std::size_t j = 0; j < n; ++j) ci[j] += v * bp[j];
    }
  }
}


typedef float Vec16 __attribute__((vector_size(64)));
constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 64;  // four Vec16 per row

inline Vec16 load16(const float* p) {
  Vec16 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store16(float* p, Vec16 v) { std::memcpy(p, &v, sizeof v); }

constexpr std::size_t kKc = 256;  // k indices packed per chunk

// A 4-row slice of A restricted to the k indices where any row is nonzero,
// already rounded when the kernel rounds its left operand.
struct PackedRows {
  std::uint32_t index[kKc];
  float value[kKc][kMr];
  std::size_t count = 0;
};

void pack_rows(ConstMatrixView a, std::size_t i, std::size_t p0, std::size_t p1, bool round_a,
               PackedRows& out) {
  out.count = 0;
  const float* rows[kMr] = {a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)};
  for (std::size_t p = p0; p < p1; ++p) {
    float v[kMr];
    bool any = false;
    for (std::size_t r = 0; r < kMr; ++r) {
      v[r] = maybe_round(rows[r][p], round_a);
      any |= v[r] != 0.0f;
    }
    if (!any) continue;
    out.index[out.count] = static_cast<std::uint32_t>(p);
    std::copy_n(v, kMr, out.value[out.count]);
    ++out.count;
  }
}

// kMr x kNr block of C held in registers across one packed chunk. The first
// chunk starts from zero, later ones continue from what C holds.
void gemm_block(const PackedRows& a, ConstMatrixView b, std::size_t j0, bool first, float* c0,
                float* c1, float* c2, float* c3) {
  c0 += j0; c1 += j0; c2 += j0; c3 += j0;
  Vec16 x00{}, x01{}, x02{}, x03{}, x10{}, x11{}, x12{}, x13{};
  Vec16 x20{}, x21{}, x22{}, x23{}, x30{}, x31{}, x32{}, x33{};
  if (!first) {
    x00 = load16(c0); x01 = load16(c0 + 16); x02 = load16(c0 + 32); x03 = load16(c0 + 48);
    x10 = load16(c1); x11 = load16(c1 + 16); x12 = load16(c1 + 32); x13 = load16(c1 + 48);
    x20 = load16(c2); x21 = load16(c2 + 16); x22 = load16(c2 + 32); x23 = load16(c2 + 48);
    x30 = load16(c3); x31 = load16(c3 + 16); x32 = load16(c3 + 32); x33 = load16(c3 + 48);
  }
  for (std::size_t q = 0; q < a.count; ++q) {
    const float* bp = b.data + a.index[q] * b.stride + j0;
    const Vec16 b0 = load16(bp), b1 = load16(bp + 16), b2 = load16(bp + 32), b3 = load16(bp + 48);
    // Subtracting +0 broadcasts without flipping the sign of -0.
    const Vec16 w0 = a.value[q][0] - Vec16{}, w1 = a.value[q][1] - Vec16{};
    const Vec16 w2 = a.value[q][2] - Vec16{}, w3 = a.value[q][3] - Vec16{};
    x00 += w0 * b0; x01 += w0 * b1; x02 += w0 * b2; x03 += w0 * b3;
    x10 += w1 * b0; x11 += w1 * b1; x12 += w1 * b2; x13 += w1 * b3;
    x20 += w2 * b0; x21 += w2 * b1; x22 += w2 * b2; x23 += w2 * b3;
    x30 += w3 * b0; x31 += w3 * b1; x32 += w3 * b2; x33 += w3 * b3;
  }
  store16(c0, x00); store16(c0 + 16, x01); store16(c0 + 32, x02); store16(c0 + 48, x03);
  store16(c1, x10); store16(c1 + 16, x11); store16(c1 + 32, x12); store16(c1 + 48, x13);
  store16(c2, x20); store16(c2 + 16, x21); store16(c2 + 32, x22); store16(c2 + 48, x23);
  store16(c3, x30); store16(c3 + 16, x31); store16(c3 + 32, x32); store16(c3 + 48, x33);
}

void gemm_kernel(ConstMatrixView a, bool round_a, ConstMatrixView b, MatrixView c) {
  const std::size_t m = a.rows;
  const std::size_t k = a.cols;
  const std::size_t n = b.cols;
  const std::size_t m_full = m / kMr * kMr;
  const std::size_t n_full = n / kNr * kNr;
  if (n_full > 0) {
    PackedRows packed;
    for (std::size_t i = 0; i < m_full; i += kMr) {
      for (std::size_t p0 = 0; p0 < k || p0 == 0; p0 += kKc) {
        pack_rows(a, i, p0, std::min(k, p0 + kKc), round_a, packed);
        for (std::size_t j0 = 0; j0 < n_full; j0 += kNr) {
          gemm_block(packed, b, j0, p0 == 0, c.row(i), c.row(i + 1), c.row(i + 2), c.row(i + 3));
        }
      }
    }
    if (m_full < m) {
      gemm_scalar(a.row_block(m_full, m - m_full), round_a, b.col_block(0, n_full),
                  c.row_block(m_full, m - m_full).col_block(0, n_full));
    }
  }
  if (n_full < n) {
    gemm_scalar(a, round_a, b.col_block(n_full, n - n_full), c.col_block(n_full, n - n_full));
  }
}

}  // namespace

void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, PrecisionMode mode,
            FlopCounter* counter, std::string_view bucket_name) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul shape mismatch: " + shape_of(a.rows, a.cols) + " x " +
                     shape_of(b.rows, b.cols));
  }
  if (out.rows != a.rows || out.cols != b.cols) {
    throw ShapeError("matmul output shape " + shape_of(out.rows, out.cols) + ", expected " +
                     shape_of(a.rows, b.cols));
  }
  const bool reduced = mode == PrecisionMode::Reduced16;
  Tensor b_rounded;
  if (reduced && b.precision != PrecisionMode::Reduced16) {
    b_rounded.resize(b.rows, b.cols);
    for (std::size_t r = 0; r < b.rows; ++r) {
      for (std::size_t c = 0; c < b.cols; ++c) b_rounded(r, c) = round_reduced(b(r, c));
    }
    b_rounded.set_precision_tag(PrecisionMode::Reduced16);
    b = b_rounded.view();
  }
  gemm_kernel(a, reduced && a.precision != PrecisionMode::Reduced16, b, out);
  if (reduced) round_view(out);
  if (counter) counter->add(bucket_name, 2ull * a.rows * a.cols * b.cols);
}

void matmul_into(ConstMatrixView a, ConstMatrixView b, Tensor& out, PrecisionMode mode,
                 FlopCounter* counter, std::string_view bucket_name) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul shape mismatch: " + shape_of(a.rows, a.cols) + " x " +
                     shape_of(b.rows, b.cols));
  }
  out.resize(a.rows, b.cols);
  matmul(a, b, out.mutable_view(), mode, counter, bucket_name);
  out.set_precision_tag(mode);
}

Tensor matmul(const Tensor& a, const Tensor& b, PrecisionMode mode, FlopCounter& counter) {
  Tensor out;
  matmul_into(a.view(), b.view(), out, mode, &counter, bucket::kMatmul);
  return out;
}

namespace {

// Runs `f` over full fixed-size packets only, padding the tail, so an
// element's result never depends on where it sits in the buffer.
template <class F>
void packetwise(float* x, std::size_t n, F f) {
  constexpr std::size_t kLanes = 16;
  using Block = Eigen::Array<float, kLanes, 1>;
  alignas(64) float buf[kLanes];
  for (std::size_t i = 0; i < n; i += kLanes) {
    const std::size_t m = std::min(kLanes, n - i);
    std::copy_n(x + i, m, buf);
    std::fill(buf + m, buf + kLanes, 0.0f);
    Eigen::Map<Block, Eigen::Aligned64> a(buf);
    f(a);
    std::copy_n(buf, m, x + i);
  }
}

constexpr float kSqrt2OverPi = 0.7978845608028654f;

void gelu_block(float* x, std::size_t n) {
  packetwise(x, n, [](auto& a) {
    a = 0.5f * a * (1.0f + (kSqrt2OverPi * (a + 0.044715f * a * a * a)).tanh());
  });
}

}  // namespace

void exp_shifted_inplace(float* x, std::size_t n, float shift) {
  packetwise(x, n, [shift](auto& a) { a = (a - shift).exp(); });
}

void softmax_row_inplace(std::span<float> row) {
  float peak = -std::numeric_limits<float>::infinity();
  for (float v : row) peak = std::max(peak, v);
  exp_shifted_inplace(row.data(), row.size(), peak);
  float sum = 0.0f;
  for (float v : row) sum += v;
  for (float& v : row) v /= sum;
}

Tensor softmax_rows(const Tensor& a, PrecisionMode mode, FlopCounter* counter) {
  if (a.empty()) throw ShapeError("softmax_rows needs a nonempty tensor");
  Tensor out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r));
  out.set_precision_tag(PrecisionMode::Full32);
  out.round_to(mode);
  if (counter) counter->add(bucket::kAttention, kSoftmaxFlopsPerElement * a.size());
  return out;
}

void layer_norm_into(ConstMatrixView x, const Tensor& gain, const Tensor& bias, Tensor& out,
                     PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name,
                     float eps) {
  if (gain.size() != x.cols || bias.size() != x.cols) {
    throw ShapeError("layer_norm parameter width " + std::to_string(gain.size()) +
                     " does not match input width " + std::to_string(x.cols));
  }
  out.resize(x.rows, x.cols);
  const bool reduced = mode == PrecisionMode::Reduced16;
  const auto g = gain.values();
  const auto b = bias.values();
  const float inv_n = 1.0f / static_cast<float>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const float* in = x.row(r);
    float* dst = out.row(r).data();
    float mean = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c) mean += in[c];
    mean *= inv_n;
    float var = 0.0f;
    for (std::size_t c = 0; c < x.cols; ++c) {
      const float d = in[c] - mean;
      var += d * d;
    }
    var *= inv_n;
    const float inv_std = 1.0f / std::sqrt(var + eps);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const float v = (in[c] - mean) * inv_std * g[c] + b[c];
      dst[c] = reduced ? round_reduced(v) : v;
    }
  }
  out.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, kNormFlopsPerElement * x.rows * x.cols);
}

void add_row_bias(Tensor& x, const Tensor& bias, PrecisionMode mode, FlopCounter* counter,
                  std::string_view bucket_name) {
  if (bias.size() != x.cols()) throw ShapeError("bias width does not match tensor width");
  const bool reduced = mode == PrecisionMode::Reduced16;
  const auto b = bias.values();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const float v = row[c] + maybe_round(b[c], reduced);
      row[c] = reduced ? round_reduced(v) : v;
    }
  }
  x.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, x.size());
}

void add_inplace(Tensor& x, ConstMatrixView y, PrecisionMode mode, FlopCounter* counter,
                 std::string_view bucket_name) {
  if (y.rows != x.rows() || y.cols != x.cols()) {
    throw ShapeError("add shape mismatch: " + shape_of(x.rows(), x.cols()) + " + " +
                     shape_of(y.rows, y.cols));
  }
  const bool reduced = mode == PrecisionMode::Reduced16;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const float* other = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const float v = maybe_round(row[c], reduced) + maybe_round(other[c], reduced);
      row[c] = reduced ? round_reduced(v) : v;
    }
  }
  x.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, x.size());
}

float gelu(float x) noexcept {
  gelu_block(&x, 1);
  return x;
}

void gelu_inplace(Tensor& x, PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name) {
  const bool reduced = mode == PrecisionMode::Reduced16;
  gelu_block(x.values().data(), x.size());
  if (reduced) {
    for (float& v : x.values()) v = round_reduced(v);
  }
  x.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, x.size());
}

void relu_inplace(Tensor& x, PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name) {
  const bool reduced = mode == PrecisionMode::Reduced16;
  for (float& v : x.values()) v = reduced ? round_reduced(std::max(v, 0.0f)) : std::max(v, 0.0f);
  x.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, x.size());
}

void mean_rows_into(ConstMatrixView x, Tensor& out, PrecisionMode mode, FlopCounter* counter,
                    std::string_view bucket_name) {
  if (x.rows == 0) throw ShapeError("mean over zero rows");
  out.resize(1, x.cols);
  auto dst = out.row(0);
  std::fill(dst.begin(), dst.end(), 0.0f);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const float* src = x.row(r);
    for (std::size_t c = 0; c < x.cols; ++c) dst[c] += src[c];
  }
  const float inv = 1.0f / static_cast<float>(x.rows);
  const bool reduced = mode == PrecisionMode::Reduced16;
  for (float& v : dst) v = reduced ? round_reduced(v * inv) : v * inv;
  out.set_precision_tag(mode);
  if (counter) counter->add(bucket_name, x.rows * x.cols);
}

}  // namespace deskvla
