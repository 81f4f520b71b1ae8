// SPDX-License-Identifier: Apache-2.0
//
// Dense fp32 tensors with emulated bfloat16 execution, FLOP accounting and
// transient-allocation tracking. Everything above this layer (attention,
// decoder, flow head) is built from these kernels.

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deskvla {

enum class PrecisionMode : std::uint8_t { Full32, Reduced16 };

std::string_view to_string(PrecisionMode mode);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Nearest bfloat16 value (8 exponent bits, 7 mantissa bits), round to
/// nearest even on the discarded 16 bits. NaN stays NaN, infinities stay.
/// Branch-free so kernel loops vectorize.
inline float round_reduced(float x) noexcept {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t rounded = (bits + 0x7FFFu + ((bits >> 16) & 1u)) & 0xFFFF0000u;
  const std::uint32_t quiet_nan = (bits | 0x00400000u) & 0xFFFF0000u;
  return std::bit_cast<float>((bits & 0x7FFFFFFFu) > 0x7F800000u ? quiet_nan : rounded);
}

// ── FLOP accounting ─────────────────────────────────────────────────────

namespace bucket {
inline constexpr std::string_view kEncode = "encode";
inline constexpr std::string_view kNorm = "norm";
inline constexpr std::string_view kProjection = "projection";
inline constexpr std::string_view kAttention = "attention";
inline constexpr std::string_view kResidual = "residual";
inline constexpr std::string_view kMlp = "mlp";
inline constexpr std::string_view kFlow = "flow";
inline constexpr std::string_view kSetup = "setup";
inline constexpr std::string_view kMatmul = "matmul";
inline constexpr std::string_view kElementwise = "elementwise";
}  // namespace bucket

// Conventions: multiply-add = 2, softmax and normalization = 5 per element,
// every other elementwise op = 1 per element, format rounding = 0.
inline constexpr std::uint64_t kSoftmaxFlopsPerElement = 5;
inline constexpr std::uint64_t kNormFlopsPerElement = 5;

class FlopCounter {
 public:
  void add(std::string_view bucket_name, std::uint64_t flops);
  void merge(const FlopCounter& other);
  void reset() noexcept;

  std::uint64_t total() const noexcept { return total_; }
  std::uint64_t bucket(std::string_view bucket_name) const;
  const std::map<std::string, std::uint64_t, std::less<>>& breakdown() const noexcept {
    return breakdown_;
  }

  friend bool operator==(const FlopCounter&, const FlopCounter&) = default;

 private:
  std::uint64_t total_ = 0;
  std::map<std::string, std::uint64_t, std::less<>> breakdown_;
};

// ── Allocation tracking ─────────────────────────────────────────────────

/// High-water mark of live tensor bytes while installed on a thread.
class AllocationTracker {
 public:
  void reset(std::int64_t resident_bytes = 0) noexcept;
  void on_allocate(std::size_t bytes) noexcept;
  void on_release(std::size_t bytes) noexcept;

  std::int64_t current() const noexcept { return current_; }
  std::int64_t peak() const noexcept { return peak_; }
  std::int64_t largest_allocation() const noexcept { return largest_; }

 private:
  std::int64_t current_ = 0;
  std::int64_t peak_ = 0;
  std::int64_t largest_ = 0;
};

AllocationTracker* active_tracker() noexcept;

/// Installs `tracker` for the current thread for the lifetime of the scope.
class TrackingScope {
 public:
  explicit TrackingScope(AllocationTracker& tracker) noexcept;
  ~TrackingScope();
  TrackingScope(const TrackingScope&) = delete;
  TrackingScope& operator=(const TrackingScope&) = delete;

 private:
  AllocationTracker* previous_;
};

template <class T>
struct TrackedAllocator {
  using value_type = T;

  TrackedAllocator() noexcept = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    if (auto* tracker = active_tracker()) tracker->on_allocate(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    if (auto* tracker = active_tracker()) tracker->on_release(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

// ── Tensors and views ───────────────────────────────────────────────────

struct ConstMatrixView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;
  PrecisionMode precision = PrecisionMode::Full32;

  float operator()(std::size_t r, std::size_t c) const { return data[r * stride + c]; }
  const float* row(std::size_t r) const { return data + r * stride; }
  ConstMatrixView row_block(std::size_t begin, std::size_t count) const;
  ConstMatrixView col_block(std::size_t begin, std::size_t count) const;
};

struct MatrixView {
  float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  float& operator()(std::size_t r, std::size_t c) const { return data[r * stride + c]; }
  float* row(std::size_t r) const { return data + r * stride; }
  MatrixView row_block(std::size_t begin, std::size_t count) const;
  MatrixView col_block(std::size_t begin, std::size_t count) const;
};

/// Row-major 2-D fp32 array. When the precision tag is Reduced16 every
/// element is exactly representable in bfloat16.
class Tensor {
 public:
  using Storage = std::vector<float, TrackedAllocator<float>>;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, PrecisionMode precision = PrecisionMode::Full32);

  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor from_values(std::size_t rows, std::size_t cols, std::span<const float> values);
  static Tensor identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return rows_ * cols_; }
  bool empty() const noexcept { return size() == 0; }
  PrecisionMode precision() const noexcept { return precision_; }
  std::size_t bytes() const noexcept { return data_.capacity() * sizeof(float); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> values() noexcept { return {data_.data(), size()}; }
  std::span<const float> values() const noexcept { return {data_.data(), size()}; }
  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  ConstMatrixView view() const noexcept { return {data_.data(), rows_, cols_, cols_, precision_}; }
  MatrixView mutable_view() noexcept { return {data_.data(), rows_, cols_, cols_}; }
  ConstMatrixView rows_view(std::size_t begin, std::size_t count) const;
  operator ConstMatrixView() const noexcept { return view(); }  // NOLINT

  /// Reshape in place; keeps capacity so reuse across steps does not allocate.
  /// New contents are unspecified. The tag resets to Full32.
  void resize(std::size_t rows, std::size_t cols);

  /// Rounds every element under `mode` and tags the tensor accordingly.
  void round_to(PrecisionMode mode);
  /// Caller guarantees the invariant for Reduced16.
  void set_precision_tag(PrecisionMode mode) noexcept { precision_ = mode; }

  bool bit_equal(const Tensor& other) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  PrecisionMode precision_ = PrecisionMode::Full32;
  Storage data_;
};

float max_abs_diff(const Tensor& a, const Tensor& b);

// ── Kernels ─────────────────────────────────────────────────────────────
//
// All kernels follow the mixed-precision contract under Reduced16: operands
// are rounded to bfloat16 before use, accumulation is fp32, and the result is
// rounded once. Passing a null counter skips FLOP accounting.

/// out = a · b. `out` must already have shape (a.rows, b.cols).
void matmul(ConstMatrixView a, ConstMatrixView b, MatrixView out, PrecisionMode mode,
            FlopCounter* counter, std::string_view bucket_name = bucket::kMatmul);

void matmul_into(ConstMatrixView a, ConstMatrixView b, Tensor& out, PrecisionMode mode,
                 FlopCounter* counter, std::string_view bucket_name = bucket::kMatmul);

Tensor matmul(const Tensor& a, const Tensor& b, PrecisionMode mode, FlopCounter& counter);

Tensor softmax_rows(const Tensor& a, PrecisionMode mode = PrecisionMode::Full32,
                    FlopCounter* counter = nullptr);

/// Softmax of one row in place (max-subtracted). No FLOP accounting.
void softmax_row_inplace(std::span<float> row);

/// x[i] = exp(x[i] - shift). Vectorized; each result depends only on its
/// input, never on position or alignment. No FLOP accounting.
void exp_shifted_inplace(float* x, std::size_t n, float shift);

void layer_norm_into(ConstMatrixView x, const Tensor& gain, const Tensor& bias, Tensor& out,
                     PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name,
                     float eps = 1e-5f);

/// x[r] += bias[0] for every row.
void add_row_bias(Tensor& x, const Tensor& bias, PrecisionMode mode, FlopCounter* counter,
                  std::string_view bucket_name);
/// x += y.
void add_inplace(Tensor& x, ConstMatrixView y, PrecisionMode mode, FlopCounter* counter,
                 std::string_view bucket_name);
void gelu_inplace(Tensor& x, PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name);
void relu_inplace(Tensor& x, PrecisionMode mode, FlopCounter* counter, std::string_view bucket_name);

/// Column means over all rows, written into `out` (1 × cols). Charged rows·cols.
void mean_rows_into(ConstMatrixView x, Tensor& out, PrecisionMode mode, FlopCounter* counter,
                    std::string_view bucket_name);

float gelu(float x) noexcept;

}  // namespace deskvla
