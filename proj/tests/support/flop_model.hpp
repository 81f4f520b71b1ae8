// Closed-form per-step FLOP count, from the counting conventions alone:
// matmul 2·m·k·n, softmax and norm 5 per element, other elementwise ops 1 per
// element, rounding free.

#pragma once

#include <cstdint>

#include "deskvla/backbone.hpp"
#include "deskvla/config.hpp"

namespace deskvla::testing {

struct FlopModel {
  ModelDims dims;
  bool target_parametrization = false;  // AnalyticReach heads convert f to a velocity

  using u64 = std::uint64_t;

  u64 observation() const {
    const u64 d = dims.d_model, n = dims.image_tokens(), pd = dims.patch_dim, sd = dims.state_dim;
    const u64 image = 2 * n * pd * d + n * d + n * d + 2 * n * d * d;
    const u64 state = 2 * sd * d + d + d + 2 * d * d;
    return image + state + dims.L_v * d /*b2*/ + dims.L_v * d /*positions*/;
  }

  u64 instruction() const { return dims.L_p * dims.d_model * (1 + 5); }

  // One projection of `rows` rows by a d×d matrix.
  u64 projection(u64 rows) const { return 2 * rows * dims.d_model * dims.d_model; }

  u64 attention(u64 lq, u64 lk) const {
    const u64 scores = lq * lk * dims.n_heads;
    return 2 * lq * lk * dims.d_model + scores + 5 * scores + 2 * lq * lk * dims.d_model;
  }

  u64 layer(bool cached) const {
    const u64 d = dims.d_model, lv = dims.L_v, lp = dims.L_p, dm = dims.d_mlp();
    const u64 kv_rows = cached ? lv : lp + lv;
    return 5 * lv * d                          // ln1
           + projection(lv)                    // q
           + 2 * projection(kv_rows)           // k, v
           + attention(lv, lp + lv)            //
           + projection(lv) + lv * d           // o, residual
           + 5 * lv * d                        // ln2
           + 2 * lv * d * dm + lv * dm + lv * dm  // mlp1, bias, gelu
           + 2 * lv * dm * d + lv * d          // mlp2, bias
           + lv * d;                           // residual
  }

  u64 flow_evaluation() const {
    const u64 n = dims.L_v, d = dims.d_model, a = dims.d_action, w = dims.flow_width;
    u64 f = 2 * n * (d + a + 1) * w + 2 * n * w;  // input layer, bias, relu
    f += dims.flow_depth * (2 * n * w * w + 2 * n * w);
    f += 2 * n * w * a + n * a;  // output layer, bias
    f += n * a + n * d;          // pool token outputs, pool hidden
    f += 2 * (d + a) * a + a;    // skip layer, bias
    f += a;                      // token + skip
    if (target_parametrization) f += 2 * a;
    f += 2 * a;                  // Euler update
    return f;
  }

  u64 step(const ControllerConfig& c) const {
    u64 total = observation();
    if (!c.use_prefix_cache) total += instruction();
    total += dims.n_layers * layer(c.use_prefix_cache);
    total += c.flow_steps * flow_evaluation();
    return total;
  }

  /// Episode setup with the cache on: instruction encode plus K/V of P.
  u64 cache_setup() const { return instruction() + dims.n_layers * 2 * projection(dims.L_p); }
};

}  // namespace deskvla::testing
