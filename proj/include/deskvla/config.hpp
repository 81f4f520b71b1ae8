// SPDX-License-Identifier: Apache-2.0
//
// The controller's inference knobs, named presets and the flat key=value
// text form used by config files and reports.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deskvla/attention.hpp"
#include "deskvla/numerics.hpp"

namespace deskvla {

struct ControllerConfig {
  bool use_reduced_precision = false;
  bool use_prefix_cache = false;
  AttentionKernel attention_kernel = AttentionKernel::naive();
  std::size_t flow_steps = 10;
  bool compiled = false;
  std::size_t rollout_horizon = 1;

  PrecisionMode precision() const {
    return use_reduced_precision ? PrecisionMode::Reduced16 : PrecisionMode::Full32;
  }
  /// Throws ConfigError naming the field.
  void validate() const;

  friend bool operator==(const ControllerConfig&, const ControllerConfig&) = default;
};

class UnknownPresetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// baseline, interleave, blurr, cache-only, reduced-only (case-insensitive).
ControllerConfig preset(std::string_view name);
std::vector<std::string> preset_names();

struct NamedConfig {
  std::string name;
  ControllerConfig config;
};

/// Interleave, then one optimization switched on per rung, ending at blurr.
std::vector<NamedConfig> ablation_ladder();

/// One "key=value" per line, keys exactly the field names.
std::string to_kv(const ControllerConfig& config);
/// Single-line form joined with spaces, for report headers and logs.
std::string to_kv_line(const ControllerConfig& config);
/// Parses whitespace- or newline-separated key=value items; '#' starts a
/// comment. Missing keys keep their defaults. Throws ConfigError naming the
/// bad key or value.
ControllerConfig parse_kv(std::string_view text);
/// Applies a single key/value to `config`. Throws ConfigError.
void set_field(ControllerConfig& config, std::string_view key, std::string_view value);

}  // namespace deskvla
