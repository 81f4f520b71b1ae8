// SPDX-License-Identifier: Apache-2.0
//
// Wire schema of the live bridge: JSON text messages
//   {"kind": ..., "config_version": N, "payload": {...}}
// plus the metrics aggregation that throttles what the control loop emits.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deskvla/config.hpp"
#include "deskvla/envsim.hpp"
#include "deskvla/profiler.hpp"

namespace deskvla::bridge {

using json = nlohmann::json;

enum class MessageKind { Hello, ConfigSet, ConfigAck, Frame, Metrics, EpisodeEnd, Error };

std::string_view to_string(MessageKind kind);
std::optional<MessageKind> parse_kind(std::string_view text);

/// Malformed or unsupported client input; `field` names the offending key
/// when there is one.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(const std::string& message, std::string field = {})
      : std::runtime_error(message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct WireMessage {
  MessageKind kind = MessageKind::Hello;
  std::optional<std::int64_t> config_version;  // required on server messages
  json payload = json::object();

  std::string serialize() const;
  /// Throws ProtocolError on bad JSON, unknown kind or wrong field types.
  static WireMessage parse(std::string_view text);
};

json config_to_json(const ControllerConfig& config);

/// Applies a ConfigSet payload to `base`. Accepts "preset" (applied first)
/// and any ControllerConfig field name; attention_kernel also accepts
/// {"kind": "streaming", "tile": 8}. Throws ProtocolError naming the field.
ControllerConfig apply_config_patch(ControllerConfig base, const json& payload);

WireMessage make_error(std::int64_t config_version, const std::string& message,
                       const std::string& field = {});

/// Collects per-step metrics under one (config_version, warmup) key. A
/// change of key forces the pending batch out first, so no Metrics message
/// ever spans two versions.
class MetricsAggregator {
 public:
  struct Key {
    std::int64_t config_version = 0;
    bool warmup = false;
    friend bool operator==(const Key&, const Key&) = default;
  };

  /// Returns a message for the previous batch when `key` differs from it.
  std::optional<WireMessage> add(const Key& key, std::uint64_t episode, std::uint64_t tick,
                                 const StepMetrics& metrics);
  std::optional<WireMessage> flush();
  bool empty() const { return count_ == 0; }
  std::size_t count() const { return count_; }

 private:
  Key key_;
  std::uint64_t episode_ = 0;
  std::uint64_t first_tick_ = 0;
  std::uint64_t last_tick_ = 0;
  std::size_t count_ = 0;
  std::vector<double> latencies_ms_;
  std::uint64_t flops_ = 0;
  FlopCounter breakdown_;
  std::int64_t peak_bytes_ = 0;
};

struct FrameState {
  std::uint64_t episode = 0;
  std::uint64_t tick = 0;
  std::size_t step = 0;
  bool warmup = false;
  EnvState env;
  std::vector<float> action;
  std::vector<Vec2> trail;
};

WireMessage make_frame(std::int64_t config_version, const FrameState& frame);

}  // namespace deskvla::bridge
