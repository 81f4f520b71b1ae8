// SPDX-License-Identifier: Apache-2.0

#include "deskvla/bridge/protocol.hpp"

#include <algorithm>
#include <numeric>

namespace deskvla::bridge {

namespace {

constexpr std::pair<MessageKind, std::string_view> kKinds[] = {
    {MessageKind::Hello, "Hello"},         {MessageKind::ConfigSet, "ConfigSet"},
    {MessageKind::ConfigAck, "ConfigAck"}, {MessageKind::Frame, "Frame"},
    {MessageKind::Metrics, "Metrics"},     {MessageKind::EpisodeEnd, "EpisodeEnd"},
    {MessageKind::Error, "Error"},
};

bool require_bool(const json& value, const std::string& field) {
  if (!value.is_boolean()) throw ProtocolError(field + " must be a boolean", field);
  return value.get<bool>();
}

std::size_t require_count(const json& value, const std::string& field) {
  if (!value.is_number_integer() || value.get<std::int64_t>() < 1) {
    throw ProtocolError(field + " must be an integer >= 1", field);
  }
  return value.get<std::size_t>();
}

}  // namespace

std::string_view to_string(MessageKind kind) {
  for (const auto& [k, name] : kKinds) {
    if (k == kind) return name;
  }
  return "Error";
}

std::optional<MessageKind> parse_kind(std::string_view text) {
  for (const auto& [k, name] : kKinds) {
    if (name == text) return k;
  }
  return std::nullopt;
}

std::string WireMessage::serialize() const {
  json j{{"kind", to_string(kind)}, {"payload", payload}};
  if (config_version) j["config_version"] = *config_version;
  return j.dump();
}

WireMessage WireMessage::parse(std::string_view text) {
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ProtocolError("message is not valid JSON");
  if (!j.is_object()) throw ProtocolError("message must be a JSON object");
  if (!j.contains("kind") || !j["kind"].is_string()) {
    throw ProtocolError("missing string field 'kind'", "kind");
  }
  const auto kind = parse_kind(j["kind"].get<std::string>());
  if (!kind) throw ProtocolError("unknown kind '" + j["kind"].get<std::string>() + "'", "kind");
  WireMessage msg;
  msg.kind = *kind;
  if (j.contains("config_version") && !j["config_version"].is_null()) {
    if (!j["config_version"].is_number_integer()) {
      throw ProtocolError("config_version must be an integer", "config_version");
    }
    msg.config_version = j["config_version"].get<std::int64_t>();
  }
  if (j.contains("payload")) {
    if (!j["payload"].is_object()) throw ProtocolError("payload must be an object", "payload");
    msg.payload = j["payload"];
  }
  return msg;
}

json config_to_json(const ControllerConfig& c) {
  return {
      {"use_reduced_precision", c.use_reduced_precision},
      {"use_prefix_cache", c.use_prefix_cache},
      {"attention_kernel", to_string(c.attention_kernel)},
      {"flow_steps", c.flow_steps},
      {"compiled", c.compiled},
      {"rollout_horizon", c.rollout_horizon},
  };
}

ControllerConfig apply_config_patch(ControllerConfig base, const json& payload) {
  if (!payload.is_object()) throw ProtocolError("payload must be an object", "payload");
  if (payload.contains("preset")) {
    const json& p = payload["preset"];
    if (!p.is_string()) throw ProtocolError("preset must be a string", "preset");
    try {
      base = preset(p.get<std::string>());
    } catch (const UnknownPresetError& e) {
      throw ProtocolError(e.what(), "preset");
    }
  }
  for (const auto& [key, value] : payload.items()) {
    if (key == "preset") continue;
    if (key == "use_reduced_precision") {
      base.use_reduced_precision = require_bool(value, key);
    } else if (key == "use_prefix_cache") {
      base.use_prefix_cache = require_bool(value, key);
    } else if (key == "compiled") {
      base.compiled = require_bool(value, key);
    } else if (key == "flow_steps") {
      base.flow_steps = require_count(value, key);
    } else if (key == "rollout_horizon") {
      base.rollout_horizon = require_count(value, key);
    } else if (key == "attention_kernel") {
      try {
        if (value.is_string()) {
          base.attention_kernel = parse_attention_kernel(value.get<std::string>());
        } else if (value.is_object() && value.contains("kind") && value["kind"].is_string()) {
          const std::string kind = value["kind"].get<std::string>();
          if (kind == "naive") {
            base.attention_kernel = AttentionKernel::naive();
          } else if (kind == "streaming") {
            const std::size_t tile =
                value.contains("tile") ? require_count(value["tile"], key) : std::size_t{8};
            base.attention_kernel = AttentionKernel::streaming(tile);
          } else {
            throw ConfigError("unknown attention kernel '" + kind + "'");
          }
        } else {
          throw ConfigError("attention_kernel must be a string or {kind, tile}");
        }
      } catch (const ConfigError& e) {
        throw ProtocolError(e.what(), key);
      }
    } else {
      throw ProtocolError("unsupported config field '" + key + "'", key);
    }
  }
  return base;
}

WireMessage make_error(std::int64_t config_version, const std::string& message,
                       const std::string& field) {
  WireMessage msg;
  msg.kind = MessageKind::Error;
  msg.config_version = config_version;
  msg.payload = {{"message", message}};
  if (!field.empty()) msg.payload["field"] = field;
  return msg;
}

std::optional<WireMessage> MetricsAggregator::add(const Key& key, std::uint64_t episode,
                                                  std::uint64_t tick, const StepMetrics& metrics) {
  std::optional<WireMessage> out;
  if (count_ > 0 && !(key == key_)) out = flush();
  if (count_ == 0) {
    key_ = key;
    first_tick_ = tick;
  }
  episode_ = episode;
  last_tick_ = tick;
  ++count_;
  latencies_ms_.push_back(metrics.latency_ms());
  flops_ += metrics.flops.total();
  breakdown_.merge(metrics.flops);
  peak_bytes_ = std::max(peak_bytes_, metrics.peak_bytes);
  return out;
}

std::optional<WireMessage> MetricsAggregator::flush() {
  if (count_ == 0) return std::nullopt;
  const double total_ms = std::accumulate(latencies_ms_.begin(), latencies_ms_.end(), 0.0);
  const double mean_ms = total_ms / static_cast<double>(count_);
  const double max_ms = *std::max_element(latencies_ms_.begin(), latencies_ms_.end());
  const double median_ms = median(latencies_ms_);
  const std::uint64_t per_step = flops_ / count_;

  json breakdown = json::object();
  for (const auto& [name, value] : breakdown_.breakdown()) breakdown[name] = value / count_;

  WireMessage msg;
  msg.kind = MessageKind::Metrics;
  msg.config_version = key_.config_version;
  msg.payload = {
      {"warmup", key_.warmup},
      {"episode", episode_},
      {"first_step", first_tick_},
      {"last_step", last_tick_},
      {"count", count_},
      {"latency_ms", {{"median", median_ms}, {"mean", mean_ms}, {"max", max_ms}}},
      {"flops", per_step},
      {"breakdown", breakdown},
      {"peak_bytes", peak_bytes_},
      {"gflops", total_ms > 0.0 ? static_cast<double>(flops_) / (total_ms * 1e6) : 0.0},
  };
  count_ = 0;
  latencies_ms_.clear();
  flops_ = 0;
  breakdown_.reset();
  peak_bytes_ = 0;
  return msg;
}

WireMessage make_frame(std::int64_t config_version, const FrameState& f) {
  json trail = json::array();
  for (const Vec2& p : f.trail) trail.push_back({p[0], p[1]});
  WireMessage msg;
  msg.kind = MessageKind::Frame;
  msg.config_version = config_version;
  msg.payload = {
      {"episode", f.episode},
      {"tick", f.tick},
      {"step", f.step},
      {"warmup", f.warmup},
      {"agent", {f.env.position[0], f.env.position[1]}},
      {"velocity", {f.env.velocity[0], f.env.velocity[1]}},
      {"goal", {f.env.goal[0], f.env.goal[1]}},
      {"gripper", f.env.gripper},
      {"action", f.action},
      {"trail", trail},
  };
  return msg;
}

}  // namespace deskvla::bridge
