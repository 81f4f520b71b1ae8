// SPDX-License-Identifier: Apache-2.0

#include "deskvla/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

namespace deskvla {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool parse_bool(std::string_view key, std::string_view value) {
  const std::string v = lower(value);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

std::size_t parse_count(std::string_view key, std::string_view value) {
  std::size_t n = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), n);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(std::string(key) + ": expected a positive integer, got '" +
                      std::string(value) + "'");
  }
  return n;
}

const char* flag(bool b) { return b ? "true" : "false"; }

}  // namespace

void ControllerConfig::validate() const {
  if (flow_steps < 1) throw ConfigError("flow_steps: must be at least 1");
  if (rollout_horizon < 1) throw ConfigError("rollout_horizon: must be at least 1");
  if (attention_kernel.kind == AttentionKind::Streaming && attention_kernel.tile < 1) {
    throw ConfigError("attention_kernel: streaming tile must be at least 1");
  }
}

ControllerConfig preset(std::string_view name) {
  const std::string n = lower(name);
  ControllerConfig c;
  if (n == "baseline") return c;
  if (n == "interleave") {
    c.rollout_horizon = 10;
    return c;
  }
  if (n == "blurr") {
    c.use_reduced_precision = true;
    c.use_prefix_cache = true;
    c.attention_kernel = AttentionKernel::streaming(8);
    c.flow_steps = 1;
    c.compiled = true;
    return c;
  }
  if (n == "cache-only") {
    c.use_prefix_cache = true;
    return c;
  }
  if (n == "reduced-only") {
    c.use_reduced_precision = true;
    return c;
  }
  throw UnknownPresetError("unknown preset '" + std::string(name) +
                           "' (known: baseline, interleave, blurr, cache-only, reduced-only)");
}

std::vector<std::string> preset_names() {
  return {"baseline", "interleave", "blurr", "cache-only", "reduced-only"};
}

std::vector<NamedConfig> ablation_ladder() {
  std::vector<NamedConfig> rungs;
  ControllerConfig c = preset("interleave");
  rungs.push_back({"interleave", c});
  c.use_reduced_precision = true;
  rungs.push_back({"+reduced", c});
  c.flow_steps = 6;
  rungs.push_back({"+flow6", c});
  c.flow_steps = 4;
  rungs.push_back({"+flow4", c});
  c.use_prefix_cache = true;
  rungs.push_back({"+cache", c});
  c.attention_kernel = AttentionKernel::streaming(8);
  rungs.push_back({"+streaming", c});
  rungs.push_back({"blurr", preset("blurr")});
  return rungs;
}

std::string to_kv(const ControllerConfig& c) {
  std::ostringstream out;
  out << "use_reduced_precision=" << flag(c.use_reduced_precision) << '\n'
      << "use_prefix_cache=" << flag(c.use_prefix_cache) << '\n'
      << "attention_kernel=" << to_string(c.attention_kernel) << '\n'
      << "flow_steps=" << c.flow_steps << '\n'
      << "compiled=" << flag(c.compiled) << '\n'
      << "rollout_horizon=" << c.rollout_horizon << '\n';
  return out.str();
}

std::string to_kv_line(const ControllerConfig& config) {
  std::string s = to_kv(config);
  std::replace(s.begin(), s.end(), '\n', ' ');
  return std::string(trim(s));
}

void set_field(ControllerConfig& c, std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  if (key == "use_reduced_precision") {
    c.use_reduced_precision = parse_bool(key, value);
  } else if (key == "use_prefix_cache") {
    c.use_prefix_cache = parse_bool(key, value);
  } else if (key == "attention_kernel") {
    try {
      c.attention_kernel = parse_attention_kernel(value);
    } catch (const ConfigError& e) {
      throw ConfigError("attention_kernel: " + std::string(e.what()));
    }
  } else if (key == "flow_steps") {
    c.flow_steps = parse_count(key, value);
    if (c.flow_steps < 1) throw ConfigError("flow_steps: must be at least 1");
  } else if (key == "compiled") {
    c.compiled = parse_bool(key, value);
  } else if (key == "rollout_horizon") {
    c.rollout_horizon = parse_count(key, value);
    if (c.rollout_horizon < 1) throw ConfigError("rollout_horizon: must be at least 1");
  } else {
    throw ConfigError(std::string(key) + ": unknown config key");
  }
}

ControllerConfig parse_kv(std::string_view text) {
  ControllerConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream words(line);
    std::string item;
    while (words >> item) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError(item + ": expected key=value");
      set_field(c, std::string_view(item).substr(0, eq), std::string_view(item).substr(eq + 1));
    }
  }
  c.validate();
  return c;
}

}  // namespace deskvla
