// SPDX-License-Identifier: Apache-2.0
//
// Live bridge: runs the control loop on its own thread and streams Frame /
// Metrics / EpisodeEnd messages to every websocket client on /ws. Clients
// send ConfigSet to switch the controller at the next step boundary.

#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>

#include "deskvla/backbone.hpp"
#include "deskvla/bridge/protocol.hpp"
#include "deskvla/config.hpp"
#include "deskvla/envsim.hpp"

namespace deskvla::bridge {

class PortInUseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServerOptions {
  std::string address = "127.0.0.1";
  std::uint16_t port = 8765;  // 0 picks an ephemeral port
  TaskKind task = TaskKind::Reach;
  std::uint64_t seed = 7;
  ControllerConfig initial = preset("blurr");
  double metrics_hz = 30.0;      // upper bound on Metrics messages per second
  double step_rate_hz = 0.0;     // 0 runs the loop as fast as it goes
  std::size_t queue_limit = 256; // per-client outbound backlog
  std::size_t trail_length = 64;
  std::size_t warmup_steps = kWarmupSteps;
};

class BridgeServer {
 public:
  BridgeServer(std::shared_ptr<const FrozenWeights> weights, ServerOptions options);
  ~BridgeServer();
  BridgeServer(const BridgeServer&) = delete;
  BridgeServer& operator=(const BridgeServer&) = delete;

  /// Binds and starts both threads. Throws PortInUseError if the port is taken.
  void start();
  /// Idempotent; joins both threads.
  void stop();
  /// Blocks until stop() or SIGINT/SIGTERM (when `handle_signals`).
  void wait(bool handle_signals = false);

  std::uint16_t port() const;
  std::uint64_t ticks() const;
  std::int64_t config_version() const;
  std::size_t client_count() const;

  struct Impl;  // defined in server.cpp

 private:
  std::unique_ptr<Impl> impl_;
};

}  // namespace deskvla::bridge
