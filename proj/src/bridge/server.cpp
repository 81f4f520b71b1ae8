// SPDX-License-Identifier: Apache-2.0

#include "deskvla/bridge/server.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <deque>
#include <future>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "deskvla/controller.hpp"

namespace deskvla::bridge {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;
using Clock = std::chrono::steady_clock;

namespace {

std::atomic<bool> g_signalled{false};

extern "C" void on_signal(int) { g_signalled.store(true); }

// At most `limit` events in any trailing one-second window.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second)
      : limit_(std::max<std::size_t>(1, static_cast<std::size_t>(per_second))) {}

  bool allow(Clock::time_point now) {
    while (!sent_.empty() && now - sent_.front() >= std::chrono::seconds(1)) sent_.pop_front();
    if (sent_.size() >= limit_) return false;
    sent_.push_back(now);
    return true;
  }

 private:
  std::size_t limit_;
  std::deque<Clock::time_point> sent_;
};

}  // namespace

class WsSession;

struct BridgeServer::Impl {
  struct Pending {
    json payload;
    std::optional<std::int64_t> requested_version;
    std::weak_ptr<WsSession> origin;
  };

  Impl(std::shared_ptr<const FrozenWeights> w, ServerOptions o)
      : weights(std::move(w)), options(std::move(o)), snapshot(options.initial) {}

  std::shared_ptr<const FrozenWeights> weights;
  ServerOptions options;

  net::io_context ioc;
  std::optional<tcp::acceptor> acceptor;
  std::thread io_thread;
  std::thread loop_thread;
  std::atomic<bool> running{false};
  std::atomic<std::uint16_t> bound_port{0};
  std::atomic<std::uint64_t> tick_count{0};
  std::atomic<std::int64_t> version{1};
  std::atomic<std::size_t> n_clients{0};

  // io thread only
  std::vector<std::weak_ptr<WsSession>> sessions;

  std::mutex pending_mutex;
  std::deque<Pending> pending;

  std::mutex snapshot_mutex;
  ControllerConfig snapshot;

  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  bool stopped = false;

  void do_accept();
  void on_open(const std::shared_ptr<WsSession>& session);
  void on_message(const std::shared_ptr<WsSession>& session, const std::string& text);
  void broadcast(const WireMessage& msg, bool droppable);
  void send_to(const std::weak_ptr<WsSession>& session, const WireMessage& msg);
  WireMessage hello();
  void loop();
};

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, BridgeServer::Impl& server)
      : ws_(std::move(socket)), server_(server) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.text(true);
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->server_.on_open(self);
      self->read();
    });
  }

  // Frame and Metrics are droppable: a slow client loses the oldest of
  // them, never a ConfigAck, EpisodeEnd, Hello or Error.
  void send(std::shared_ptr<const std::string> text, bool droppable) {
    if (closed_) return;
    if (queue_.size() >= server_.options.queue_limit) {
      const std::size_t first = writing_ ? 1 : 0;  // front is in flight
      for (std::size_t i = first; i < queue_.size(); ++i) {
        if (queue_[i].droppable) {
          queue_.erase(queue_.begin() + static_cast<std::ptrdiff_t>(i));
          break;
        }
      }
    }
    queue_.push_back({std::move(text), droppable});
    if (!writing_) write_next();
  }

  bool closed() const { return closed_; }

  // Drops whatever is still queued so the close frame goes out next.
  void close() {
    if (closed_) return;
    closed_ = true;
    if (!queue_.empty()) queue_.erase(queue_.begin() + (writing_ ? 1 : 0), queue_.end());
    ws_.async_close(websocket::close_code::going_away,
                    [self = shared_from_this()](beast::error_code) {});
  }

  void abort() {
    beast::error_code ignored;
    auto& socket = beast::get_lowest_layer(ws_).socket();
    socket.shutdown(tcp::socket::shutdown_both, ignored);
    socket.close(ignored);
  }

 private:
  struct Outgoing {
    std::shared_ptr<const std::string> text;
    bool droppable;
  };

  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        self->queue_.clear();
        --self->server_.n_clients;
        return;
      }
      std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->server_.on_message(self, text);
      self->read();
    });
  }

  void write_next() {
    writing_ = true;
    ws_.async_write(net::buffer(*queue_.front().text),
                    [self = shared_from_this()](beast::error_code ec, std::size_t) {
                      if (ec) {
                        self->closed_ = true;
                        self->queue_.clear();
                        self->writing_ = false;
                        return;
                      }
                      self->queue_.pop_front();
                      if (self->queue_.empty() || self->closed_) {
                        self->writing_ = false;
                      } else {
                        self->write_next();
                      }
                    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  BridgeServer::Impl& server_;
  beast::flat_buffer buffer_;
  std::deque<Outgoing> queue_;
  bool writing_ = false;
  bool closed_ = false;
};

namespace {

// Reads one HTTP request; upgrades it when it targets /ws, else answers 404.
class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, BridgeServer::Impl& server)
      : stream_(std::move(socket)), server_(server) {}

  void run() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_,
                     [self = shared_from_this()](beast::error_code ec, std::size_t) {
                       if (!ec) self->on_read();
                     });
  }

 private:
  void on_read() {
    if (websocket::is_upgrade(req_) && req_.target() == "/ws") {
      stream_.expires_never();
      std::make_shared<WsSession>(stream_.release_socket(), server_)->run(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>(http::status::not_found,
                                                                   req_.version());
    res->set(http::field::content_type, "text/plain");
    res->body() = "websocket endpoint is /ws\n";
    res->prepare_payload();
    http::async_write(stream_, *res,
                      [self = shared_from_this(), res](beast::error_code, std::size_t) {
                        beast::error_code ignored;
                        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
                      });
  }

  beast::tcp_stream stream_;
  BridgeServer::Impl& server_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

}  // namespace

void BridgeServer::Impl::do_accept() {
  acceptor->async_accept(net::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // acceptor closed
    std::make_shared<HttpSession>(std::move(socket), *this)->run();
    do_accept();
  });
}

WireMessage BridgeServer::Impl::hello() {
  WireMessage msg;
  msg.kind = MessageKind::Hello;
  msg.config_version = version.load();
  ControllerConfig config;
  {
    std::lock_guard lock(snapshot_mutex);
    config = snapshot;
  }
  msg.payload = {
      {"server", "deskvla"},
      {"protocol", 1},
      {"task", std::string(to_string(options.task))},
      {"policy", std::string(to_string(weights->kind))},
      {"config", config_to_json(config)},
      {"warmup_steps", options.warmup_steps},
      {"metrics_hz", options.metrics_hz},
  };
  return msg;
}

void BridgeServer::Impl::on_open(const std::shared_ptr<WsSession>& session) {
  std::erase_if(sessions, [](const std::weak_ptr<WsSession>& w) {
    auto s = w.lock();
    return !s || s->closed();
  });
  sessions.push_back(session);
  ++n_clients;
  session->send(std::make_shared<const std::string>(hello().serialize()), false);
}

void BridgeServer::Impl::on_message(const std::shared_ptr<WsSession>& session,
                                    const std::string& text) {
  auto reply = [&](const WireMessage& msg) {
    session->send(std::make_shared<const std::string>(msg.serialize()), false);
  };
  try {
    WireMessage msg = WireMessage::parse(text);
    switch (msg.kind) {
      case MessageKind::Hello:
        reply(hello());
        return;
      case MessageKind::ConfigSet: {
        ControllerConfig current;
        {
          std::lock_guard lock(snapshot_mutex);
          current = snapshot;
        }
        // Reject bad fields now; the loop re-applies against its live config.
        apply_config_patch(current, msg.payload);
        std::lock_guard lock(pending_mutex);
        pending.push_back({msg.payload, msg.config_version, session});
        return;
      }
      default:
        throw ProtocolError("clients may only send Hello or ConfigSet, got " +
                                std::string(to_string(msg.kind)),
                            "kind");
    }
  } catch (const ProtocolError& e) {
    reply(make_error(version.load(), e.what(), e.field()));
  }
}

void BridgeServer::Impl::broadcast(const WireMessage& msg, bool droppable) {
  auto text = std::make_shared<const std::string>(msg.serialize());
  net::post(ioc, [this, text, droppable] {
    for (const auto& w : sessions) {
      if (auto s = w.lock()) s->send(text, droppable);
    }
  });
}

void BridgeServer::Impl::send_to(const std::weak_ptr<WsSession>& session, const WireMessage& msg) {
  auto text = std::make_shared<const std::string>(msg.serialize());
  net::post(ioc, [session, text] {
    if (auto s = session.lock()) s->send(text, false);
  });
}

void BridgeServer::Impl::loop() {
  Controller controller(weights, options.initial);
  Environment env(options.task, weights->dims);
  MetricsAggregator aggregator;
  RateLimiter metrics_limit(options.metrics_hz);
  std::deque<WireMessage> ready;  // completed batches waiting for budget
  const auto emit_period = std::chrono::duration_cast<Clock::duration>(
      std::chrono::duration<double>(1.0 / std::max(options.metrics_hz, 1e-3)));
  const auto step_period =
      options.step_rate_hz > 0.0
          ? std::chrono::duration_cast<Clock::duration>(
                std::chrono::duration<double>(1.0 / options.step_rate_hz))
          : Clock::duration::zero();

  std::uint64_t episode = 0;
  std::uint64_t tick = 0;
  std::size_t warmup_left = 0;
  std::optional<WireMessage> pending_ack;  // sent once warm-up completes
  std::size_t remaining = 0;
  Action current;
  std::deque<Vec2> trail;
  auto next_emit = Clock::now();
  auto next_step = Clock::now();

  auto begin_episode = [&] {
    env.reset(options.seed + episode);
    controller.begin_episode(env.instruction_tokens(), env.seed(), env.seed());
    trail.assign(1, env.state().position);
    remaining = 0;
  };

  auto emit_metrics = [&](WireMessage m, Clock::time_point now) {
    m.payload["sent_at_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count();
    broadcast(m, true);
  };

  auto pump_ready = [&](Clock::time_point now) {
    while (!ready.empty() && metrics_limit.allow(now)) {
      emit_metrics(std::move(ready.front()), now);
      ready.pop_front();
    }
  };

  auto frame = [&] {
    FrameState f;
    f.episode = episode;
    f.tick = tick;
    f.step = env.state().step;
    f.warmup = warmup_left > 0;
    f.env = env.state();
    f.action = current;
    f.trail.assign(trail.begin(), trail.end());
    return make_frame(version.load(), f);
  };

  auto send_ack = [&] {
    if (auto m = aggregator.flush()) ready.push_back(std::move(*m));
    pump_ready(Clock::now());
    broadcast(*pending_ack, false);
    pending_ack.reset();
  };

  // One reconfiguration at a time: further ConfigSets wait in the queue
  // until the current one has been acknowledged.
  auto apply_pending = [&] {
    while (!pending_ack) {
      Pending p;
      {
        std::lock_guard lock(pending_mutex);
        if (pending.empty()) return;
        p = std::move(pending.front());
        pending.pop_front();
      }
      const std::int64_t current_version = version.load();
      if (p.requested_version && *p.requested_version <= current_version) {
        send_to(p.origin, make_error(current_version,
                                     "config_version must exceed " +
                                         std::to_string(current_version),
                                     "config_version"));
        continue;
      }
      ControllerConfig next;
      try {
        next = apply_config_patch(controller.config(), p.payload);
        next.validate();
      } catch (const ProtocolError& e) {
        send_to(p.origin, make_error(current_version, e.what(), e.field()));
        continue;
      } catch (const ConfigError& e) {
        send_to(p.origin, make_error(current_version, e.what()));
        continue;
      }
      // Old-version telemetry goes out now or never, so nothing of the old
      // version can follow the new one.
      if (auto m = aggregator.flush()) ready.push_back(std::move(*m));
      pump_ready(Clock::now());
      ready.clear();

      controller.reconfigure(next);
      const std::int64_t new_version = p.requested_version.value_or(current_version + 1);
      version.store(new_version);
      {
        std::lock_guard lock(snapshot_mutex);
        snapshot = next;
      }
      warmup_left = options.warmup_steps;
      remaining = 0;

      pending_ack.emplace();
      pending_ack->kind = MessageKind::ConfigAck;
      pending_ack->config_version = new_version;
      pending_ack->payload = {
          {"config", config_to_json(next)},
          {"effective_step", tick},
          {"warmup_steps", options.warmup_steps},
      };
      if (warmup_left == 0) send_ack();
    }
  };

  {
    std::lock_guard lock(snapshot_mutex);
    snapshot = controller.config();
  }
  begin_episode();

  while (running.load()) {
    apply_pending();
    const bool warm = warmup_left > 0;
    try {
      if (remaining == 0) {
        StepOutput out = controller.infer(env.observe(), env.state().step);
        current = std::move(out.action);
        remaining = controller.config().rollout_horizon;
        out.metrics.warmup = warm;
        if (auto m = aggregator.add({version.load(), warm}, episode, tick, out.metrics)) {
          ready.push_back(std::move(*m));
        }
      }
      env.step(current);
    } catch (const std::exception& e) {
      broadcast(make_error(version.load(), std::string("control step failed: ") + e.what()), false);
      ++episode;
      begin_episode();
      continue;
    }
    --remaining;
    trail.push_back(env.state().position);
    while (trail.size() > options.trail_length) trail.pop_front();
    ++tick;
    tick_count.store(tick);
    broadcast(frame(), true);
    if (warmup_left > 0 && --warmup_left == 0 && pending_ack) send_ack();

    const auto now = Clock::now();
    if (env.done()) {
      if (auto m = aggregator.flush()) ready.push_back(std::move(*m));
      pump_ready(now);
      WireMessage end;
      end.kind = MessageKind::EpisodeEnd;
      end.config_version = version.load();
      end.payload = {
          {"episode", episode},
          {"seed", env.seed()},
          {"success", env.succeeded()},
          {"steps", env.state().step},
          {"tick", tick},
      };
      broadcast(end, false);
      ++episode;
      begin_episode();
    }

    pump_ready(now);
    if (now >= next_emit && ready.empty() && !aggregator.empty() && metrics_limit.allow(now)) {
      emit_metrics(*aggregator.flush(), now);
      next_emit = now + emit_period;
    }

    if (step_period > Clock::duration::zero()) {
      next_step += step_period;
      std::this_thread::sleep_until(next_step);
    }
  }
}

// ── BridgeServer ────────────────────────────────────────────────────────

BridgeServer::BridgeServer(std::shared_ptr<const FrozenWeights> weights, ServerOptions options) {
  if (!weights) throw std::invalid_argument("bridge server needs weights");
  options.initial.validate();
  if (options.queue_limit < 1) throw ConfigError("queue_limit must be at least 1");
  if (!(options.metrics_hz > 0.0)) throw ConfigError("metrics_hz must be positive");
  impl_ = std::make_unique<Impl>(std::move(weights), std::move(options));
}

BridgeServer::~BridgeServer() { stop(); }

void BridgeServer::start() {
  Impl& s = *impl_;
  if (s.running.load()) return;
  const auto address = net::ip::make_address(s.options.address);
  const tcp::endpoint endpoint{address, s.options.port};
  s.acceptor.emplace(s.ioc);
  beast::error_code ec;
  s.acceptor->open(endpoint.protocol(), ec);
  if (!ec) s.acceptor->set_option(net::socket_base::reuse_address(true), ec);
  if (!ec) s.acceptor->bind(endpoint, ec);
  if (ec == net::error::address_in_use) {
    s.acceptor.reset();
    throw PortInUseError("port " + std::to_string(s.options.port) + " is already in use");
  }
  if (!ec) s.acceptor->listen(net::socket_base::max_listen_connections, ec);
  if (ec) {
    s.acceptor.reset();
    throw std::runtime_error("cannot listen on " + s.options.address + ":" +
                             std::to_string(s.options.port) + ": " + ec.message());
  }
  s.bound_port.store(s.acceptor->local_endpoint().port());
  s.do_accept();
  s.running.store(true);
  {
    std::lock_guard lock(s.stop_mutex);
    s.stopped = false;
  }
  s.io_thread = std::thread([&s] {
    auto guard = net::make_work_guard(s.ioc);
    s.ioc.run();
  });
  s.loop_thread = std::thread([&s] {
    try {
      s.loop();
    } catch (const std::exception& e) {
      s.broadcast(make_error(s.version.load(), std::string("control loop stopped: ") + e.what()),
                  false);
    }
  });
}

void BridgeServer::stop() {
  if (!impl_) return;
  Impl& s = *impl_;
  if (s.running.exchange(false)) {
    if (s.loop_thread.joinable()) s.loop_thread.join();
    net::post(s.ioc, [&s] {
      beast::error_code ignored;
      if (s.acceptor) s.acceptor->close(ignored);
      for (const auto& w : s.sessions) {
        if (auto session = w.lock()) session->close();
      }
    });
    // Give close frames a moment to leave, then cut whatever is left so no
    // peer waits on a socket the stopped io loop will never service.
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    auto aborted = std::make_shared<std::promise<void>>();
    net::post(s.ioc, [&s, aborted] {
      for (const auto& w : s.sessions) {
        if (auto session = w.lock()) session->abort();
      }
      aborted->set_value();
    });
    aborted->get_future().wait_for(std::chrono::seconds(2));
    s.ioc.stop();
    if (s.io_thread.joinable()) s.io_thread.join();
    s.sessions.clear();
    s.acceptor.reset();
    s.ioc.restart();
  }
  {
    std::lock_guard lock(s.stop_mutex);
    s.stopped = true;
  }
  s.stop_cv.notify_all();
}

void BridgeServer::wait(bool handle_signals) {
  Impl& s = *impl_;
  if (handle_signals) {
    g_signalled.store(false);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
  }
  std::unique_lock lock(s.stop_mutex);
  while (!s.stopped) {
    s.stop_cv.wait_for(lock, std::chrono::milliseconds(50));
    if (handle_signals && g_signalled.load()) {
      lock.unlock();
      stop();
      return;
    }
  }
}

std::uint16_t BridgeServer::port() const { return impl_->bound_port.load(); }
std::uint64_t BridgeServer::ticks() const { return impl_->tick_count.load(); }
std::int64_t BridgeServer::config_version() const { return impl_->version.load(); }
std::size_t BridgeServer::client_count() const { return impl_->n_clients.load(); }

}  // namespace deskvla::bridge
