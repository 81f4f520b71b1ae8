// Minimal blocking websocket client for driving the bridge in tests.

#pragma once

#include <chrono>
#include <optional>
#include <string>

#include <boost/asio/connect.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <json.hpp>

namespace deskvla::testing {

namespace beast = boost::beast;
namespace net = boost::asio;
using tcp = net::ip::tcp;

class WsClient {
 public:
  explicit WsClient(std::uint16_t port) {
    tcp::resolver resolver(ioc_);
    beast::get_lowest_layer(ws_).connect(*resolver.resolve("127.0.0.1", std::to_string(port)).begin());
    ws_.handshake("127.0.0.1:" + std::to_string(port), "/ws");
  }

  ~WsClient() {
    beast::error_code ec;
    ws_.close(beast::websocket::close_code::normal, ec);
  }

  void send(const std::string& text) { ws_.write(net::buffer(text)); }
  void send(const nlohmann::json& j) { send(j.dump()); }

  /// Next text message, or nullopt when nothing arrives within `timeout`
  /// (the connection is unusable afterwards).
  std::optional<nlohmann::json> read(std::chrono::milliseconds timeout = std::chrono::seconds(5)) {
    beast::flat_buffer buffer;
    bool done = false;
    beast::error_code ec;
    ws_.async_read(buffer, [&](beast::error_code e, std::size_t) {
      ec = e;
      done = true;
    });
    ioc_.restart();
    ioc_.run_for(timeout);
    if (!done) {
      beast::get_lowest_layer(ws_).cancel();
      ioc_.restart();
      ioc_.run();
      return std::nullopt;
    }
    if (ec) return std::nullopt;
    return nlohmann::json::parse(beast::buffers_to_string(buffer.data()));
  }

  /// Reads until a message of `kind` arrives; every message seen is passed
  /// to `seen` first.
  template <class F>
  std::optional<nlohmann::json> read_until(const std::string& kind, F&& seen,
                                           std::chrono::milliseconds budget = std::chrono::seconds(20)) {
    const auto deadline = std::chrono::steady_clock::now() + budget;
    while (std::chrono::steady_clock::now() < deadline) {
      auto m = read();
      if (!m) return std::nullopt;
      seen(*m);
      if ((*m)["kind"] == kind) return m;
    }
    return std::nullopt;
  }
  std::optional<nlohmann::json> read_until(const std::string& kind) {
    return read_until(kind, [](const nlohmann::json&) {});
  }

 private:
  net::io_context ioc_;
  beast::websocket::stream<beast::tcp_stream> ws_{ioc_};
};

/// Plain HTTP GET; returns the status code.
inline int http_status(std::uint16_t port, const std::string& target) {
  net::io_context ioc;
  tcp::resolver resolver(ioc);
  beast::tcp_stream stream(ioc);
  stream.connect(*resolver.resolve("127.0.0.1", std::to_string(port)).begin());
  beast::http::request<beast::http::empty_body> req{beast::http::verb::get, target, 11};
  req.set(beast::http::field::host, "127.0.0.1");
  beast::http::write(stream, req);
  beast::flat_buffer buffer;
  beast::http::response<beast::http::string_body> res;
  beast::http::read(stream, buffer, res);
  beast::error_code ec;
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return static_cast<int>(res.result_int());
}

}  // namespace deskvla::testing
