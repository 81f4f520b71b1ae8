#include <doctest.h>

#include <memory>
#include <thread>

#include "deskvla/bridge/protocol.hpp"
#include "deskvla/bridge/server.hpp"
#include "support/ws_client.hpp"

using namespace deskvla;
using namespace deskvla::bridge;
using deskvla::testing::WsClient;

namespace {

std::shared_ptr<const FrozenWeights> small_weights() {
  static const auto w = std::make_shared<const FrozenWeights>(
      build_weights(7, tiny_dims(), PolicyKind::Random));
  return w;
}

ServerOptions test_options() {
  ServerOptions o;
  o.port = 0;
  o.metrics_hz = 20.0;
  o.step_rate_hz = 500.0;
  return o;
}

StepMetrics metrics_with(std::uint64_t latency_ns, std::uint64_t flops) {
  StepMetrics m;
  m.latency_ns = latency_ns;
  m.flops.add("mlp", flops);
  m.peak_bytes = 100;
  return m;
}

}  // namespace

// ── Wire schema ─────────────────────────────────────────────────────────

TEST_CASE("messages round-trip through text") {
  WireMessage m;
  m.kind = MessageKind::ConfigAck;
  m.config_version = 4;
  m.payload = {{"effective_step", 12}};
  const WireMessage back = WireMessage::parse(m.serialize());
  CHECK(back.kind == MessageKind::ConfigAck);
  CHECK(back.config_version == 4);
  CHECK(back.payload == m.payload);

  const auto j = json::parse(m.serialize());
  CHECK(j["kind"] == "ConfigAck");
  CHECK(j["config_version"] == 4);

  for (auto kind : {MessageKind::Hello, MessageKind::ConfigSet, MessageKind::ConfigAck, MessageKind::Frame,
                    MessageKind::Metrics, MessageKind::EpisodeEnd, MessageKind::Error}) {
    CHECK(parse_kind(to_string(kind)) == kind);
  }
  CHECK_FALSE(parse_kind("Bogus"));
}

TEST_CASE("malformed messages name the field") {
  auto field_of = [](const std::string& text) {
    try {
      WireMessage::parse(text);
    } catch (const ProtocolError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of("{not json") == "");
  CHECK(field_of("[1,2]") == "");
  CHECK(field_of(R"({"payload":{}})") == "kind");
  CHECK(field_of(R"({"kind":"Teleport"})") == "kind");
  CHECK(field_of(R"({"kind":"ConfigSet","config_version":"2"})") == "config_version");
  CHECK(field_of(R"({"kind":"ConfigSet","payload":[]})") == "payload");
  CHECK(field_of(R"({"kind":"Hello"})") == "<none>");
}

TEST_CASE("config patches") {
  const ControllerConfig base = preset("baseline");
  ControllerConfig c = apply_config_patch(base, json{{"preset", "blurr"}, {"flow_steps", 6}});
  ControllerConfig expect = preset("blurr");
  expect.flow_steps = 6;
  CHECK(c == expect);

  c = apply_config_patch(base, json{{"attention_kernel", {{"kind", "streaming"}, {"tile", 16}}}});
  CHECK(c.attention_kernel == AttentionKernel::streaming(16));
  c = apply_config_patch(base, json{{"attention_kernel", "streaming(2)"}, {"use_prefix_cache", true}});
  CHECK(c.attention_kernel == AttentionKernel::streaming(2));
  CHECK(c.use_prefix_cache);
  CHECK(apply_config_patch(base, json::object()) == base);

  auto field_of = [&](const json& payload) {
    try {
      apply_config_patch(base, payload);
    } catch (const ProtocolError& e) {
      return e.field();
    }
    return std::string("<none>");
  };
  CHECK(field_of(json{{"warp", 9}}) == "warp");
  CHECK(field_of(json{{"flow_steps", 0}}) == "flow_steps");
  CHECK(field_of(json{{"flow_steps", "four"}}) == "flow_steps");
  CHECK(field_of(json{{"use_prefix_cache", 1}}) == "use_prefix_cache");
  CHECK(field_of(json{{"preset", "turbo"}}) == "preset");
  CHECK(field_of(json{{"attention_kernel", "flash"}}) == "attention_kernel");
  CHECK(field_of(json{{"rollout_horizon", -1}}) == "rollout_horizon");

  const json cfg = config_to_json(preset("blurr"));
  CHECK(apply_config_patch(base, cfg) == preset("blurr"));
}

TEST_CASE("error messages") {
  const WireMessage e = make_error(3, "bad", "flow_steps");
  CHECK(e.kind == MessageKind::Error);
  CHECK(e.config_version == 3);
  CHECK(e.payload["message"] == "bad");
  CHECK(e.payload["field"] == "flow_steps");
  CHECK_FALSE(make_error(3, "bad").payload.contains("field"));
}

TEST_CASE("metrics batches never span two keys") {
  MetricsAggregator agg;
  CHECK(agg.empty());
  CHECK_FALSE(agg.add({1, false}, 0, 10, metrics_with(1'000'000, 100)));
  CHECK_FALSE(agg.add({1, false}, 0, 11, metrics_with(3'000'000, 100)));
  CHECK(agg.count() == 2);
  const auto flushed = agg.add({2, true}, 0, 12, metrics_with(2'000'000, 50));
  REQUIRE(flushed);
  CHECK(flushed->kind == MessageKind::Metrics);
  CHECK(flushed->config_version == 1);
  const json& p = flushed->payload;
  CHECK(p["warmup"] == false);
  CHECK(p["count"] == 2);
  CHECK(p["first_step"] == 10);
  CHECK(p["last_step"] == 11);
  CHECK(p["latency_ms"]["median"].get<double>() == doctest::Approx(2.0));
  CHECK(p["latency_ms"]["mean"].get<double>() == doctest::Approx(2.0));
  CHECK(p["latency_ms"]["max"].get<double>() == doctest::Approx(3.0));
  CHECK(p["flops"] == 100);
  CHECK(p["peak_bytes"] == 100);
  CHECK(p["gflops"].get<double>() == doctest::Approx(200.0 / 4e6));

  const auto last = agg.flush();
  REQUIRE(last);
  CHECK(last->config_version == 2);
  CHECK(last->payload["warmup"] == true);
  CHECK(agg.empty());
  CHECK_FALSE(agg.flush());
}

TEST_CASE("frames carry the scene") {
  FrameState f;
  f.episode = 2;
  f.tick = 40;
  f.step = 7;
  f.env.position = {0.1, 0.2};
  f.env.goal = {0.3, -0.4};
  f.env.gripper = 0.5;
  f.action = {0.1f, 0.2f, 0.0f, 1.0f};
  f.trail = {{0.0, 0.0}, {0.1, 0.2}};
  const WireMessage m = make_frame(5, f);
  CHECK(m.kind == MessageKind::Frame);
  CHECK(m.config_version == 5);
  CHECK(m.payload["agent"] == json::array({0.1, 0.2}));
  CHECK(m.payload["goal"] == json::array({0.3, -0.4}));
  CHECK(m.payload["trail"].size() == 2);
  CHECK(m.payload["action"].size() == 4);
  CHECK(m.payload["step"] == 7);
}

// ── Live server ─────────────────────────────────────────────────────────

TEST_CASE("live server: hello, reconfiguration and errors") {
  BridgeServer server(small_weights(), test_options());
  server.start();
  REQUIRE(server.port() != 0);
  WsClient client(server.port());

  auto hello = client.read();
  REQUIRE(hello);
  CHECK((*hello)["kind"] == "Hello");
  CHECK((*hello)["config_version"] == 1);
  CHECK(apply_config_patch(ControllerConfig{}, (*hello)["payload"]["config"]) == preset("blurr"));

  SUBCASE("ConfigSet is acknowledged after warm-up") {
    client.send(json{{"kind", "ConfigSet"}, {"config_version", 2}, {"payload", {{"flow_steps", 6}}}});
    std::int64_t highest = 1;
    std::size_t warm_frames = 0;
    bool monotone = true;
    auto ack = client.read_until("ConfigAck", [&](const json& m) {
      const std::int64_t v = m["config_version"];
      monotone = monotone && v >= highest;
      highest = std::max(highest, v);
      if (m["kind"] == "Frame" && v == 2 && m["payload"]["warmup"] == true) ++warm_frames;
    });
    REQUIRE(ack);
    CHECK(monotone);
    CHECK((*ack)["config_version"] == 2);
    CHECK((*ack)["payload"]["config"]["flow_steps"] == 6);
    CHECK((*ack)["payload"]["warmup_steps"] == kWarmupSteps);
    CHECK(warm_frames == kWarmupSteps);
    // Nothing older than the acknowledged version follows it.
    for (int i = 0; i < 50; ++i) {
      auto m = client.read();
      REQUIRE(m);
      CHECK((*m)["config_version"] == 2);
    }
  }

  SUBCASE("a stale version is rejected") {
    client.send(json{{"kind", "ConfigSet"}, {"config_version", 1}, {"payload", {{"flow_steps", 6}}}});
    auto err = client.read_until("Error");
    REQUIRE(err);
    CHECK((*err)["payload"]["field"] == "config_version");
    CHECK(server.config_version() == 1);
  }

  SUBCASE("an unknown field is rejected by name") {
    client.send(json{{"kind", "ConfigSet"}, {"config_version", 2}, {"payload", {{"turbo", true}}}});
    auto err = client.read_until("Error");
    REQUIRE(err);
    CHECK((*err)["payload"]["field"] == "turbo");
  }

  SUBCASE("clients may not send server kinds") {
    client.send(json{{"kind", "Frame"}, {"payload", json::object()}});
    auto err = client.read_until("Error");
    REQUIRE(err);
    CHECK((*err)["payload"]["field"] == "kind");
  }

  SUBCASE("malformed json keeps the connection") {
    client.send(std::string("{oops"));
    REQUIRE(client.read_until("Error"));
    client.send(json{{"kind", "Hello"}});
    auto again = client.read_until("Hello");
    REQUIRE(again);
    CHECK((*again)["payload"]["server"] == "deskvla");
  }

  server.stop();
}

TEST_CASE("live server: metrics are rate limited") {
  ServerOptions o = test_options();
  o.step_rate_hz = 0.0;
  o.metrics_hz = 10.0;
  BridgeServer server(small_weights(), o);
  server.start();
  WsClient client(server.port());
  REQUIRE(client.read());
  std::vector<std::int64_t> sent_ms;
  const auto until = std::chrono::steady_clock::now() + std::chrono::milliseconds(2500);
  while (std::chrono::steady_clock::now() < until) {
    auto m = client.read();
    REQUIRE(m);
    if ((*m)["kind"] == "Metrics") {
      sent_ms.push_back((*m)["payload"]["sent_at_ms"].get<std::int64_t>());
      CHECK((*m)["payload"]["count"].get<int>() >= 1);
    }
  }
  CHECK(sent_ms.size() >= 10);
  // Server send times: any one-second window holds at most metrics_hz
  // messages (999 ms absorbs millisecond truncation).
  for (std::size_t i = 0; i < sent_ms.size(); ++i) {
    if (i > 0) CHECK(sent_ms[i] >= sent_ms[i - 1]);
    std::size_t j = i;
    while (j < sent_ms.size() && sent_ms[j] - sent_ms[i] < 999) ++j;
    CHECK(j - i <= 10);
  }
  server.stop();
}

TEST_CASE("live server: episodes end and restart") {
  ServerOptions o = test_options();
  o.step_rate_hz = 0.0;
  BridgeServer server(small_weights(), o);
  server.start();
  WsClient client(server.port());
  auto end = client.read_until("EpisodeEnd");
  REQUIRE(end);
  CHECK((*end)["payload"].contains("success"));
  CHECK((*end)["payload"]["steps"].get<int>() >= 1);
  CHECK((*end)["payload"]["steps"].get<int>() <= 100);
  server.stop();
}

TEST_CASE("live server: http other than /ws is 404") {
  BridgeServer server(small_weights(), test_options());
  server.start();
  CHECK(deskvla::testing::http_status(server.port(), "/") == 404);
  CHECK(deskvla::testing::http_status(server.port(), "/metrics") == 404);
  server.stop();
  server.stop();
}

TEST_CASE("live server: a taken port is reported") {
  BridgeServer first(small_weights(), test_options());
  first.start();
  ServerOptions o = test_options();
  o.port = first.port();
  BridgeServer second(small_weights(), o);
  CHECK_THROWS_AS(second.start(), PortInUseError);
  first.stop();
}
