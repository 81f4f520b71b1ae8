// SPDX-License-Identifier: Apache-2.0

#include "deskvla/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "deskvla/bridge/server.hpp"
#include "deskvla/profiler.hpp"

namespace deskvla::cli {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<NamedConfig> named_presets(const std::string& list) {
  std::vector<NamedConfig> out;
  for (const auto& name : split_list(list)) out.push_back({name, preset(name)});
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw WriteError("cannot create output directory " + dir.string());
  }
}

template <typename F>
void write_file(const fs::path& path, F&& body) {
  std::ofstream out(path);
  if (!out) throw WriteError("cannot write " + path.string());
  body(out);
  out.flush();
  if (!out) throw WriteError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string dims_line(const ModelDims& d) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "dims d_model=%zu layers=%zu heads=%zu d_head=%zu L_p=%zu L_v=%zu d_action=%zu "
                "flow_width=%zu flow_depth=%zu",
                d.d_model, d.n_layers, d.n_heads, d.d_head, d.L_p, d.L_v, d.d_action,
                d.flow_width, d.flow_depth);
  return buf;
}

// Flags that override individual ControllerConfig fields.
struct ConfigFlags {
  bool reduced = false;
  bool cache = false;
  bool compiled = false;
  std::size_t flow_steps = 0;
  std::size_t horizon = 0;
  std::string attention;

  void add_to(CLI::App& app) {
    app.add_flag("--reduced-precision", reduced, "Run in emulated bf16");
    app.add_flag("--prefix-cache", cache, "Cache instruction keys and values per episode");
    app.add_flag("--compiled", compiled, "Keep a persistent step workspace");
    app.add_option("--flow-steps", flow_steps, "Flow integration steps")->check(CLI::PositiveNumber);
    app.add_option("--horizon", horizon, "Rollout horizon (actions per inference)")
        ->check(CLI::PositiveNumber);
    app.add_option("--attention", attention, "naive | streaming | streaming(N)");
  }

  bool any(const CLI::App& app) const {
    for (const char* name : {"--reduced-precision", "--prefix-cache", "--compiled",
                             "--flow-steps", "--horizon", "--attention"}) {
      if (app.count(name) > 0) return true;
    }
    return false;
  }

  ControllerConfig apply(const CLI::App& app, ControllerConfig c) const {
    if (app.count("--reduced-precision")) c.use_reduced_precision = reduced;
    if (app.count("--prefix-cache")) c.use_prefix_cache = cache;
    if (app.count("--compiled")) c.compiled = compiled;
    if (app.count("--flow-steps")) c.flow_steps = flow_steps;
    if (app.count("--horizon")) c.rollout_horizon = horizon;
    if (app.count("--attention")) c.attention_kernel = parse_attention_kernel(attention);
    c.validate();
    return c;
  }
};

struct CommonFlags {
  std::uint64_t seed = 7;
  std::string policy;
  std::string task = "reach";
  std::string out_dir;
};

std::shared_ptr<const FrozenWeights> make_weights(std::uint64_t seed, const std::string& policy) {
  return std::make_shared<const FrozenWeights>(
      build_weights(seed, ModelDims{}, parse_policy_kind(policy)));
}

}  // namespace

// ── Evaluation ──────────────────────────────────────────────────────────

std::size_t ConfigReport::successes() const {
  return static_cast<std::size_t>(
      std::count_if(episodes.begin(), episodes.end(), [](const auto& e) { return e.success; }));
}

double ConfigReport::success_rate() const {
  return episodes.empty() ? 0.0
                          : static_cast<double>(successes()) / static_cast<double>(episodes.size());
}

double ConfigReport::max_divergence() const {
  double worst = 0.0;
  for (const auto& e : episodes) worst = std::max(worst, e.divergence);
  return worst;
}

double ConfigReport::mean_divergence() const {
  if (episodes.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& e : episodes) sum += e.divergence;
  return sum / static_cast<double>(episodes.size());
}

EvalReport evaluate(const std::vector<NamedConfig>& configs,
                    std::shared_ptr<const FrozenWeights> weights, const EvalOptions& options) {
  const ControllerConfig reference = preset(options.reference);
  EvalReport report;
  for (const auto& named : configs) {
    named.config.validate();
    report.configs.push_back({named.name, named.config, {}});
    report.configs.back().episodes.resize(options.episodes);
  }
  if (options.episodes == 0) return report;

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    try {
      Controller ref_controller(weights, reference);
      std::vector<Controller> controllers;
      controllers.reserve(configs.size());
      for (const auto& named : configs) controllers.emplace_back(weights, named.config);
      Environment env(options.task, weights->dims);
      const std::size_t max_steps = env.params().max_steps;
      for (std::size_t i = next++; i < options.episodes; i = next++) {
        const std::uint64_t seed = options.seed + i;
        env.reset(seed);
        const EpisodeRecord ref = run_episode(env, ref_controller, max_steps);
        for (std::size_t c = 0; c < configs.size(); ++c) {
          EpisodeRecord rec;
          if (configs[c].config == reference) {
            rec = ref;
          } else {
            env.reset(seed);
            rec = run_episode(env, controllers[c], max_steps);
          }
          report.configs[c].episodes[i] = {seed, rec.success, rec.steps.size(),
                                           rec.inference_calls, trajectory_divergence(rec, ref)};
        }
      }
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
      next = options.episodes;
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, options.episodes);
  std::vector<std::thread> threads;
  for (std::size_t j = 1; j < jobs; ++j) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return report;
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  for (const auto& line : report.metadata) out << "# " << line << '\n';
  for (const auto& c : report.configs) out << "# config " << c.name << ": " << to_kv_line(c.config) << '\n';
  out << "config,episodes,successes,success_rate,max_divergence,mean_divergence\n";
  char buf[256];
  for (const auto& c : report.configs) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.4f,%.9e,%.9e\n", c.name.c_str(),
                  c.episodes.size(), c.successes(), c.success_rate(), c.max_divergence(),
                  c.mean_divergence());
    out << buf;
  }
}

void write_eval_text(std::ostream& out, const EvalReport& report) {
  for (const auto& line : report.metadata) out << line << '\n';
  out << '\n';
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %9s %9s %8s %14s %14s\n", "config", "episodes",
                "successes", "rate", "max_div", "mean_div");
  out << buf;
  for (const auto& c : report.configs) {
    std::snprintf(buf, sizeof buf, "%-14s %9zu %9zu %8.3f %14.3e %14.3e\n", c.name.c_str(),
                  c.episodes.size(), c.successes(), c.success_rate(), c.max_divergence(),
                  c.mean_divergence());
    out << buf;
  }
}

void write_verdicts(std::ostream& out, const ConfigReport& report) {
  out << "# config " << report.name << ": " << to_kv_line(report.config) << '\n';
  out << "seed,success,steps,inference_calls,divergence\n";
  char buf[160];
  for (const auto& e : report.episodes) {
    std::snprintf(buf, sizeof buf, "%llu,%d,%zu,%zu,%.9e\n",
                  static_cast<unsigned long long>(e.seed), e.success ? 1 : 0, e.steps,
                  e.inference_calls, e.divergence);
    out << buf;
  }
}

// ── Golden fixture ──────────────────────────────────────────────────────

std::shared_ptr<const FrozenWeights> golden_weights(std::uint64_t seed) {
  return std::make_shared<const FrozenWeights>(build_weights(seed, ModelDims{}, PolicyKind::Random));
}

GoldenCase make_golden_case(const FrozenWeights& weights) {
  GoldenCase g;
  g.instruction = Vocabulary::standard().encode("reach red x=+0.10 y=-0.20");
  Environment env(TaskKind::Reach, weights.dims);
  env.reset(weights.seed, Vec2{-0.5, 0.3}, Vec2{0.1, -0.2});
  g.observation = env.observe();
  g.prefix = encode_instruction(g.instruction, weights);
  g.step_tokens = encode_observation(g.observation, weights);

  Tensor sequence(g.prefix.rows() + g.step_tokens.rows(), weights.dims.d_model);
  for (std::size_t r = 0; r < g.prefix.rows(); ++r) {
    std::copy(g.prefix.row(r).begin(), g.prefix.row(r).end(), sequence.row(r).begin());
  }
  for (std::size_t r = 0; r < g.step_tokens.rows(); ++r) {
    std::copy(g.step_tokens.row(r).begin(), g.step_tokens.row(r).end(),
              sequence.row(g.prefix.rows() + r).begin());
  }
  FlopCounter counter;
  g.hidden = decode(sequence, weights, DecodeOptions{}, counter);
  const Action action =
      flow_decode(g.hidden, FlowConfig{10, noise_seed_for(weights.seed, 0)}, weights.flow, counter);
  g.action = Tensor::from_values(1, action.size(), action);
  return g;
}

void write_golden(const fs::path& dir, std::uint64_t seed) {
  ensure_dir(dir);
  const auto weights = golden_weights(seed);
  const GoldenCase g = make_golden_case(*weights);
  const Tensor image = Tensor::from_values(weights->dims.image_tokens(), weights->dims.patch_dim,
                                           g.observation.image_features);
  const Tensor state = Tensor::from_values(1, g.observation.state.size(), g.observation.state);
  try {
    save_tensor(dir / "image_features.bin", image);
    save_tensor(dir / "state.bin", state);
    save_tensor(dir / "prefix.bin", g.prefix);
    save_tensor(dir / "step_tokens.bin", g.step_tokens);
    save_tensor(dir / "hidden.bin", g.hidden);
    save_tensor(dir / "action.bin", g.action);
  } catch (const std::runtime_error& e) {
    throw WriteError(e.what());
  }
}

// ── Subcommands ─────────────────────────────────────────────────────────

namespace {

std::vector<std::string> base_metadata(const char* command, const CommonFlags& f,
                                       const FrozenWeights& weights) {
  return {std::string("deskvla ") + command,
          "seed=" + std::to_string(f.seed),
          "policy=" + std::string(to_string(weights.kind)),
          "task=" + f.task,
          dims_line(weights.dims)};
}

int cmd_bench(const CommonFlags& f, const CLI::App& app, const ConfigFlags& overrides,
              const std::string& presets, bool ladder, const std::string& config_file,
              std::size_t reps, std::ostream& out) {
  std::vector<NamedConfig> configs = ladder ? ablation_ladder() : named_presets(presets);
  if (!config_file.empty()) {
    configs.push_back({fs::path(config_file).stem().string(), parse_kv(read_file(config_file))});
  }
  if (overrides.any(app)) {
    const ControllerConfig base = config_file.empty() ? preset("baseline") : configs.back().config;
    configs.push_back({"custom", overrides.apply(app, base)});
  }
  if (configs.empty()) throw ConfigError("no configs selected");
  if (reps < kMinBenchRepetitions) {
    throw ConfigError("--reps must be at least " + std::to_string(kMinBenchRepetitions));
  }

  const auto weights = make_weights(f.seed, f.policy.empty() ? "random" : f.policy);
  BenchOptions options;
  options.repetitions = reps;
  options.seed = f.seed;
  options.task = parse_task(f.task);
  auto metadata = base_metadata("bench", f, *weights);
  metadata.push_back("repetitions=" + std::to_string(reps));
  metadata.push_back("warmup=" + std::to_string(options.warmup));

  const auto rows = bench_table(configs, *weights, options);
  write_bench_text(out, rows, metadata);
  if (!f.out_dir.empty()) {
    ensure_dir(f.out_dir);
    write_file(fs::path(f.out_dir) / "bench.csv", [&](std::ostream& o) { write_bench_csv(o, rows, metadata); });
    write_file(fs::path(f.out_dir) / "bench.txt", [&](std::ostream& o) { write_bench_text(o, rows, metadata); });
  }
  return kOk;
}

int cmd_eval(const CommonFlags& f, const std::string& presets, std::size_t episodes,
             std::size_t jobs, std::ostream& out) {
  const auto configs = named_presets(presets);
  const auto weights = make_weights(f.seed, f.policy.empty() ? "reach" : f.policy);
  EvalOptions options;
  options.episodes = episodes;
  options.seed = f.seed;
  options.task = parse_task(f.task);
  options.jobs = jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : jobs;

  EvalReport report = evaluate(configs, weights, options);
  report.metadata = base_metadata("eval", f, *weights);
  report.metadata.push_back("episodes=" + std::to_string(episodes));
  report.metadata.push_back("reference=" + options.reference);
  write_eval_text(out, report);
  if (!f.out_dir.empty()) {
    const fs::path dir(f.out_dir);
    ensure_dir(dir / "verdicts");
    write_file(dir / "eval.csv", [&](std::ostream& o) { write_eval_csv(o, report); });
    write_file(dir / "eval.txt", [&](std::ostream& o) { write_eval_text(o, report); });
    for (const auto& c : report.configs) {
      write_file(dir / "verdicts" / (c.name + ".csv"), [&](std::ostream& o) { write_verdicts(o, c); });
    }
  }
  return kOk;
}

int cmd_serve(const CommonFlags& f, const CLI::App& app, const ConfigFlags& overrides,
              const std::string& preset_name, const std::string& address, std::uint16_t port,
              double rate, double metrics_hz, std::ostream& out) {
  bridge::ServerOptions options;
  options.address = address;
  options.port = port;
  options.task = parse_task(f.task);
  options.seed = f.seed;
  options.initial = overrides.apply(app, preset(preset_name));
  options.step_rate_hz = rate;
  options.metrics_hz = metrics_hz;
  bridge::BridgeServer server(make_weights(f.seed, f.policy.empty() ? "reach" : f.policy), options);
  server.start();
  out << "listening on ws://" << address << ':' << server.port() << "/ws" << std::endl;
  server.wait(/*handle_signals=*/true);
  out << "stopped after " << server.ticks() << " steps" << std::endl;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale vision-language-action inference runtime", "deskvla"};
  app.require_subcommand(1);

  CommonFlags common;
  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--seed", common.seed, "Weight and episode seed")->capture_default_str();
    sub->add_option("--policy", common.policy, "random | reach");
    sub->add_option("--task", common.task, "reach | place")->capture_default_str();
    if (with_out) sub->add_option("--out", common.out_dir, "Output directory");
  };

  ConfigFlags bench_flags;
  std::string bench_presets = "baseline,interleave,blurr";
  bool ladder = false;
  std::string config_file;
  std::size_t reps = 200;
  CLI::App* bench = app.add_subcommand("bench", "Latency / FLOP / memory table per config");
  add_common(bench, true);
  bench->add_option("--presets", bench_presets, "Comma-separated preset names")->capture_default_str();
  bench->add_flag("--ladder", ladder, "Run the one-change-at-a-time ablation ladder");
  bench->add_option("--config", config_file, "key=value config file");
  bench->add_option("--reps", reps, "Timed steps per config")->capture_default_str();
  bench_flags.add_to(*bench);

  std::string eval_presets = "baseline,cache-only,reduced-only,blurr";
  std::size_t episodes = 100;
  std::size_t jobs = 0;
  CLI::App* eval = app.add_subcommand("eval", "Closed-loop success rate and divergence");
  add_common(eval, true);
  eval->add_option("--presets", eval_presets, "Comma-separated preset names")->capture_default_str();
  eval->add_option("--episodes", episodes, "Episodes per config")->capture_default_str();
  eval->add_option("--jobs", jobs, "Worker threads (0 = all cores)");

  ConfigFlags serve_flags;
  std::string serve_preset = "blurr";
  std::string address = "127.0.0.1";
  std::uint16_t port = 8765;
  double rate = 50.0;
  double metrics_hz = 30.0;
  CLI::App* serve = app.add_subcommand("serve", "Run the live websocket bridge on /ws");
  add_common(serve, false);
  serve->add_option("--preset", serve_preset, "Initial preset")->capture_default_str();
  serve->add_option("--address", address)->capture_default_str();
  serve->add_option("--port", port, "0 picks a free port")->capture_default_str();
  serve->add_option("--rate", rate, "Control steps per second (0 = unpaced)")->capture_default_str();
  serve->add_option("--metrics-hz", metrics_hz, "Max Metrics messages per second")
      ->capture_default_str();
  serve_flags.add_to(*serve);

  CLI::App* golden = app.add_subcommand("golden", "Write the regression fixture tensors");
  add_common(golden, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << e.what() << '\n';
      return kOk;
    }
    err << "deskvla: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (bench->parsed()) {
      return cmd_bench(common, *bench, bench_flags, bench_presets, ladder, config_file, reps, out);
    }
    if (eval->parsed()) return cmd_eval(common, eval_presets, episodes, jobs, out);
    if (serve->parsed()) {
      return cmd_serve(common, *serve, serve_flags, serve_preset, address, port, rate, metrics_hz,
                       out);
    }
    if (golden->parsed()) {
      if (common.out_dir.empty()) throw ConfigError("golden needs --out");
      write_golden(common.out_dir, common.seed);
      out << "wrote golden tensors to " << common.out_dir << '\n';
      return kOk;
    }
  } catch (const UnknownPresetError& e) {
    err << "deskvla: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "deskvla: " << e.what() << '\n';
    return kUsage;
  } catch (const WriteError& e) {
    err << "deskvla: " << e.what() << '\n';
    return kWriteError;
  } catch (const bridge::PortInUseError& e) {
    err << "deskvla: " << e.what() << '\n';
    return kPortInUse;
  } catch (const std::exception& e) {
    err << "deskvla: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace deskvla::cli
