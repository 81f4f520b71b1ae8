// SPDX-License-Identifier: Apache-2.0

#include "deskvla/controller.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

namespace deskvla {

void StepWorkspace::reserve(const FrozenWeights& weights) {
  const ModelDims& dims = weights.dims;
  observation.image_in.resize(dims.image_tokens(), dims.patch_dim);
  observation.image_hidden.resize(dims.image_tokens(), dims.d_model);
  observation.state_in.resize(1, dims.state_dim);
  observation.state_hidden.resize(1, dims.d_model);
  step_tokens.resize(dims.L_v, dims.d_model);
  prefix.resize(dims.L_p, dims.d_model);
  decoder.reserve(dims);
  hidden.resize(dims.L_v, dims.d_model);
  flow.reserve(weights.flow, dims.L_v);
}

std::size_t StepWorkspace::bytes() const {
  return observation.bytes() + step_tokens.bytes() + prefix.bytes() + decoder.bytes() +
         hidden.bytes() + flow.bytes();
}

StepOutput control_step(const Observation& obs, const PrefixCache* cache,
                        const ControllerConfig& config, const FrozenWeights& weights,
                        const EpisodeContext& context, StepWorkspace* persistent) {
  config.validate();
  const PrecisionMode mode = config.precision();
  if (weights.precision != mode) {
    throw ConfigError("weights are cast to " + std::string(to_string(weights.precision)) +
                      " but the config runs " + std::string(to_string(mode)));
  }
  if (config.use_prefix_cache && cache == nullptr) {
    throw StaleCacheError("prefix cache enabled but none was built for this episode");
  }
  const DecodeOptions options{mode, config.attention_kernel};
  const FlowConfig flow{config.flow_steps, noise_seed_for(context.episode_seed, context.step_index)};

  StepOutput out;
  const auto resident = static_cast<std::int64_t>(persistent ? persistent->bytes() : 0);
  out.metrics = time_step(
      [&](FlopCounter& counter) {
        // Eager steps pay for their own buffers; compiled steps reuse them.
        StepWorkspace local;
        if (persistent == nullptr) local.reserve(weights);
        StepWorkspace& ws = persistent ? *persistent : local;

        encode_observation_into(obs, weights, mode, &counter, ws.observation, ws.step_tokens);
        if (config.use_prefix_cache) {
          decode_cached_into(*cache, context.episode_id, ws.step_tokens, weights, options,
                             ws.decoder, &counter, ws.hidden);
        } else {
          encode_instruction_into(context.instruction, weights, mode, &counter, ws.prefix);
          decode_into(ws.prefix, ws.step_tokens, weights, options, ws.decoder, &counter,
                      ws.hidden);
        }
        out.action = flow_decode(ws.hidden, flow, weights.flow, mode, ws.flow, &counter);
      },
      resident);
  return out;
}

// ── Controller ──────────────────────────────────────────────────────────

Controller::Controller(std::shared_ptr<const FrozenWeights> base, const ControllerConfig& config)
    : base_(std::move(base)) {
  if (!base_) throw std::invalid_argument("controller needs weights");
  config.validate();
  config_ = config;
  weights_ = config.precision() == base_->precision
                 ? base_
                 : std::make_shared<const FrozenWeights>(cast_weights(*base_, config.precision()));
  if (config_.compiled) {
    workspace_ = std::make_unique<StepWorkspace>();
    workspace_->reserve(*weights_);
  }
}

void Controller::reconfigure(const ControllerConfig& config) {
  config.validate();
  const ControllerConfig previous = config_;
  config_ = config;
  const bool precision_changed = previous.precision() != config.precision();
  if (precision_changed) {
    weights_ = config.precision() == base_->precision
                   ? base_
                   : std::make_shared<const FrozenWeights>(cast_weights(*base_, config.precision()));
    cache_.reset();
  }
  if (!config.use_prefix_cache) {
    cache_.reset();
  } else if (in_episode_ && !cache_) {
    rebuild_cache();
  }
  if (config.compiled && (!workspace_ || precision_changed)) {
    workspace_ = std::make_unique<StepWorkspace>();
    workspace_->reserve(*weights_);
  } else if (!config.compiled) {
    workspace_.reset();
  }
}

void Controller::rebuild_cache() {
  const PrecisionMode mode = config_.precision();
  Tensor prefix;
  encode_instruction_into(instruction_, *weights_, mode, &setup_flops_, prefix);
  FlopCounter build;
  cache_.emplace(build_prefix_cache(prefix, *weights_, mode, episode_id_, &build));
  setup_flops_.merge(build);
  ++cache_builds_;
}

void Controller::begin_episode(std::vector<TokenId> instruction, std::uint64_t episode_id,
                               std::uint64_t episode_seed) {
  instruction_ = std::move(instruction);
  episode_id_ = episode_id;
  episode_seed_ = episode_seed;
  in_episode_ = true;
  setup_flops_.reset();
  cache_.reset();
  if (config_.use_prefix_cache) rebuild_cache();
}

StepOutput Controller::infer(const Observation& obs, std::uint64_t step_index) {
  if (!in_episode_) throw std::logic_error("infer called before begin_episode");
  const EpisodeContext context{instruction_, episode_id_, episode_seed_, step_index};
  return control_step(obs, cache(), config_, *weights_, context, workspace_.get());
}

// ── Episodes ────────────────────────────────────────────────────────────

std::vector<Vec2> EpisodeRecord::trajectory() const {
  std::vector<Vec2> out{start};
  for (const auto& s : steps) out.push_back(s.position);
  return out;
}

EpisodeRecord run_episode(Environment& env, Controller& controller, std::size_t max_steps) {
  if (max_steps < 1) throw std::invalid_argument("max_steps must be at least 1");
  EpisodeRecord record;
  record.config = controller.config();
  record.task = env.task();
  record.seed = env.seed();
  record.instruction = env.instruction();
  record.start = env.state().position;
  record.goal = env.state().goal;

  controller.begin_episode(env.instruction_tokens(), env.seed(), env.seed());
  record.setup_flops = controller.setup_flops();

  Action current;
  std::size_t remaining = 0;
  const std::size_t horizon = controller.config().rollout_horizon;
  while (env.state().step < max_steps) {
    const std::size_t step = env.state().step;
    StepRecord s;
    s.step = step;
    try {
      s.observation = env.observe();
      if (remaining == 0) {
        StepOutput out = controller.infer(s.observation, step);
        current = std::move(out.action);
        s.metrics = std::move(out.metrics);
        s.inferred = true;
        remaining = horizon;
        ++record.inference_calls;
      }
      env.step(current);
    } catch (const EpisodeError&) {
      throw;
    } catch (const std::exception& e) {
      throw EpisodeError(step, e.what());
    }
    --remaining;
    s.action = current;
    s.position = env.state().position;
    record.steps.push_back(std::move(s));
    if (env.succeeded()) break;
  }
  record.success = env.succeeded();
  return record;
}

EpisodeRecord run_episode(Environment& env, const ControllerConfig& config,
                          std::shared_ptr<const FrozenWeights> weights, std::size_t max_steps) {
  Controller controller(std::move(weights), config);
  return run_episode(env, controller, max_steps);
}

double trajectory_divergence(const EpisodeRecord& a, const EpisodeRecord& b) {
  const auto ta = a.trajectory();
  const auto tb = b.trajectory();
  const std::size_t n = std::max(ta.size(), tb.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& pa = ta[std::min(i, ta.size() - 1)];
    const Vec2& pb = tb[std::min(i, tb.size() - 1)];
    worst = std::max({worst, std::fabs(pa[0] - pb[0]), std::fabs(pa[1] - pb[1])});
  }
  return worst;
}

bool same_outcome(const EpisodeRecord& a, const EpisodeRecord& b) {
  if (!(a.config == b.config) || a.task != b.task || a.seed != b.seed ||
      a.instruction != b.instruction || a.start != b.start || a.goal != b.goal ||
      a.inference_calls != b.inference_calls || a.success != b.success ||
      a.steps.size() != b.steps.size() || !(a.setup_flops == b.setup_flops)) {
    return false;
  }
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    const StepRecord& x = a.steps[i];
    const StepRecord& y = b.steps[i];
    if (x.step != y.step || !(x.observation == y.observation) || x.action != y.action ||
        x.inferred != y.inferred || x.position != y.position ||
        !(x.metrics.flops == y.metrics.flops) || x.metrics.peak_bytes != y.metrics.peak_bytes) {
      return false;
    }
  }
  return true;
}

void write_episode_log(std::ostream& out, const EpisodeRecord& record) {
  for (const StepRecord& s : record.steps) {
    nlohmann::json line{
        {"step", s.step},
        {"position", {s.position[0], s.position[1]}},
        {"action", s.action},
        {"inferred", s.inferred},
        {"flops", s.metrics.flops.total()},
        {"peak_bytes", s.metrics.peak_bytes},
        {"latency_ms", s.metrics.latency_ms()},
    };
    out << line.dump() << '\n';
  }
}

}  // namespace deskvla
