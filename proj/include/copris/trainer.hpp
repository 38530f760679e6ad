#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "copris/cluster.hpp"
#include "copris/common.hpp"
#include "copris/grpo.hpp"
#include "copris/metrics.hpp"
#include "copris/policy.hpp"
#include "copris/rng.hpp"
#include "copris/rollout.hpp"
#include "copris/stage.hpp"

namespace copris {

struct RunConfig {
  SchedulingMode mode = SchedulingMode::Copris;
  bool is_enabled = true;
  EngineConfig engine;
  PolicyShape policy;
  ClusterConfig cluster;
  LengthModel length_model;
  ClipConfig clip;
  AdamConfig adam;
  int total_steps = 200;
  uint64_t seed = 1;
  int eval_every = 20;  // 0 disables periodic evaluation

  void validate() const {
    engine.validate();
    policy.validate();
    cluster.validate(engine.max_response_len);
    length_model.validate();
    clip.validate();
    adam.validate();
    if (policy.horizon != engine.max_response_len)
      throw ConfigError("policy horizon must equal engine.max_response_len");
    if (engine.rollouts_per_prompt < 2)
      throw ConfigError("engine.rollouts_per_prompt must be >= 2 for group advantages");
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  }
};

struct EvalRecord {
  int step = 0;
  double mean_reward = 0.0;
};

struct RunRecord {
  RunConfig config;
  std::vector<StepMetrics> steps;
  std::vector<EvalRecord> evals;
  double final_greedy_reward = 0.0;
  uint64_t final_version = 0;
  std::string checkpoint_ref;

  double mean_effective_throughput() const {
    double samples = 0.0, time = 0.0;
    for (const auto& s : steps) {
      samples += s.samples_consumed;
      time += s.step_time;
    }
    return time > 0.0 ? samples / time : 0.0;
  }
};

// Greedy (argmax) rollout, used for evaluation only. Consumes no randomness.
inline Trajectory greedy_rollout(const PolicyParams& params, const Question& q) {
  Trajectory t;
  t.question = q;
  for (int pos = 0; pos < params.shape.horizon; ++pos) {
    int tok = greedy_token(params, q, pos);
    t.tokens.tokens.push_back(tok);
    if (tok == params.shape.eos_token()) break;
  }
  t.tokens.terminated = true;
  return t;
}

// Mean terminal reward of greedy decoding over the whole question set.
inline double greedy_eval(const PolicyParams& params) {
  double sum = 0.0;
  for (int c = 0; c < params.shape.num_classes; ++c) {
    Question q = Question::from_class(c, params.shape);
    sum += terminal_reward(greedy_rollout(params, q), q, params.shape.eos_token());
  }
  return sum / static_cast<double>(params.shape.num_classes);
}

/**
 * Orchestrates the training loop: rollout under the configured scheduling
 * mode, terminal rewards, current-policy log-prob recomputation, GRPO update
 * and version bump. Strictly sequential; one instance per run.
 */
class Trainer {
 public:
  explicit Trainer(RunConfig cfg, std::vector<SimEvent>* trace = nullptr,
                   bool check_invariants = false)
      : cfg_(std::move(cfg)),
        init_rng_(cfg_.seed, "init"),
        params_(make_params()),
        adam_(cfg_.adam),
        engine_(cfg_.engine, cfg_.mode, cfg_.policy, RngStream(cfg_.seed, "prompt")),
        cluster_(cfg_.cluster, cfg_.engine.max_response_len, trace),
        check_invariants_(check_invariants) {
    if (cfg_.clip.kl_coeff > 0.0) reference_ = snapshot(params_);
  }

  // Inspection hook, invoked with the formed batch and aligned loss items
  // just before the optimizer update.
  using Inspector = std::function<void(const TrainBatch&, const std::vector<GrpoItem>&)>;
  void set_inspector(Inspector fn) { inspector_ = std::move(fn); }

  StepMetrics train_step() {
    StageContext sctx;
    sctx.seed = cfg_.seed;
    sctx.length_model = cfg_.length_model;
    sctx.token_streams = &token_streams_;
    sctx.check_invariants = check_invariants_;
    if (cfg_.mode == SchedulingMode::Copris) sctx.expected_in_flight = cfg_.engine.concurrency;
    StageResult stage = run_stage(params_, engine_, cluster_, sctx);
    drop_evicted_streams();

    const TrainBatch& batch = stage.batch;
    const int eos = cfg_.policy.eos_token();

    std::vector<GrpoItem> items;
    items.reserve(batch.total_trajectories());
    double reward_sum = 0.0;
    for (const auto& g : batch.groups) {
      std::vector<double> rewards;
      rewards.reserve(g.members.size());
      for (const auto& m : g.members) rewards.push_back(terminal_reward(m, g.question, eos));
      std::vector<double> adv = compute_advantages(rewards, cfg_.clip.adv_epsilon);
      for (size_t i = 0; i < g.members.size(); ++i) {
        reward_sum += rewards[i];
        GrpoItem item;
        item.traj = &g.members[i];
        item.advantage = adv[i];
        item.current_lp = sequence_logprobs(params_, g.question, g.members[i].tokens);
        // w/o IS: pseudo on-policy, stored side overwritten by the current
        // policy so every ratio is exactly 1.
        item.stored_lp = cfg_.is_enabled ? concat_segments(g.members[i]) : item.current_lp;
        if (reference_)
          item.ref_lp = sequence_logprobs(*reference_, g.question, g.members[i].tokens);
        items.push_back(std::move(item));
      }
    }

    StepMetrics m;
    m.step = step_index_;
    m.rollout_time = stage.rollout_time;
    // Current-policy recompute over the batch plus stored-side capture for
    // tokens this stage left behind in the buffer.
    m.logprob_time = account_logprob_recompute(batch, cfg_.cluster.prefill_cost) +
                     cfg_.cluster.prefill_cost * static_cast<double>(stage.buffer_capture_tokens);
    m.step_time = m.rollout_time + m.logprob_time;
    m.worker_busy_fraction = stage.busy_fractions;
    m.samples_consumed = static_cast<int>(batch.total_trajectories());
    m.effective_throughput = m.step_time > 0.0 ? m.samples_consumed / m.step_time : 0.0;
    m.offpolicy_token_fraction = offpolicy_token_fraction(batch, batch.rollout_version);
    m.mean_reward = reward_sum / static_cast<double>(batch.total_trajectories());
    m.mean_entropy = batch_mean_entropy(batch);
    m.recompute_overhead = stage.recompute_overhead;
    m.batch_tokens = batch.total_tokens();
    m.buffered_partials = stage.buffered_partials;

    if (inspector_) inspector_(batch, items);

    GrpoStepResult res = grpo_step_loss(params_, items, cfg_.clip);
    m.loss = res.loss;
    adam_.update(params_, res.grad);
    step_index_ += 1;
    return m;
  }

  double evaluate() const { return greedy_eval(params_); }

  const PolicyParams& params() const { return params_; }
  const RolloutEngine& engine() const { return engine_; }
  const ClusterSim& cluster() const { return cluster_; }
  const RunConfig& config() const { return cfg_; }
  int steps_done() const { return step_index_; }

 private:
  PolicyParams make_params() {
    cfg_.validate();
    return PolicyParams::init_near_uniform(cfg_.policy, init_rng_);
  }

  double batch_mean_entropy(const TrainBatch& batch) const {
    double h = 0.0;
    size_t n = 0;
    for (const auto& g : batch.groups) {
      for (const auto& t : g.members) {
        for (size_t pos = 0; pos < t.token_count(); ++pos) {
          h += policy_entropy(params_, g.question, static_cast<int>(pos));
          ++n;
        }
      }
    }
    return n > 0 ? h / static_cast<double>(n) : 0.0;
  }

  void drop_evicted_streams() {
    const auto& ev = engine_.evicted_ids();
    for (; evicted_seen_ < ev.size(); ++evicted_seen_) token_streams_.erase(ev[evicted_seen_]);
  }

  RunConfig cfg_;
  RngStream init_rng_;
  PolicyParams params_;
  AdamOptimizer adam_;
  RolloutEngine engine_;
  ClusterSim cluster_;
  std::map<uint64_t, RngStream> token_streams_;
  std::optional<PolicyParams> reference_;
  Inspector inspector_;
  bool check_invariants_ = false;
  int step_index_ = 0;
  size_t evicted_seen_ = 0;
};

// Full experiment: total_steps training steps with periodic greedy
// evaluation on the held-out question set.
inline RunRecord run_experiment(const RunConfig& cfg, std::vector<SimEvent>* trace = nullptr,
                                bool check_invariants = false) {
  Trainer trainer(cfg, trace, check_invariants);
  RunRecord rec;
  rec.config = cfg;
  for (int s = 0; s < cfg.total_steps; ++s) {
    rec.steps.push_back(trainer.train_step());
    if (cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0)
      rec.evals.push_back({s + 1, trainer.evaluate()});
  }
  rec.final_greedy_reward = trainer.evaluate();
  rec.final_version = trainer.params().version;
  return rec;
}

// Runs the training pipeline under one scheduling mode and returns the
// per-step metrics. Throughput studies use this with lognormal lengths; the
// update step still runs so policy versions advance exactly as in training.
inline std::vector<StepMetrics> run_mode(SchedulingMode mode, RunConfig cfg, int steps) {
  cfg.mode = mode;
  cfg.total_steps = steps;
  cfg.eval_every = 0;
  return run_experiment(cfg).steps;
}

enum class AblationAxis { Concurrency, IS, Mode };

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::Concurrency: return "concurrency";
    case AblationAxis::IS: return "is";
    case AblationAxis::Mode: return "mode";
  }
  return "?";
}

inline RunConfig apply_axis_value(RunConfig cfg, AblationAxis axis, const std::string& value) {
  if (axis == AblationAxis::Concurrency) {
    int n = 0;
    try {
      n = std::stoi(value);
    } catch (const std::exception&) {
      throw ConfigError("concurrency value is not an integer: " + value);
    }
    cfg.engine.concurrency = n;
  } else if (axis == AblationAxis::IS) {
    if (value == "on")
      cfg.is_enabled = true;
    else if (value == "off")
      cfg.is_enabled = false;
    else
      throw ConfigError("is value must be on or off, got: " + value);
  } else {
    if (value == "synchronous")
      cfg.mode = SchedulingMode::Synchronous;
    else if (value == "naive_partial")
      cfg.mode = SchedulingMode::NaivePartial;
    else if (value == "copris")
      cfg.mode = SchedulingMode::Copris;
    else
      throw ConfigError("unknown mode: " + value);
  }
  return cfg;
}

// One run per axis value, all sharing the base seed so runs differ only on
// the swept axis.
inline std::vector<RunRecord> ablation_sweep(const RunConfig& base, AblationAxis axis,
                                             const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablation requires at least one axis value");
  std::vector<RunRecord> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(run_experiment(apply_axis_value(base, axis, v)));
  return out;
}

}  // namespace copris
