#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "copris/cluster.hpp"
#include "copris/common.hpp"
#include "copris/policy.hpp"
#include "copris/rng.hpp"
#include "copris/rollout.hpp"

namespace copris {

struct StageContext {
  uint64_t seed = 0;
  LengthModel length_model;
  // Per-trajectory token streams, owned by the caller so suspended
  // trajectories keep their stream state across stages.
  std::map<uint64_t, RngStream>* token_streams = nullptr;
  bool check_invariants = false;
  // set when check_invariants is on and the mode keeps a fixed concurrency
  int expected_in_flight = 0;
};

struct StageResult {
  TrainBatch batch;
  double rollout_time = 0.0;
  std::vector<double> busy_fractions;
  double recompute_overhead = 0.0;   // preemption re-prefill cost this stage
  uint64_t buffer_capture_tokens = 0;  // stage tokens left in the buffer at halt
  uint64_t buffered_partials = 0;
};

namespace detail {

// Synthetic token for lognormal mode: fillers up to the pre-drawn length,
// EOS when the length ends before the horizon. Uses an answer token as
// filler when the vocabulary has no dedicated fillers.
inline int synthetic_token(const PolicyShape& shape, int pos, int length, int horizon) {
  int filler = shape.vocab > shape.answer_vocab + 1 ? shape.first_filler() : 0;
  if (pos == length - 1 && length < horizon) return shape.eos_token();
  return filler;
}

}  // namespace detail

/**
 * Runs one rollout stage to batch formation: admissions, decode events,
 * completions and refills, then early termination. The policy is read-only
 * for the whole stage.
 */
inline StageResult run_stage(const PolicyParams& params, RolloutEngine& engine,
                             ClusterSim& cluster, const StageContext& ctx) {
  require(ctx.token_streams != nullptr, "stage context needs a token stream map");
  const PolicyShape& shape = params.shape;
  const int horizon = shape.horizon;
  const int prompt_len = cluster.config().prompt_len;
  const double overhead_before = cluster.recompute_overhead();

  cluster.begin_stage(params.version);
  auto admit = [&](uint64_t id) {
    const Trajectory& t = engine.trajectory(id);
    if (ctx.length_model.mode == LengthMode::PolicyDriven)
      ctx.token_streams->emplace(id, RngStream(ctx.seed, "token", id));
    cluster.assign_request(id, prompt_len + static_cast<long>(t.token_count()));
  };
  for (uint64_t id : engine.begin_stage(params.version)) admit(id);

  StageResult out;
  std::vector<double> probs(shape.vocab);
  while (true) {
    if (!cluster.has_events())
      throw ConfigError("rollout stalled before a full batch completed");
    SimEvent ev = cluster.advance();
    if (ev.kind != SimEventKind::DecodeTick) continue;

    uint64_t id = ev.traj_id;
    const Trajectory& traj = engine.trajectory(id);
    int pos = static_cast<int>(traj.token_count());
    int token;
    double logprob;
    if (ctx.length_model.mode == LengthMode::PolicyDriven) {
      SampledToken s = sample_token(params, traj.question, pos, ctx.token_streams->at(id));
      token = s.token;
      logprob = s.logprob;
    } else {
      int len = drawn_length(ctx.seed, id, ctx.length_model, horizon);
      token = detail::synthetic_token(shape, pos, len, horizon);
      token_distribution_into(params, traj.question, pos, probs);
      logprob = std::log(probs[token]);
    }
    engine.append_token(id, token, logprob);

    if (engine.trajectory(id).tokens.terminated) {
      cluster.finish_request(id);
      if (engine.complete_trajectory(id)) {
        out.rollout_time = cluster.now() - cluster.stage_start();
        cluster.halt_stage();
        out.batch = engine.early_terminate();
        break;
      }
      for (uint64_t rid : engine.refill_active()) admit(rid);
    } else {
      cluster.decode_applied(id);
    }
    if (ctx.check_invariants) {
      engine.check_invariants();
      cluster.check_invariants();
      // fixed-concurrency modes hold N' in flight at every event boundary
      require(ctx.expected_in_flight == 0 ||
                  static_cast<int>(engine.in_flight_count()) == ctx.expected_in_flight,
              "in-flight count drifted from the concurrency target");
    }
  }

  out.busy_fractions = cluster.stage_busy_fractions();
  out.recompute_overhead = cluster.recompute_overhead() - overhead_before;
  out.buffer_capture_tokens = engine.stage_tokens_in_buffer(params.version);
  out.buffered_partials = engine.buffered_partial_count();
  for (const auto& g : out.batch.groups)
    for (const auto& m : g.members) ctx.token_streams->erase(m.traj_id);
  return out;
}

}  // namespace copris
