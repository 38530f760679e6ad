#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <set>
#include <vector>

#include "copris/common.hpp"
#include "copris/policy.hpp"
#include "copris/rng.hpp"
#include "copris/trajectory.hpp"

namespace copris {

enum class SchedulingMode { Synchronous, NaivePartial, Copris };

inline const char* to_string(SchedulingMode m) {
  switch (m) {
    case SchedulingMode::Synchronous: return "synchronous";
    case SchedulingMode::NaivePartial: return "naive_partial";
    case SchedulingMode::Copris: return "copris";
  }
  return "?";
}

struct EngineConfig {
  int concurrency = 16;        // N' (copris) or the one-shot initial dispatch (naive)
  int batch_prompts = 4;       // B
  int rollouts_per_prompt = 4; // N
  int max_response_len = 8;    // H
  int max_staleness = 0;       // evict partials older than this many stages; 0 = keep forever

  int batch_size() const { return batch_prompts * rollouts_per_prompt; }

  void validate() const {
    if (concurrency < 1) throw ConfigError("engine.concurrency must be >= 1");
    if (batch_prompts < 1) throw ConfigError("engine.batch_prompts must be >= 1");
    if (rollouts_per_prompt < 1)
      throw ConfigError("engine.rollouts_per_prompt must be >= 1");
    if (max_response_len < 1) throw ConfigError("engine.max_response_len must be >= 1");
    if (max_staleness < 0) throw ConfigError("engine.max_staleness must be >= 0");
  }
};

// Per-prompt accounting: a group is done once `needed` members have
// completed, at which point it is eligible for a training batch.
struct GroupTracker {
  uint64_t group_id = 0;
  Question question;
  int needed = 0;
  int created = 0;
  int completed_count = 0;
  std::vector<uint64_t> member_ids;
  std::vector<uint64_t> completed_ids;  // completion order

  bool done() const { return completed_count == needed; }
};

enum class CompletionOutcome { GroupProgress, GroupDone, OverflowRetained };

// Completion bookkeeping, split out so the overflow rule is testable on its
// own. A completion arriving after the group already satisfied N does not
// advance the count; the trajectory is simply retained in the buffer.
inline CompletionOutcome apply_completion(GroupTracker& group, Trajectory& traj) {
  require(traj.tokens.terminated, "cannot complete an unterminated trajectory");
  traj.status = TrajStatus::BufferedComplete;
  if (group.done()) return CompletionOutcome::OverflowRetained;
  group.completed_count += 1;
  group.completed_ids.push_back(traj.traj_id);
  return group.done() ? CompletionOutcome::GroupDone : CompletionOutcome::GroupProgress;
}

struct TrainBatch {
  struct Group {
    uint64_t group_id = 0;
    Question question;
    std::vector<Trajectory> members;  // ascending traj_id
  };
  std::vector<Group> groups;
  uint64_t rollout_version = 0;  // policy version of the stage that formed the batch

  size_t total_tokens() const {
    size_t n = 0;
    for (const auto& g : groups)
      for (const auto& t : g.members) n += t.token_count();
    return n;
  }
  size_t total_trajectories() const {
    size_t n = 0;
    for (const auto& g : groups) n += g.members.size();
    return n;
  }
};

// Fraction of batch tokens generated under a policy version older than the
// rollout stage that produced the batch.
inline double offpolicy_token_fraction(const TrainBatch& batch, uint64_t current_version) {
  size_t old_tokens = 0, total = 0;
  for (const auto& g : batch.groups) {
    for (const auto& t : g.members) {
      for (const auto& seg : t.segments) {
        total += seg.logprobs.size();
        if (seg.policy_version < current_version) old_tokens += seg.logprobs.size();
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(old_tokens) / static_cast<double>(total);
}

/**
 * Rollout lifecycle manager.
 *
 * Deterministic single-writer state machine driven by an ordered event
 * stream: admissions, token appends and completions. It owns every live
 * trajectory, tracks groups, forms training batches at early termination and
 * keeps the cross-stage buffer of partial trajectories plus completed
 * members of still-active groups.
 *
 * Admission priority: buffered partials strictly before fresh prompts, FIFO
 * in buffering order. Fresh prompts fill the earliest group that still needs
 * members, opening a new group (one question draw) when none is open.
 */
class RolloutEngine {
 public:
  RolloutEngine(EngineConfig cfg, SchedulingMode mode, PolicyShape shape,
                RngStream prompt_rng)
      : cfg_(cfg), mode_(mode), shape_(shape), prompt_rng_(prompt_rng) {
    cfg_.validate();
    shape_.validate();
    if (mode_ == SchedulingMode::NaivePartial && cfg_.concurrency < cfg_.batch_size())
      throw ConfigError(
          "naive_partial initial dispatch (engine.concurrency) must be >= B*N");
  }

  // Starts a rollout stage under the given policy version and admits the
  // initial wave. Returns the admitted trajectory ids in admission order.
  std::vector<uint64_t> begin_stage(uint64_t policy_version) {
    require(in_flight_.empty(), "previous stage still has in-flight trajectories");
    stage_version_ = policy_version;
    if (cfg_.max_staleness > 0) evict_stale();
    return admit_up_to(stage_target());
  }

  // Mid-stage refill after a completion freed a slot. Only the copris mode
  // re-dispatches during a stage.
  std::vector<uint64_t> refill_active() {
    if (mode_ != SchedulingMode::Copris) return {};
    return admit_up_to(cfg_.concurrency);
  }

  // Appends one generated token with its sampling-time log-prob. Opens a new
  // segment when the policy version changed since the trajectory's last token.
  void append_token(uint64_t traj_id, int token, double logprob) {
    Trajectory& t = traj_mut(traj_id);
    require(t.status == TrajStatus::InFlight, "append_token on non-in-flight trajectory");
    require(!t.tokens.terminated, "append_token on terminated trajectory");
    require(static_cast<int>(t.token_count()) < cfg_.max_response_len,
            "append_token beyond max response length");
    require(token >= 0 && token < shape_.vocab, "token out of vocabulary");
    t.tokens.tokens.push_back(token);
    if (t.segments.empty() || t.segments.back().policy_version != stage_version_)
      t.segments.push_back(LogProbSegment{stage_version_, {}});
    t.segments.back().logprobs.push_back(logprob);
    if (token == shape_.eos_token() ||
        static_cast<int>(t.token_count()) == cfg_.max_response_len)
      t.tokens.terminated = true;
  }

  // Registers a terminated trajectory with its group. Returns true when B
  // groups are now done and the stage must halt.
  bool complete_trajectory(uint64_t traj_id) {
    Trajectory& t = traj_mut(traj_id);
    require(t.status == TrajStatus::InFlight,
            "complete_trajectory on non-in-flight trajectory (double completion?)");
    in_flight_.erase(traj_id);
    GroupTracker& g = group_mut(t.group_id);
    if (apply_completion(g, t) == CompletionOutcome::GroupDone)
      done_queue_.push_back(g.group_id);
    return batch_ready();
  }

  bool batch_ready() const {
    return static_cast<int>(done_queue_.size()) >= cfg_.batch_prompts;
  }

  /**
   * Halts the stage: the B done groups become the training batch (completion
   * order, or group id order in synchronous mode) and every in-flight
   * trajectory moves to the partial buffer with its segments intact.
   */
  TrainBatch early_terminate() {
    require(batch_ready(), "early_terminate before B groups are done");
    TrainBatch batch;
    batch.rollout_version = stage_version_;
    std::vector<uint64_t> order(done_queue_.begin(),
                                done_queue_.begin() + cfg_.batch_prompts);
    if (mode_ == SchedulingMode::Synchronous) std::sort(order.begin(), order.end());
    for (uint64_t gid : order) {
      GroupTracker& g = group_mut(gid);
      TrainBatch::Group out;
      out.group_id = gid;
      out.question = g.question;
      std::vector<uint64_t> members(g.completed_ids.begin(), g.completed_ids.end());
      std::sort(members.begin(), members.end());
      for (uint64_t id : members) {
        Trajectory& t = traj_mut(id);
        t.status = TrajStatus::Consumed;
        consumed_ids_.push_back(id);
        out.members.push_back(std::move(t));
        storage_.erase(id);
      }
      batch.groups.push_back(std::move(out));
      groups_.erase(gid);
    }
    done_queue_.clear();
    // in_flight_ is an ordered set, so partials enter the resume queue in
    // ascending id order.
    for (uint64_t id : in_flight_) {
      Trajectory& t = traj_mut(id);
      t.status = TrajStatus::BufferedPartial;
      resume_queue_.push_back(id);
    }
    in_flight_.clear();
    return batch;
  }

  // ---- queries ----

  const Trajectory& trajectory(uint64_t id) const {
    auto it = storage_.find(id);
    require(it != storage_.end(), "unknown trajectory id");
    return it->second;
  }
  const GroupTracker& group(uint64_t id) const {
    auto it = groups_.find(id);
    require(it != groups_.end(), "unknown group id");
    return it->second;
  }

  size_t in_flight_count() const { return in_flight_.size(); }
  size_t buffered_partial_count() const { return resume_queue_.size(); }
  size_t buffered_complete_count() const {
    size_t n = 0;
    for (const auto& [id, t] : storage_)
      if (t.status == TrajStatus::BufferedComplete) ++n;
    return n;
  }
  uint64_t stage_version() const { return stage_version_; }
  uint64_t total_admitted() const { return next_traj_id_; }
  const std::vector<uint64_t>& consumed_ids() const { return consumed_ids_; }
  const std::vector<uint64_t>& evicted_ids() const { return evicted_ids_; }
  const std::set<uint64_t>& in_flight_ids() const { return in_flight_; }

  std::vector<uint64_t> buffered_ids() const {
    std::vector<uint64_t> out;
    for (const auto& [id, t] : storage_)
      if (t.status != TrajStatus::InFlight) out.push_back(id);
    return out;
  }

  // Tokens generated during the stage at `version` by trajectories that are
  // still buffered. These are the tokens whose stored log-probs must be
  // captured before the policy updates.
  size_t stage_tokens_in_buffer(uint64_t version) const {
    size_t n = 0;
    for (const auto& [id, t] : storage_) {
      if (t.status == TrajStatus::InFlight) continue;
      if (!t.segments.empty() && t.segments.back().policy_version == version)
        n += t.segments.back().logprobs.size();
    }
    return n;
  }

  void check_invariants() const {
    for (const auto& [id, t] : storage_) t.check_invariants();
    for (const auto& [gid, g] : groups_) {
      require(g.completed_count <= g.needed, "group completed beyond needed");
      require(g.created <= g.needed, "group created beyond needed");
    }
  }

 private:
  int stage_target() const {
    switch (mode_) {
      case SchedulingMode::Synchronous: return cfg_.batch_size();
      case SchedulingMode::NaivePartial: return cfg_.concurrency;
      case SchedulingMode::Copris: return cfg_.concurrency;
    }
    return cfg_.concurrency;
  }

  Trajectory& traj_mut(uint64_t id) {
    auto it = storage_.find(id);
    require(it != storage_.end(), "unknown trajectory id");
    return it->second;
  }
  GroupTracker& group_mut(uint64_t id) {
    auto it = groups_.find(id);
    require(it != groups_.end(), "unknown group id");
    return it->second;
  }

  std::vector<uint64_t> admit_up_to(int target) {
    std::vector<uint64_t> admitted;
    while (static_cast<int>(in_flight_.size()) < target) {
      if (!resume_queue_.empty()) {
        uint64_t id = resume_queue_.front();
        resume_queue_.pop_front();
        Trajectory& t = traj_mut(id);
        t.status = TrajStatus::InFlight;
        in_flight_.insert(id);
        admitted.push_back(id);
        continue;
      }
      admitted.push_back(admit_fresh());
    }
    return admitted;
  }

  uint64_t admit_fresh() {
    if (open_groups_.empty()) {
      uint64_t gid = next_group_id_++;
      int cls = static_cast<int>(prompt_rng_.uniform_int(shape_.num_classes));
      GroupTracker g;
      g.group_id = gid;
      g.question = Question::from_class(cls, shape_);
      g.needed = cfg_.rollouts_per_prompt;
      groups_.emplace(gid, std::move(g));
      open_groups_.insert(gid);
    }
    uint64_t gid = *open_groups_.begin();
    GroupTracker& g = group_mut(gid);
    uint64_t id = next_traj_id_++;
    Trajectory t;
    t.traj_id = id;
    t.group_id = gid;
    t.question = g.question;
    t.created_version = stage_version_;
    storage_.emplace(id, std::move(t));
    g.member_ids.push_back(id);
    g.created += 1;
    if (g.created == g.needed) open_groups_.erase(gid);
    in_flight_.insert(id);
    return id;
  }

  void evict_stale() {
    std::deque<uint64_t> kept;
    for (uint64_t id : resume_queue_) {
      const Trajectory& t = traj_mut(id);
      uint64_t last = t.segments.empty() ? t.created_version
                                         : t.segments.back().policy_version;
      if (stage_version_ - last > static_cast<uint64_t>(cfg_.max_staleness)) {
        GroupTracker& g = group_mut(t.group_id);
        g.created -= 1;
        std::erase(g.member_ids, id);
        open_groups_.insert(t.group_id);
        evicted_ids_.push_back(id);
        storage_.erase(id);
      } else {
        kept.push_back(id);
      }
    }
    resume_queue_ = std::move(kept);
  }

  EngineConfig cfg_;
  SchedulingMode mode_;
  PolicyShape shape_;
  RngStream prompt_rng_;

  uint64_t stage_version_ = 0;
  uint64_t next_traj_id_ = 0;
  uint64_t next_group_id_ = 0;

  std::map<uint64_t, Trajectory> storage_;
  std::map<uint64_t, GroupTracker> groups_;
  std::set<uint64_t> in_flight_;
  std::set<uint64_t> open_groups_;       // groups with created < needed
  std::deque<uint64_t> resume_queue_;    // buffered partials, FIFO
  std::vector<uint64_t> done_queue_;     // groups done, completion order
  std::vector<uint64_t> consumed_ids_;
  std::vector<uint64_t> evicted_ids_;
};

}  // namespace copris
