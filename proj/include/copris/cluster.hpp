#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <queue>
#include <vector>

#include "copris/common.hpp"
#include "copris/rng.hpp"
#include "copris/rollout.hpp"

namespace copris {

struct WorkerModel {
  int worker_id = 0;
  double decode_cost_per_token = 1.0;
  double prefill_cost_per_token = 0.05;
  long memory_capacity = 4096;  // context tokens resident at once
};

struct ClusterConfig {
  int num_workers = 4;
  double decode_cost = 1.0;
  double prefill_cost = 0.05;
  long memory_capacity = 4096;
  int prompt_len = 8;

  void validate(int max_response_len) const {
    if (num_workers < 1) throw ConfigError("cluster.workers must be >= 1");
    if (decode_cost <= 0.0) throw ConfigError("cluster.decode_cost must be > 0");
    if (prefill_cost <= 0.0) throw ConfigError("cluster.prefill_cost must be > 0");
    if (prompt_len < 1) throw ConfigError("cluster.prompt_len must be >= 1");
    if (memory_capacity < prompt_len + max_response_len)
      throw ConfigError(
          "cluster.memory_capacity must be >= prompt_len + max_response_len");
  }
};

enum class LengthMode { PolicyDriven, Lognormal };

// Response-length law for the simulator. In policy_driven mode lengths emerge
// from the policy's EOS probabilities; in lognormal mode each trajectory gets
// a pre-drawn length producing the heavy right tail.
struct LengthModel {
  LengthMode mode = LengthMode::PolicyDriven;
  double mu = 5.0;
  double sigma = 1.0;

  void validate() const {
    if (sigma < 0.0) throw ConfigError("length_model.sigma must be >= 0");
  }
};

// Pre-drawn response length for a trajectory, stateless in traj_id.
inline int drawn_length(uint64_t seed, uint64_t traj_id, const LengthModel& lm,
                        int max_response_len) {
  RngStream rng(seed, "length", traj_id);
  double x = rng.lognormal(lm.mu, lm.sigma);
  long n = std::lround(x);
  if (n < 1) n = 1;
  if (n > max_response_len) n = max_response_len;
  return static_cast<int>(n);
}

enum class SimEventKind {
  Assign,
  PrefillDone,
  Reprefill,  // prefill completion after a preemption
  DecodeTick,
  RequestDone,
  Preempt,
  StageHalt,
};

inline const char* to_string(SimEventKind k) {
  switch (k) {
    case SimEventKind::Assign: return "assign";
    case SimEventKind::PrefillDone: return "prefill_done";
    case SimEventKind::Reprefill: return "reprefill_done";
    case SimEventKind::DecodeTick: return "decode_tick";
    case SimEventKind::RequestDone: return "request_done";
    case SimEventKind::Preempt: return "preempt";
    case SimEventKind::StageHalt: return "stage_halt";
  }
  return "?";
}

struct SimEvent {
  double time = 0.0;
  SimEventKind kind = SimEventKind::DecodeTick;
  uint64_t traj_id = 0;
  int worker_id = -1;
  uint64_t version = 0;

  bool operator==(const SimEvent&) const = default;
};

/**
 * Discrete-event model of an inference cluster.
 *
 * Each worker is a serial resource: it runs one prefill job or one decode
 * tick at a time. Resident decode requests share the worker in round-robin
 * one-token ticks. Admission and resumption pay prefill for the full current
 * context. When resident context exceeds memory capacity the longest-context
 * request is preempted; it waits with its KV dropped and pays a full
 * re-prefill once memory frees up.
 *
 * Drive pattern: after advance() returns a DecodeTick the caller must apply
 * the token and then call exactly one of decode_applied() or
 * finish_request(); other event kinds are handled internally.
 */
class ClusterSim {
 public:
  ClusterSim(ClusterConfig cfg, int max_response_len, std::vector<SimEvent>* trace = nullptr)
      : cfg_(cfg), trace_(trace) {
    cfg_.validate(max_response_len);
    workers_.resize(cfg_.num_workers);
    for (int i = 0; i < cfg_.num_workers; ++i) workers_[i].id = i;
  }

  void begin_stage(uint64_t stage_version) {
    for (auto& w : workers_) {
      require(w.prefill_q.empty() && w.rotation.empty() && w.waiting.empty(),
              "begin_stage with residual requests");
      w.busy_accum = 0.0;
    }
    stage_version_ = stage_version;
    stage_start_ = now_;
  }

  // Places a request on the least-occupied worker (ties by worker id) and
  // queues its context prefill. Returns the worker id.
  int assign_request(uint64_t traj_id, long context_tokens) {
    int best = 0;
    for (int i = 1; i < cfg_.num_workers; ++i)
      if (workers_[i].occupancy < workers_[best].occupancy) best = i;
    Worker& w = workers_[best];
    requests_.emplace(traj_id, Request{best, context_tokens, false, 0});
    w.occupancy += context_tokens;
    w.prefill_q.push_back(traj_id);
    record(SimEventKind::Assign, traj_id, best);
    pressure_check(w);
    if (!w.working) schedule(w);
    return best;
  }

  bool has_events() {
    prune_stale();
    return !heap_.empty();
  }

  // Pops and applies exactly one event. The virtual clock never decreases.
  SimEvent advance() {
    prune_stale();
    require(!heap_.empty(), "advance on an empty event queue");
    HeapEntry e = heap_.top();
    heap_.pop();
    Worker& w = workers_[e.worker];
    now_ = e.time;
    w.busy_accum += now_ - w.work_start;
    w.working = false;
    if (w.cur_kind == WorkKind::Prefill) {
      uint64_t id = w.prefill_q.front();
      w.prefill_q.pop_front();
      Request& r = req(id);
      SimEventKind kind =
          r.pending_reprefill ? SimEventKind::Reprefill : SimEventKind::PrefillDone;
      r.pending_reprefill = false;
      w.rotation.push_back(id);
      record(kind, id, w.id);
      schedule(w);
      return SimEvent{now_, kind, id, w.id, stage_version_};
    }
    // Decode tick: the front-of-rotation request produced one token at now_.
    uint64_t id = w.rotation.front();
    record(SimEventKind::DecodeTick, id, w.id);
    return SimEvent{now_, SimEventKind::DecodeTick, id, w.id, stage_version_};
  }

  // The decoded token was appended and the request continues.
  void decode_applied(uint64_t traj_id) {
    Request& r = req(traj_id);
    Worker& w = workers_[r.worker];
    require(!w.rotation.empty() && w.rotation.front() == traj_id,
            "decode_applied out of order");
    w.rotation.pop_front();
    w.rotation.push_back(traj_id);
    r.ctx += 1;
    w.occupancy += 1;
    pressure_check(w);
    if (!w.working) schedule(w);
  }

  // The decoded token terminated the request; frees its memory and lets
  // waiting preempted requests back in.
  void finish_request(uint64_t traj_id) {
    Request& r = req(traj_id);
    Worker& w = workers_[r.worker];
    require(!w.rotation.empty() && w.rotation.front() == traj_id,
            "finish_request out of order");
    w.rotation.pop_front();
    w.occupancy -= r.ctx;
    requests_.erase(traj_id);
    record(SimEventKind::RequestDone, traj_id, w.id);
    requeue_waiters(w);
    if (!w.working) schedule(w);
  }

  // Freezes all generation. Residual requests are dropped; their KV is gone,
  // so resumption in a later stage re-pays the full context prefill.
  void halt_stage() {
    for (auto& w : workers_) {
      if (w.working) {
        w.busy_accum += now_ - w.work_start;
        w.working = false;
      }
      w.epoch += 1;
      w.prefill_q.clear();
      w.rotation.clear();
      w.waiting.clear();
      w.occupancy = 0;
    }
    requests_.clear();
    while (!heap_.empty()) heap_.pop();
    record(SimEventKind::StageHalt, 0, -1);
  }

  double now() const { return now_; }
  double stage_start() const { return stage_start_; }
  double recompute_overhead() const { return recompute_overhead_; }
  uint64_t preemption_count() const { return preempt_count_; }

  std::vector<double> stage_busy_fractions() const {
    double span = now_ - stage_start_;
    std::vector<double> out;
    out.reserve(workers_.size());
    for (const auto& w : workers_) {
      double cur = w.working ? now_ - w.work_start : 0.0;
      out.push_back(span > 0.0 ? (w.busy_accum + cur) / span : 0.0);
    }
    return out;
  }

  long worker_occupancy(int worker) const { return workers_.at(worker).occupancy; }
  const WorkerModel worker_model(int worker) const {
    return WorkerModel{worker, cfg_.decode_cost, cfg_.prefill_cost, cfg_.memory_capacity};
  }
  const ClusterConfig& config() const { return cfg_; }

  // Memory safety: resident context per worker never exceeds capacity, and
  // the occupancy counters match the resident requests.
  void check_invariants() const {
    for (const auto& w : workers_) {
      long sum = 0;
      for (uint64_t id : w.prefill_q) sum += requests_.at(id).ctx;
      for (uint64_t id : w.rotation) sum += requests_.at(id).ctx;
      require(sum == w.occupancy, "occupancy counter out of sync");
      require(w.occupancy <= cfg_.memory_capacity, "worker over memory capacity");
    }
  }

 private:
  enum class WorkKind { Prefill, Decode };

  struct Request {
    int worker = 0;
    long ctx = 0;           // prompt + generated tokens
    bool ran = false;       // some work started; a preemption now wastes it
    bool pending_reprefill = false;
  };

  struct Worker {
    int id = 0;
    std::deque<uint64_t> prefill_q;
    std::deque<uint64_t> rotation;
    std::deque<uint64_t> waiting;  // preempted, FIFO
    long occupancy = 0;
    double busy_accum = 0.0;
    double work_start = 0.0;
    bool working = false;
    WorkKind cur_kind = WorkKind::Decode;
    uint64_t cur_traj = 0;
    uint64_t epoch = 0;
  };

  struct HeapEntry {
    double time;
    int worker;
    uint64_t epoch;
    bool operator>(const HeapEntry& o) const {
      if (time != o.time) return time > o.time;
      return worker > o.worker;
    }
  };

  Request& req(uint64_t id) {
    auto it = requests_.find(id);
    require(it != requests_.end(), "unknown request id");
    return it->second;
  }

  void record(SimEventKind kind, uint64_t traj, int worker) {
    if (trace_) trace_->push_back(SimEvent{now_, kind, traj, worker, stage_version_});
  }

  void schedule(Worker& w) {
    if (w.working) return;
    double dur;
    if (!w.prefill_q.empty()) {
      uint64_t id = w.prefill_q.front();
      Request& r = req(id);
      r.ran = true;
      dur = static_cast<double>(r.ctx) * cfg_.prefill_cost;
      w.cur_kind = WorkKind::Prefill;
      w.cur_traj = id;
    } else if (!w.rotation.empty()) {
      w.cur_kind = WorkKind::Decode;
      w.cur_traj = w.rotation.front();
      dur = cfg_.decode_cost;
    } else {
      return;  // idle
    }
    w.working = true;
    w.work_start = now_;
    heap_.push(HeapEntry{now_ + dur, w.id, w.epoch});
  }

  void prune_stale() {
    while (!heap_.empty() && heap_.top().epoch != workers_[heap_.top().worker].epoch)
      heap_.pop();
  }

  // Preempts longest-context requests until the worker fits in memory again.
  // A single request always fits (capacity >= prompt + horizon), so at least
  // one resident survives.
  void pressure_check(Worker& w) {
    while (w.occupancy > cfg_.memory_capacity) {
      uint64_t victim = 0;
      long victim_ctx = -1;
      bool found = false;
      auto consider = [&](uint64_t id) {
        long c = req(id).ctx;
        if (c > victim_ctx || (c == victim_ctx && id < victim)) {
          victim = id;
          victim_ctx = c;
          found = true;
        }
      };
      for (uint64_t id : w.prefill_q) consider(id);
      for (uint64_t id : w.rotation) consider(id);
      require(found, "memory pressure with no resident request");
      if (w.working && w.cur_traj == victim) {
        // in-progress work is wasted; invalidate the scheduled event
        w.busy_accum += now_ - w.work_start;
        w.working = false;
        w.epoch += 1;
      }
      std::erase(w.prefill_q, victim);
      std::erase(w.rotation, victim);
      w.occupancy -= victim_ctx;
      w.waiting.push_back(victim);
      preempt_count_ += 1;
      Request& r = req(victim);
      if (r.ran) {
        // dropping the KV of a request that already did work incurs the
        // recomputation debt: a full re-prefill of its context
        recompute_overhead_ += static_cast<double>(victim_ctx) * cfg_.prefill_cost;
        r.pending_reprefill = true;
        r.ran = false;
      }
      record(SimEventKind::Preempt, victim, w.id);
    }
    if (!w.working) schedule(w);
  }

  // FIFO re-admission of preempted requests once they fit.
  void requeue_waiters(Worker& w) {
    while (!w.waiting.empty()) {
      uint64_t id = w.waiting.front();
      Request& r = req(id);
      if (w.occupancy + r.ctx > cfg_.memory_capacity) break;
      w.waiting.pop_front();
      w.occupancy += r.ctx;
      w.prefill_q.push_back(id);
    }
  }

  ClusterConfig cfg_;
  std::vector<SimEvent>* trace_ = nullptr;
  std::vector<Worker> workers_;
  std::map<uint64_t, Request> requests_;
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, std::greater<HeapEntry>> heap_;
  double now_ = 0.0;
  double stage_start_ = 0.0;
  uint64_t stage_version_ = 0;
  double recompute_overhead_ = 0.0;
  uint64_t preempt_count_ = 0;
};

// Virtual-time cost of recomputing current-policy log-probs for a formed
// training batch: one prefill pass over every batch token.
inline double account_logprob_recompute(const TrainBatch& batch, double prefill_cost) {
  return prefill_cost * static_cast<double>(batch.total_tokens());
}

}  // namespace copris
