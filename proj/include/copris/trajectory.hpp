#pragma once

#include <cstdint>
#include <vector>

#include "copris/common.hpp"
#include "copris/policy.hpp"

namespace copris {

// Contiguous run of tokens generated under a single policy version, with the
// log-probabilities recorded at generation time.
struct LogProbSegment {
  uint64_t policy_version = 0;
  std::vector<double> logprobs;
};

enum class TrajStatus { InFlight, BufferedPartial, BufferedComplete, Consumed };

inline const char* to_string(TrajStatus s) {
  switch (s) {
    case TrajStatus::InFlight: return "in_flight";
    case TrajStatus::BufferedPartial: return "buffered_partial";
    case TrajStatus::BufferedComplete: return "buffered_complete";
    case TrajStatus::Consumed: return "consumed";
  }
  return "?";
}

/**
 * One rollout request: a question plus the tokens generated so far and their
 * log-prob segments, one segment per policy version that produced tokens.
 * Invariants: segment lengths sum to the token count; segment versions are
 * strictly increasing.
 */
struct Trajectory {
  uint64_t traj_id = 0;
  uint64_t group_id = 0;
  Question question;
  TokenSequence tokens;
  std::vector<LogProbSegment> segments;
  TrajStatus status = TrajStatus::InFlight;
  uint64_t created_version = 0;  // policy version at admission

  size_t token_count() const { return tokens.size(); }

  // Number of distinct rollout stages that produced tokens (K of the
  // stored-log-prob concatenation).
  size_t stage_span() const { return segments.size(); }

  void check_invariants() const {
    size_t total = 0;
    uint64_t prev_version = 0;
    bool first = true;
    for (const auto& seg : segments) {
      require(!seg.logprobs.empty(), "log-prob segment must be non-empty");
      require(first || seg.policy_version > prev_version,
              "segment versions must strictly increase");
      prev_version = seg.policy_version;
      first = false;
      total += seg.logprobs.size();
    }
    require(total == tokens.size(), "segment lengths must sum to token count");
  }
};

// Stored log-probs L_i: segment log-probs concatenated in order, one entry
// per token.
inline std::vector<double> concat_segments(const Trajectory& traj) {
  std::vector<double> out;
  out.reserve(traj.token_count());
  for (const auto& seg : traj.segments)
    out.insert(out.end(), seg.logprobs.begin(), seg.logprobs.end());
  return out;
}

}  // namespace copris
