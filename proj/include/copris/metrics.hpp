#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

namespace copris {

// Per-training-step record. Times are virtual-time units from the cluster
// simulator; effective_throughput is samples consumed per virtual-time unit.
struct StepMetrics {
  int step = 0;
  double rollout_time = 0.0;
  double logprob_time = 0.0;
  double step_time = 0.0;
  std::vector<double> worker_busy_fraction;
  int samples_consumed = 0;
  double effective_throughput = 0.0;
  double offpolicy_token_fraction = 0.0;
  double mean_reward = 0.0;
  double mean_entropy = 0.0;
  double loss = 0.0;
  double recompute_overhead = 0.0;
  uint64_t batch_tokens = 0;
  uint64_t buffered_partials = 0;

  double mean_busy() const {
    if (worker_busy_fraction.empty()) return 0.0;
    double s = std::accumulate(worker_busy_fraction.begin(), worker_busy_fraction.end(), 0.0);
    return s / static_cast<double>(worker_busy_fraction.size());
  }
};

}  // namespace copris
