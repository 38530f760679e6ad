#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "copris/common.hpp"
#include "copris/policy.hpp"
#include "copris/trajectory.hpp"

namespace copris {

struct ClipConfig {
  double clip_low = 0.2;     // lower clip width, ratio clamped at 1 - clip_low
  double clip_high = 0.28;   // upper clip width, ratio clamped at 1 + clip_high
  double kl_coeff = 0.0;     // beta; reference policy is the version-0 snapshot
  double entropy_coeff = 0.0;
  double adv_epsilon = 1e-6;

  void validate() const {
    if (clip_low <= 0.0 || clip_high <= 0.0)
      throw ConfigError("grpo.clip_low and grpo.clip_high must be > 0");
    if (kl_coeff < 0.0) throw ConfigError("grpo.kl_coeff must be >= 0");
    if (adv_epsilon <= 0.0) throw ConfigError("grpo.adv_epsilon must be > 0");
  }
};

/**
 * Rule-based terminal reward: 1 if the answer token is the question's target,
 * else 0. The answer token is the one immediately before EOS, or the final
 * token when the sequence was truncated at the horizon.
 */
inline double terminal_reward(const Trajectory& traj, const Question& q, int eos_token) {
  require(traj.tokens.terminated, "terminal_reward requires a terminated trajectory");
  const auto& toks = traj.tokens.tokens;
  require(!toks.empty(), "terminated trajectory cannot be empty");
  int answer;
  if (toks.back() == eos_token) {
    if (toks.size() < 2) return 0.0;  // bare EOS, no answer emitted
    answer = toks[toks.size() - 2];
  } else {
    answer = toks.back();  // truncated at horizon
  }
  return answer == q.target_token ? 1.0 : 0.0;
}

// Group-relative advantages: (R_i - mean) / (population std + adv_epsilon).
// A uniform-reward group has zero numerators, so all advantages are 0.
inline std::vector<double> compute_advantages(std::span<const double> rewards,
                                              double adv_epsilon = 1e-6) {
  size_t g = rewards.size();
  if (g < 2) throw ConfigError("advantage group size must be >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);
  double denom = std::sqrt(var) + adv_epsilon;
  std::vector<double> adv(g);
  for (size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

// Per-token importance ratio exp(current - stored).
inline double token_ratio(double current_lp, double stored_lp) {
  require(std::isfinite(current_lp) && std::isfinite(stored_lp),
          "token_ratio requires finite log-probs");
  return std::exp(current_lp - stored_lp);
}

// Clipped surrogate min(r * adv, clamp(r, 1-lo, 1+hi) * adv).
inline double clipped_token_objective(double ratio, double adv, const ClipConfig& cfg) {
  double clamped = std::clamp(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
  return std::min(ratio * adv, clamped * adv);
}

// Low-variance KL surrogate exp(d) - d - 1 with d = ref_lp - current_lp.
// Non-negative, zero only at d = 0.
inline double kl_lowvar(double current_lp, double ref_lp) {
  require(std::isfinite(current_lp) && std::isfinite(ref_lp),
          "kl_lowvar requires finite log-probs");
  double d = ref_lp - current_lp;
  return std::exp(d) - d - 1.0;
}

/**
 * One trajectory's contribution to a GRPO step. `stored_lp` is the buffered
 * concatenation L_i, `current_lp` the recomputation under the policy being
 * updated. `ref_lp` is only consulted when kl_coeff > 0.
 */
struct GrpoItem {
  const Trajectory* traj = nullptr;
  double advantage = 0.0;
  std::vector<double> stored_lp;
  std::vector<double> current_lp;
  std::vector<double> ref_lp;
};

struct GrpoStepResult {
  double loss = 0.0;
  std::vector<double> grad;  // shaped like params.logits
  size_t token_count = 0;
};

/**
 * Token-mean GRPO loss and its exact gradient.
 *
 * loss = -(1/T) sum_t [ clip_t - beta * kl_t + c_H * H(row_t) ]
 *
 * The gradient flows through current_lp only; a token whose clamp branch is
 * binding contributes zero weight. Accumulation runs in batch order so the
 * reduction is bit-reproducible.
 */
inline GrpoStepResult grpo_step_loss(const PolicyParams& params,
                                     std::span<const GrpoItem> batch,
                                     const ClipConfig& cfg) {
  if (batch.empty()) throw ConfigError("grpo_step_loss requires a non-empty batch");

  size_t total_tokens = 0;
  for (const auto& item : batch) {
    require(item.traj != nullptr, "batch item missing trajectory");
    size_t n = item.traj->token_count();
    require(item.stored_lp.size() == n && item.current_lp.size() == n,
            "log-prob vectors must align with token count");
    require(cfg.kl_coeff == 0.0 || item.ref_lp.size() == n,
            "reference log-probs required when kl_coeff > 0");
    require(std::isfinite(item.advantage), "advantage must be finite");
    total_tokens += n;
  }
  if (total_tokens == 0) throw ConfigError("grpo_step_loss batch has no tokens");

  const double inv_t = 1.0 / static_cast<double>(total_tokens);
  GrpoStepResult out;
  out.grad.assign(params.logits.size(), 0.0);
  out.token_count = total_tokens;

  double objective = 0.0;
  std::vector<double> weights;
  std::vector<double> probs(params.shape.vocab);
  for (const auto& item : batch) {
    const Trajectory& traj = *item.traj;
    size_t n = traj.token_count();
    weights.assign(n, 0.0);
    for (size_t t = 0; t < n; ++t) {
      double ratio = token_ratio(item.current_lp[t], item.stored_lp[t]);
      double clamped = std::clamp(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
      double unclipped = ratio * item.advantage;
      double clipped = clamped * item.advantage;
      if (unclipped <= clipped) {
        objective += unclipped;
        weights[t] = ratio * item.advantage;  // d(r*adv)/d(current_lp) = r*adv
      } else {
        objective += clipped;  // binding clamp, zero gradient
      }
      if (cfg.kl_coeff > 0.0) {
        double d = item.ref_lp[t] - item.current_lp[t];
        objective -= cfg.kl_coeff * (std::exp(d) - d - 1.0);
        weights[t] += cfg.kl_coeff * (std::exp(d) - 1.0);
      }
    }
    // d(objective)/d(logits) assembled from per-token log-prob weights; the
    // loss is the negated token mean.
    accumulate_weighted_logprob_grad(params, traj.question, traj.tokens, weights,
                                     -inv_t, out.grad);
    if (cfg.entropy_coeff != 0.0) {
      for (size_t t = 0; t < n; ++t) {
        token_distribution_into(params, traj.question, static_cast<int>(t), probs);
        double h = 0.0;
        for (double p : probs) h -= p * std::log(p);
        objective += cfg.entropy_coeff * h;
        // dH/dz_j = -p_j (log p_j + H)
        size_t off = params.shape.row_offset(traj.question.class_id, static_cast<int>(t));
        for (int k = 0; k < params.shape.vocab; ++k) {
          double dh = -probs[k] * (std::log(probs[k]) + h);
          out.grad[off + k] -= inv_t * cfg.entropy_coeff * dh;
        }
      }
    }
  }
  out.loss = -objective * inv_t;
  return out;
}

struct AdamConfig {
  double lr = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const {
    if (lr < 0.0) throw ConfigError("optimizer.lr must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("optimizer betas must lie in [0, 1)");
    if (eps <= 0.0) throw ConfigError("optimizer.eps must be > 0");
    if (weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be >= 0");
  }
};

// Adam with decoupled weight decay. Each update bumps the policy version by
// exactly 1.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  void update(PolicyParams& params, std::span<const double> grad) {
    require(grad.size() == params.logits.size(), "gradient shape mismatch");
    if (m_.empty()) {
      m_.assign(grad.size(), 0.0);
      v_.assign(grad.size(), 0.0);
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < grad.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      params.logits[i] -=
          cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * params.logits[i]);
    }
    params.version += 1;
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  uint64_t t_ = 0;
};

inline void adam_update(PolicyParams& params, std::span<const double> grad,
                        AdamOptimizer& opt) {
  opt.update(params, grad);
}

}  // namespace copris
