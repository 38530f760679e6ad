#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "copris/common.hpp"
#include "copris/rng.hpp"

namespace copris {

/**
 * Layout of the tabular policy. The vocabulary is split as
 * [answer tokens | filler tokens | EOS], with EOS pinned at index vocab-1.
 * State is (question class, position); the policy never conditions on the
 * generated prefix.
 */
struct PolicyShape {
  int num_classes = 4;   // Q
  int horizon = 8;       // H, maximum response length in tokens
  int vocab = 6;         // V, includes answer tokens, fillers and EOS
  int answer_vocab = 4;  // V_ans

  int eos_token() const { return vocab - 1; }
  int first_filler() const { return answer_vocab; }
  size_t table_size() const {
    return static_cast<size_t>(num_classes) * horizon * vocab;
  }
  size_t row_offset(int class_id, int pos) const {
    return (static_cast<size_t>(class_id) * horizon + pos) * vocab;
  }
  bool operator==(const PolicyShape&) const = default;

  void validate() const {
    if (num_classes < 1) throw ConfigError("policy.num_classes must be >= 1");
    if (horizon < 1) throw ConfigError("policy horizon must be >= 1");
    if (answer_vocab < 1) throw ConfigError("policy.answer_vocab must be >= 1");
    if (vocab < answer_vocab + 1)
      throw ConfigError("policy.vocab must leave room for answer tokens plus EOS");
  }
};

struct Question {
  int class_id = 0;
  int target_token = 0;  // = class_id mod answer_vocab

  static Question from_class(int class_id, const PolicyShape& shape) {
    require(class_id >= 0 && class_id < shape.num_classes, "question class out of range");
    return Question{class_id, class_id % shape.answer_vocab};
  }
  bool operator==(const Question&) const = default;
};

/**
 * Generated token sequence. `terminated` means the last token is EOS or the
 * sequence was truncated at the horizon.
 */
struct TokenSequence {
  std::vector<int> tokens;
  bool terminated = false;

  size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

/**
 * The full policy: one logit row per (class, position). Copying a
 * PolicyParams is how snapshots are taken; the copy keeps the version of the
 * live params at copy time and is never touched by later updates.
 */
struct PolicyParams {
  PolicyShape shape;
  std::vector<double> logits;  // row-major [Q][H][V]
  uint64_t version = 0;

  explicit PolicyParams(PolicyShape s = {}) : shape(s), logits(s.table_size(), 0.0) {}

  std::span<const double> row(int class_id, int pos) const {
    return {logits.data() + shape.row_offset(class_id, pos),
            static_cast<size_t>(shape.vocab)};
  }
  std::span<double> row_mut(int class_id, int pos) {
    return {logits.data() + shape.row_offset(class_id, pos),
            static_cast<size_t>(shape.vocab)};
  }

  // Near-uniform start: logits ~ uniform(-0.01, 0.01) from the init stream.
  static PolicyParams init_near_uniform(const PolicyShape& shape, RngStream& rng) {
    PolicyParams p(shape);
    for (double& v : p.logits) v = rng.uniform(-0.01, 0.01);
    return p;
  }
};

inline PolicyParams snapshot(const PolicyParams& params) { return params; }

namespace detail {

inline void check_state(const PolicyParams& params, const Question& q, int pos) {
  require(q.class_id >= 0 && q.class_id < params.shape.num_classes,
          "question class out of range");
  require(pos >= 0 && pos < params.shape.horizon, "position out of range");
}

}  // namespace detail

// Softmax of the (class, pos) logit row, written into `out` (size V).
inline void token_distribution_into(const PolicyParams& params, const Question& q,
                                    int pos, std::span<double> out) {
  detail::check_state(params, q, pos);
  auto row = params.row(q.class_id, pos);
  double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (size_t k = 0; k < row.size(); ++k) {
    out[k] = std::exp(row[k] - mx);
    sum += out[k];
  }
  for (size_t k = 0; k < row.size(); ++k) out[k] /= sum;
}

inline std::vector<double> token_distribution(const PolicyParams& params,
                                              const Question& q, int pos) {
  std::vector<double> probs(params.shape.vocab);
  token_distribution_into(params, q, pos, probs);
  return probs;
}

struct SampledToken {
  int token = 0;
  double logprob = 0.0;
};

// Inverse-CDF pick for a single uniform draw u in [0, 1).
inline SampledToken sample_token_with_u(const PolicyParams& params, const Question& q,
                                        int pos, double u) {
  std::vector<double> probs = token_distribution(params, q, pos);
  double cum = 0.0;
  int last = static_cast<int>(probs.size()) - 1;
  for (int k = 0; k < last; ++k) {
    cum += probs[k];
    if (u < cum) return {k, std::log(probs[k])};
  }
  return {last, std::log(probs[last])};
}

// One token from the policy, consuming exactly one uniform from `rng`.
inline SampledToken sample_token(const PolicyParams& params, const Question& q,
                                 int pos, RngStream& rng) {
  return sample_token_with_u(params, q, pos, rng.uniform());
}

inline int greedy_token(const PolicyParams& params, const Question& q, int pos) {
  auto row = params.row(q.class_id, pos);
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Log-probability of each token of `seq` under `params`, position-aligned.
inline std::vector<double> sequence_logprobs(const PolicyParams& params,
                                             const Question& q,
                                             const TokenSequence& seq) {
  std::vector<double> out;
  out.reserve(seq.size());
  std::vector<double> probs(params.shape.vocab);
  for (size_t t = 0; t < seq.size(); ++t) {
    token_distribution_into(params, q, static_cast<int>(t), probs);
    int tok = seq.tokens[t];
    require(tok >= 0 && tok < params.shape.vocab, "token out of vocabulary");
    out.push_back(std::log(probs[tok]));
  }
  return out;
}

/**
 * Accumulate scale * d/dlogits [ sum_t weights[t] * log pi(tokens[t] | q, t) ]
 * into `grad` (shaped like params.logits). Per position the contribution is
 * scale * w_t * (onehot(tokens[t]) - softmax_row).
 */
inline void accumulate_weighted_logprob_grad(const PolicyParams& params,
                                             const Question& q,
                                             const TokenSequence& seq,
                                             std::span<const double> weights,
                                             double scale, std::span<double> grad) {
  require(weights.size() == seq.size(), "weight vector length must match token count");
  require(grad.size() == params.logits.size(), "gradient tensor shape mismatch");
  std::vector<double> probs(params.shape.vocab);
  for (size_t t = 0; t < seq.size(); ++t) {
    double w = scale * weights[t];
    if (w == 0.0) continue;
    token_distribution_into(params, q, static_cast<int>(t), probs);
    size_t off = params.shape.row_offset(q.class_id, static_cast<int>(t));
    for (int k = 0; k < params.shape.vocab; ++k) grad[off + k] -= w * probs[k];
    grad[off + seq.tokens[t]] += w;
  }
}

inline std::vector<double> grad_weighted_logprob(const PolicyParams& params,
                                                 const Question& q,
                                                 const TokenSequence& seq,
                                                 std::span<const double> weights) {
  std::vector<double> grad(params.logits.size(), 0.0);
  accumulate_weighted_logprob_grad(params, q, seq, weights, 1.0, grad);
  return grad;
}

// Shannon entropy in nats of the token distribution at (q, pos).
inline double policy_entropy(const PolicyParams& params, const Question& q, int pos) {
  std::vector<double> probs = token_distribution(params, q, pos);
  double h = 0.0;
  for (double p : probs) h -= p * std::log(p);
  return h;
}

}  // namespace copris
