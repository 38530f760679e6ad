#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "copris/grpo.hpp"
#include "copris/policy.hpp"
#include "copris/rng.hpp"
#include "copris/trajectory.hpp"

using namespace copris;

namespace {

PolicyParams random_params(const PolicyShape& shape, uint64_t seed, double scale = 1.0) {
  RngStream rng(seed, "test-params");
  PolicyParams p(shape);
  for (double& v : p.logits) v = rng.uniform(-scale, scale);
  return p;
}

Trajectory make_traj(const PolicyShape& shape, std::vector<int> tokens, uint64_t version = 0) {
  Trajectory t;
  t.question = Question::from_class(0, shape);
  t.tokens.tokens = std::move(tokens);
  t.tokens.terminated = true;
  t.segments.push_back(LogProbSegment{version, std::vector<double>(t.tokens.tokens.size(), 0.0)});
  return t;
}

// Reference Adam with decoupled weight decay, kept independent of the
// library implementation.
struct AdamOracle {
  double lr, b1, b2, eps, wd;
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& theta, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    ++t;
    for (size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      double mh = m[i] / (1 - std::pow(b1, t));
      double vh = v[i] / (1 - std::pow(b2, t));
      theta[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * theta[i]);
    }
  }
};

}  // namespace

TEST_CASE("terminal reward checks the token before EOS", "[grpo]") {
  PolicyShape shape{4, 4, 6, 4};
  Question q = Question::from_class(2, shape);  // target 2
  int eos = shape.eos_token();
  REQUIRE(terminal_reward(make_traj(shape, {2, eos}), q, eos) == 1.0);
  REQUIRE(terminal_reward(make_traj(shape, {1, eos}), q, eos) == 0.0);
  // bare EOS carries no answer
  REQUIRE(terminal_reward(make_traj(shape, {eos}), q, eos) == 0.0);
}

TEST_CASE("truncated trajectories are graded on their last token", "[grpo]") {
  // Exhaustive check of every length-2 sequence for V=3, H=2 against a
  // direct restatement of the rule.
  PolicyShape shape{2, 2, 3, 2};
  int eos = shape.eos_token();
  for (int cls = 0; cls < 2; ++cls) {
    Question q = Question::from_class(cls, shape);
    for (int a = 0; a < 3; ++a) {
      for (int b = 0; b < 3; ++b) {
        if (a == eos) continue;  // EOS only terminal per sequence invariants
        Trajectory t = make_traj(shape, {a, b});
        double expect;
        if (b == eos)
          expect = (a == q.target_token) ? 1.0 : 0.0;
        else
          expect = (b == q.target_token) ? 1.0 : 0.0;  // truncated at H
        REQUIRE(terminal_reward(t, q, eos) == expect);
      }
    }
  }
}

TEST_CASE("unterminated trajectories cannot be rewarded", "[grpo]") {
  PolicyShape shape{1, 4, 4, 2};
  Trajectory t = make_traj(shape, {0});
  t.tokens.terminated = false;
  REQUIRE_THROWS_AS(terminal_reward(t, t.question, shape.eos_token()), ContractViolation);
}

TEST_CASE("uniform rewards zero out the advantages", "[grpo]") {
  std::vector<double> r{1.0, 1.0, 1.0, 1.0};
  for (double a : compute_advantages(r)) REQUIRE(a == 0.0);
}

TEST_CASE("two-member groups normalize to plus and minus one", "[grpo]") {
  std::vector<double> r{1.0, 0.0};
  auto adv = compute_advantages(r, 1e-6);  // population std = 0.5
  REQUIRE(adv[0] > 0.0);
  REQUIRE(adv[1] < 0.0);
  REQUIRE(std::abs(adv[0] - 1.0) < 3e-6);
  REQUIRE(std::abs(adv[1] + 1.0) < 3e-6);
}

TEST_CASE("balanced four-member groups give unit advantages", "[grpo]") {
  std::vector<double> r{1.0, 1.0, 0.0, 0.0};
  auto adv = compute_advantages(r, 1e-6);
  REQUIRE(std::abs(adv[0] - 1.0) < 3e-6);
  REQUIRE(std::abs(adv[1] - 1.0) < 3e-6);
  REQUIRE(std::abs(adv[2] + 1.0) < 3e-6);
  REQUIRE(std::abs(adv[3] + 1.0) < 3e-6);
}

TEST_CASE("advantages sum to zero whenever rewards vary", "[grpo]") {
  RngStream rng(17, "adv");
  for (int trial = 0; trial < 100; ++trial) {
    size_t g = 2 + rng.uniform_int(14);
    std::vector<double> r(g);
    for (double& x : r) x = static_cast<double>(rng.uniform_int(2));
    auto adv = compute_advantages(r);
    double sum = 0.0;
    for (double a : adv) sum += a;
    REQUIRE(std::abs(sum) < 1e-9);
  }
}

TEST_CASE("groups smaller than two are rejected", "[grpo]") {
  std::vector<double> r{1.0};
  REQUIRE_THROWS_AS(compute_advantages(r), ConfigError);
}

TEST_CASE("token ratio identities", "[grpo]") {
  REQUIRE(token_ratio(-1.25, -1.25) == 1.0);
  REQUIRE(std::abs(token_ratio(-0.5, -0.5 - std::log(2.0)) - 2.0) < 1e-12);
  REQUIRE_THROWS_AS(token_ratio(std::nan(""), 0.0), ContractViolation);
  REQUIRE_THROWS_AS(token_ratio(0.0, -INFINITY), ContractViolation);
}

TEST_CASE("ratios over a buffered trajectory match the recomputation oracle", "[grpo]") {
  PolicyShape shape{2, 6, 6, 3};
  PolicyParams old_params = random_params(shape, 7);
  PolicyParams new_params = random_params(shape, 8);
  Question q = Question::from_class(1, shape);
  // two segments: first generated under old params, second under new
  TokenSequence seq;
  seq.tokens = {0, 2, 1, 4, 3};
  seq.terminated = true;
  auto lp_old = sequence_logprobs(old_params, q, seq);
  auto lp_new = sequence_logprobs(new_params, q, seq);
  Trajectory t;
  t.question = q;
  t.tokens = seq;
  t.segments.push_back({3, {lp_old[0], lp_old[1], lp_old[2]}});
  t.segments.push_back({5, {lp_new[3], lp_new[4]}});
  auto stored = concat_segments(t);
  auto current = sequence_logprobs(new_params, q, seq);
  for (size_t i = 0; i < stored.size(); ++i) {
    double expect = std::exp(current[i] - stored[i]);
    REQUIRE(std::abs(token_ratio(current[i], stored[i]) - expect) < 1e-12);
  }
  // tokens from the current-version segment are exactly on-policy
  REQUIRE(token_ratio(current[3], stored[3]) == 1.0);
  REQUIRE(token_ratio(current[4], stored[4]) == 1.0);
}

TEST_CASE("clipped objective evaluates the min of raw and clamped branches", "[grpo]") {
  ClipConfig cfg;
  REQUIRE(clipped_token_objective(1.0, 0.7, cfg) == 0.7);
  REQUIRE(clipped_token_objective(1.0, -2.0, cfg) == -2.0);
  REQUIRE(std::abs(clipped_token_objective(2.0, 1.0, cfg) - 1.28) < 1e-15);
  REQUIRE(std::abs(clipped_token_objective(0.5, -1.0, cfg) + 0.8) < 1e-15);
}

TEST_CASE("clipped objective is monotone then flat for positive advantage", "[grpo]") {
  ClipConfig cfg;
  double prev = -1e300;
  for (double r = 0.05; r <= 1.28; r += 0.01) {
    double v = clipped_token_objective(r, 1.5, cfg);
    REQUIRE(v >= prev - 1e-12);
    prev = v;
  }
  double plateau = clipped_token_objective(1.28, 1.5, cfg);
  for (double r = 1.29; r < 3.0; r += 0.1)
    REQUIRE(clipped_token_objective(r, 1.5, cfg) == plateau);
  // mirrored for negative advantage below 1 - clip_low
  double floor = clipped_token_objective(0.8, -1.5, cfg);
  for (double r = 0.79; r > 0.05; r -= 0.05)
    REQUIRE(clipped_token_objective(r, -1.5, cfg) == floor);
}

TEST_CASE("low-variance KL is non-negative and vanishes only at zero", "[grpo]") {
  REQUIRE(kl_lowvar(-1.0, -1.0) == 0.0);
  REQUIRE(std::abs(kl_lowvar(-2.0, -1.0) - (std::exp(1.0) - 2.0)) < 1e-12);
  RngStream rng(3, "kl");
  for (int i = 0; i < 1000; ++i) {
    double d = rng.uniform(-1.0, 1.0);
    double v = kl_lowvar(-1.0, -1.0 + d);
    REQUIRE(v >= 0.0);
    if (d != 0.0) REQUIRE(v > 0.0);
    REQUIRE(v >= d * d / 2.0 - std::abs(d * d * d));
  }
}

namespace {

struct LossCase {
  PolicyShape shape;
  std::vector<Trajectory> trajs;
  std::vector<double> advantages;
  std::vector<std::vector<double>> stored;
  PolicyParams ref;

  // Assembles items against `params`, recomputing the current-side
  // log-probs, so finite differences see the full dependence on params.
  std::vector<GrpoItem> items(const PolicyParams& params, const ClipConfig& cfg) const {
    std::vector<GrpoItem> out;
    for (size_t i = 0; i < trajs.size(); ++i) {
      GrpoItem it;
      it.traj = &trajs[i];
      it.advantage = advantages[i];
      it.stored_lp = stored[i];
      it.current_lp = sequence_logprobs(params, trajs[i].question, trajs[i].tokens);
      if (cfg.kl_coeff > 0.0)
        it.ref_lp = sequence_logprobs(ref, trajs[i].question, trajs[i].tokens);
      out.push_back(std::move(it));
    }
    return out;
  }
};

LossCase random_loss_case(uint64_t seed, const PolicyParams& params, bool stale) {
  RngStream rng(seed, "loss-case");
  const PolicyShape& shape = params.shape;
  LossCase c;
  c.shape = shape;
  c.ref = random_params(shape, seed + 77, 0.5);
  int groups = 1 + static_cast<int>(rng.uniform_int(2));
  for (int g = 0; g < groups; ++g) {
    std::vector<double> rewards;
    size_t first = c.trajs.size();
    for (int i = 0; i < 4; ++i) {
      Question q = Question::from_class(static_cast<int>(rng.uniform_int(shape.num_classes)), shape);
      Trajectory t;
      t.question = q;
      int len = 1 + static_cast<int>(rng.uniform_int(shape.horizon));
      RngStream tok(seed + g * 10 + i, "loss-tokens");
      for (int pos = 0; pos < len; ++pos)
        t.tokens.tokens.push_back(static_cast<int>(tok.uniform_int(shape.vocab)));
      t.tokens.terminated = true;
      c.trajs.push_back(std::move(t));
      rewards.push_back(static_cast<double>(rng.uniform_int(2)));
    }
    auto adv = compute_advantages(rewards);
    for (double a : adv) c.advantages.push_back(a);
    (void)first;
  }
  for (auto& t : c.trajs) {
    auto lp = sequence_logprobs(params, t.question, t.tokens);
    if (stale) {
      RngStream noise(reinterpret_cast<uintptr_t>(&t) % 1000, "noise");
      for (double& v : lp) v += noise.uniform(-0.3, 0.3);
    }
    c.stored.push_back(lp);
  }
  return c;
}

}  // namespace

TEST_CASE("fully on-policy batches reduce to the plain policy gradient", "[grpo]") {
  PolicyShape shape{2, 4, 4, 2};
  PolicyParams params = random_params(shape, 5);
  ClipConfig cfg;
  LossCase c = random_loss_case(42, params, /*stale=*/false);
  auto items = c.items(params, cfg);
  GrpoStepResult res = grpo_step_loss(params, items, cfg);

  size_t total = 0;
  for (const auto& t : c.trajs) total += t.token_count();
  std::vector<double> expect(params.logits.size(), 0.0);
  for (size_t i = 0; i < c.trajs.size(); ++i) {
    std::vector<double> w(c.trajs[i].token_count(), c.advantages[i]);
    accumulate_weighted_logprob_grad(params, c.trajs[i].question, c.trajs[i].tokens, w,
                                     -1.0 / static_cast<double>(total), expect);
  }
  for (size_t i = 0; i < expect.size(); ++i)
    REQUIRE(std::abs(res.grad[i] - expect[i]) < 1e-15);
}

TEST_CASE("zero advantages give zero loss and zero gradient", "[grpo]") {
  PolicyShape shape{2, 4, 4, 2};
  PolicyParams params = random_params(shape, 6);
  LossCase c = random_loss_case(43, params, true);
  for (double& a : c.advantages) a = 0.0;
  ClipConfig cfg;
  auto items = c.items(params, cfg);
  GrpoStepResult res = grpo_step_loss(params, items, cfg);
  REQUIRE(res.loss == 0.0);
  for (double g : res.grad) REQUIRE(g == 0.0);
}

TEST_CASE("an empty batch is a configuration error", "[grpo]") {
  PolicyShape shape{1, 2, 3, 1};
  PolicyParams params(shape);
  std::vector<GrpoItem> items;
  REQUIRE_THROWS_AS(grpo_step_loss(params, items, ClipConfig{}), ConfigError);
}

TEST_CASE("step-loss gradient matches finite differences", "[grpo]") {
  // Includes stale stored log-probs so the clipping branches are exercised;
  // one variant also enables the KL and entropy terms.
  for (uint64_t trial = 0; trial < 50; ++trial) {
    PolicyShape shape{2, 4, 4, 2};
    PolicyParams params = random_params(shape, trial + 500, 1.0);
    ClipConfig cfg;
    if (trial % 5 == 4) {
      cfg.kl_coeff = 0.1;
      cfg.entropy_coeff = 0.01;
    }
    LossCase c = random_loss_case(trial, params, /*stale=*/true);
    auto items = c.items(params, cfg);
    GrpoStepResult res = grpo_step_loss(params, items, cfg);

    auto loss_at = [&](const PolicyParams& p) {
      auto it = c.items(p, cfg);
      return grpo_step_loss(p, it, cfg).loss;
    };
    const double h = 1e-5;
    double max_err = 0.0, max_fd = 0.0;
    for (size_t i = 0; i < params.logits.size(); ++i) {
      PolicyParams plus = params, minus = params;
      plus.logits[i] += h;
      minus.logits[i] -= h;
      double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
      max_fd = std::max(max_fd, std::abs(fd));
      max_err = std::max(max_err, std::abs(fd - res.grad[i]));
    }
    REQUIRE(max_err < 1e-4 * std::max(1.0, max_fd));
  }
}

TEST_CASE("adam with zero gradient and no decay only bumps the version", "[grpo]") {
  PolicyShape shape{2, 2, 3, 1};
  PolicyParams params = random_params(shape, 70);
  auto before = params.logits;
  AdamOptimizer opt(AdamConfig{1e-2, 0.9, 0.999, 1e-8, 0.0});
  std::vector<double> zero(params.logits.size(), 0.0);
  opt.update(params, zero);
  REQUIRE(params.logits == before);
  REQUIRE(params.version == 1);
}

TEST_CASE("adam matches the reference implementation over two steps", "[grpo]") {
  PolicyShape shape{2, 3, 4, 2};
  PolicyParams params = random_params(shape, 71);
  std::vector<double> theta = params.logits;
  RngStream rng(72, "grad");
  std::vector<double> g(params.logits.size());
  for (double& x : g) x = rng.uniform(-1.0, 1.0);

  AdamConfig cfg{3e-2, 0.9, 0.999, 1e-8, 0.01};
  AdamOptimizer opt(cfg);
  AdamOracle oracle{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, {}, {}, 0};

  opt.update(params, g);
  oracle.step(theta, g);
  for (size_t i = 0; i < theta.size(); ++i) REQUIRE(std::abs(params.logits[i] - theta[i]) < 1e-12);
  REQUIRE(params.version == 1);

  opt.update(params, g);  // second identical gradient
  oracle.step(theta, g);
  for (size_t i = 0; i < theta.size(); ++i) REQUIRE(std::abs(params.logits[i] - theta[i]) < 1e-12);
  REQUIRE(params.version == 2);
}

TEST_CASE("adam rejects mis-shaped gradients", "[grpo]") {
  PolicyShape shape{1, 2, 3, 1};
  PolicyParams params(shape);
  AdamOptimizer opt;
  std::vector<double> bad(params.logits.size() + 1, 0.0);
  REQUIRE_THROWS_AS(opt.update(params, bad), ContractViolation);
}

TEST_CASE("one update touches exactly the rows hit by the gradient", "[grpo]") {
  PolicyShape shape{3, 4, 5, 2};
  PolicyParams live = random_params(shape, 73);
  PolicyParams snap_before = snapshot(live);

  // gradient of a single-trajectory weighted logprob touches only the rows
  // of its class at its positions
  Question q = Question::from_class(1, shape);
  TokenSequence seq;
  seq.tokens = {0, 3};
  seq.terminated = true;
  std::vector<double> w{1.0, -0.5};
  auto grad = grad_weighted_logprob(live, q, seq, w);

  AdamOptimizer opt(AdamConfig{1e-2, 0.9, 0.999, 1e-8, 0.0});  // no decay
  opt.update(live, grad);
  PolicyParams snap_after = snapshot(live);
  REQUIRE(snap_after.version == snap_before.version + 1);

  for (int c = 0; c < shape.num_classes; ++c) {
    for (int pos = 0; pos < shape.horizon; ++pos) {
      bool touched = (c == q.class_id) && (pos == 0 || pos == 1);
      size_t off = shape.row_offset(c, pos);
      bool changed = false;
      for (int k = 0; k < shape.vocab; ++k)
        if (snap_before.logits[off + k] != snap_after.logits[off + k]) changed = true;
      REQUIRE(changed == touched);
    }
  }
}
