#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "copris/common.hpp"
#include "copris/metrics.hpp"
#include "copris/trainer.hpp"

namespace copris {

inline constexpr int kSchemaVersion = 1;

namespace detail {

inline int line_of_offset(const std::string& text, size_t offset) {
  int line = 1;
  for (size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

inline int line_of_key(const std::string& text, const std::string& key) {
  size_t pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& scope,
                                const std::vector<std::string>& known,
                                const std::string& text) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const auto& k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) {
      int line = line_of_key(text, it.key());
      std::ostringstream msg;
      msg << "unknown config key " << scope << it.key();
      if (line > 0) msg << " (line " << line << ")";
      throw ConfigError(msg.str());
    }
  }
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config file: JSON mirroring RunConfig field for field.
// ---------------------------------------------------------------------------

inline nlohmann::json emit_config(const RunConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["mode"] = to_string(cfg.mode);
  j["is_enabled"] = cfg.is_enabled;
  j["engine"] = {{"concurrency", cfg.engine.concurrency},
                 {"batch_prompts", cfg.engine.batch_prompts},
                 {"rollouts_per_prompt", cfg.engine.rollouts_per_prompt},
                 {"max_response_len", cfg.engine.max_response_len},
                 {"max_staleness", cfg.engine.max_staleness}};
  j["policy"] = {{"num_classes", cfg.policy.num_classes},
                 {"vocab", cfg.policy.vocab},
                 {"answer_vocab", cfg.policy.answer_vocab}};
  j["cluster"] = {{"workers", cfg.cluster.num_workers},
                  {"decode_cost", cfg.cluster.decode_cost},
                  {"prefill_cost", cfg.cluster.prefill_cost},
                  {"memory_capacity", cfg.cluster.memory_capacity},
                  {"prompt_len", cfg.cluster.prompt_len}};
  j["length_model"] = {
      {"mode", cfg.length_model.mode == LengthMode::PolicyDriven ? "policy_driven" : "lognormal"},
      {"mu", cfg.length_model.mu},
      {"sigma", cfg.length_model.sigma}};
  j["grpo"] = {{"clip_low", cfg.clip.clip_low},
               {"clip_high", cfg.clip.clip_high},
               {"kl_coeff", cfg.clip.kl_coeff},
               {"entropy_coeff", cfg.clip.entropy_coeff},
               {"adv_epsilon", cfg.clip.adv_epsilon}};
  j["optimizer"] = {{"lr", cfg.adam.lr},
                    {"beta1", cfg.adam.beta1},
                    {"beta2", cfg.adam.beta2},
                    {"eps", cfg.adam.eps},
                    {"weight_decay", cfg.adam.weight_decay}};
  j["total_steps"] = cfg.total_steps;
  j["seed"] = cfg.seed;
  j["eval_every"] = cfg.eval_every;
  return j;
}

/**
 * Strict parse: unknown keys are rejected with the offending line, missing
 * keys take the defaults of RunConfig. The policy horizon is a single-source
 * value tied to engine.max_response_len.
 */
inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::ostringstream msg;
    msg << "config is not valid JSON at line " << detail::line_of_offset(text, e.byte)
        << ": " << e.what();
    throw ConfigError(msg.str());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  detail::reject_unknown_keys(
      j, "",
      {"schema_version", "mode", "is_enabled", "engine", "policy", "cluster",
       "length_model", "grpo", "optimizer", "total_steps", "seed", "eval_every"},
      text);

  int schema = j.value("schema_version", kSchemaVersion);
  if (schema != kSchemaVersion) {
    std::ostringstream msg;
    msg << "config schema_version " << schema << " is not supported (expected "
        << kSchemaVersion << ")";
    throw ConfigError(msg.str());
  }

  RunConfig cfg;
  if (j.contains("mode")) {
    std::string m = j["mode"].get<std::string>();
    if (m == "synchronous")
      cfg.mode = SchedulingMode::Synchronous;
    else if (m == "naive_partial")
      cfg.mode = SchedulingMode::NaivePartial;
    else if (m == "copris")
      cfg.mode = SchedulingMode::Copris;
    else
      throw ConfigError("mode must be synchronous, naive_partial or copris, got: " + m);
  }
  cfg.is_enabled = j.value("is_enabled", cfg.is_enabled);

  if (j.contains("engine")) {
    const auto& e = j["engine"];
    detail::reject_unknown_keys(e, "engine.",
                                {"concurrency", "batch_prompts", "rollouts_per_prompt",
                                 "max_response_len", "max_staleness"},
                                text);
    cfg.engine.concurrency = e.value("concurrency", cfg.engine.concurrency);
    cfg.engine.batch_prompts = e.value("batch_prompts", cfg.engine.batch_prompts);
    cfg.engine.rollouts_per_prompt =
        e.value("rollouts_per_prompt", cfg.engine.rollouts_per_prompt);
    cfg.engine.max_response_len = e.value("max_response_len", cfg.engine.max_response_len);
    cfg.engine.max_staleness = e.value("max_staleness", cfg.engine.max_staleness);
  }
  if (j.contains("policy")) {
    const auto& p = j["policy"];
    detail::reject_unknown_keys(p, "policy.", {"num_classes", "vocab", "answer_vocab"}, text);
    cfg.policy.num_classes = p.value("num_classes", cfg.policy.num_classes);
    cfg.policy.vocab = p.value("vocab", cfg.policy.vocab);
    cfg.policy.answer_vocab = p.value("answer_vocab", cfg.policy.answer_vocab);
  }
  if (j.contains("cluster")) {
    const auto& c = j["cluster"];
    detail::reject_unknown_keys(
        c, "cluster.", {"workers", "decode_cost", "prefill_cost", "memory_capacity", "prompt_len"},
        text);
    cfg.cluster.num_workers = c.value("workers", cfg.cluster.num_workers);
    cfg.cluster.decode_cost = c.value("decode_cost", cfg.cluster.decode_cost);
    cfg.cluster.prefill_cost = c.value("prefill_cost", cfg.cluster.prefill_cost);
    cfg.cluster.memory_capacity = c.value("memory_capacity", cfg.cluster.memory_capacity);
    cfg.cluster.prompt_len = c.value("prompt_len", cfg.cluster.prompt_len);
  }
  if (j.contains("length_model")) {
    const auto& l = j["length_model"];
    detail::reject_unknown_keys(l, "length_model.", {"mode", "mu", "sigma"}, text);
    if (l.contains("mode")) {
      std::string m = l["mode"].get<std::string>();
      if (m == "policy_driven")
        cfg.length_model.mode = LengthMode::PolicyDriven;
      else if (m == "lognormal")
        cfg.length_model.mode = LengthMode::Lognormal;
      else
        throw ConfigError("length_model.mode must be policy_driven or lognormal, got: " + m);
    }
    cfg.length_model.mu = l.value("mu", cfg.length_model.mu);
    cfg.length_model.sigma = l.value("sigma", cfg.length_model.sigma);
  }
  if (j.contains("grpo")) {
    const auto& g = j["grpo"];
    detail::reject_unknown_keys(
        g, "grpo.", {"clip_low", "clip_high", "kl_coeff", "entropy_coeff", "adv_epsilon"}, text);
    cfg.clip.clip_low = g.value("clip_low", cfg.clip.clip_low);
    cfg.clip.clip_high = g.value("clip_high", cfg.clip.clip_high);
    cfg.clip.kl_coeff = g.value("kl_coeff", cfg.clip.kl_coeff);
    cfg.clip.entropy_coeff = g.value("entropy_coeff", cfg.clip.entropy_coeff);
    cfg.clip.adv_epsilon = g.value("adv_epsilon", cfg.clip.adv_epsilon);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    detail::reject_unknown_keys(o, "optimizer.", {"lr", "beta1", "beta2", "eps", "weight_decay"},
                                text);
    cfg.adam.lr = o.value("lr", cfg.adam.lr);
    cfg.adam.beta1 = o.value("beta1", cfg.adam.beta1);
    cfg.adam.beta2 = o.value("beta2", cfg.adam.beta2);
    cfg.adam.eps = o.value("eps", cfg.adam.eps);
    cfg.adam.weight_decay = o.value("weight_decay", cfg.adam.weight_decay);
  }
  cfg.total_steps = j.value("total_steps", cfg.total_steps);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  cfg.policy.horizon = cfg.engine.max_response_len;
  return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Step metrics CSV (stable formatting so identical runs are byte-identical).
// ---------------------------------------------------------------------------

inline std::string metrics_csv_header() {
  return "step,rollout_time,logprob_time,step_time,samples_consumed,"
         "effective_throughput,offpolicy_token_fraction,mean_reward,mean_entropy,"
         "loss,recompute_overhead,batch_tokens,buffered_partials,mean_busy";
}

inline std::string metrics_csv_row(const StepMetrics& m) {
  using detail::fmt_double;
  std::ostringstream s;
  s << m.step << ',' << fmt_double(m.rollout_time) << ',' << fmt_double(m.logprob_time) << ','
    << fmt_double(m.step_time) << ',' << m.samples_consumed << ','
    << fmt_double(m.effective_throughput) << ',' << fmt_double(m.offpolicy_token_fraction) << ','
    << fmt_double(m.mean_reward) << ',' << fmt_double(m.mean_entropy) << ','
    << fmt_double(m.loss) << ',' << fmt_double(m.recompute_overhead) << ',' << m.batch_tokens
    << ',' << m.buffered_partials << ',' << fmt_double(m.mean_busy());
  return s.str();
}

inline void write_metrics_csv(std::ostream& out, const std::vector<StepMetrics>& steps) {
  out << metrics_csv_header() << '\n';
  for (const auto& m : steps) out << metrics_csv_row(m) << '\n';
}

// ---------------------------------------------------------------------------
// Run record: line-delimited JSON (config line, step lines, eval lines,
// final line).
// ---------------------------------------------------------------------------

inline nlohmann::json step_to_json(const StepMetrics& m) {
  return nlohmann::json{{"type", "step"},
                        {"step", m.step},
                        {"rollout_time", m.rollout_time},
                        {"logprob_time", m.logprob_time},
                        {"step_time", m.step_time},
                        {"worker_busy_fraction", m.worker_busy_fraction},
                        {"samples_consumed", m.samples_consumed},
                        {"effective_throughput", m.effective_throughput},
                        {"offpolicy_token_fraction", m.offpolicy_token_fraction},
                        {"mean_reward", m.mean_reward},
                        {"mean_entropy", m.mean_entropy},
                        {"loss", m.loss},
                        {"recompute_overhead", m.recompute_overhead},
                        {"batch_tokens", m.batch_tokens},
                        {"buffered_partials", m.buffered_partials}};
}

inline StepMetrics step_from_json(const nlohmann::json& j) {
  StepMetrics m;
  m.step = j.value("step", 0);
  m.rollout_time = j.value("rollout_time", 0.0);
  m.logprob_time = j.value("logprob_time", 0.0);
  m.step_time = j.value("step_time", 0.0);
  m.worker_busy_fraction = j.value("worker_busy_fraction", std::vector<double>{});
  m.samples_consumed = j.value("samples_consumed", 0);
  m.effective_throughput = j.value("effective_throughput", 0.0);
  m.offpolicy_token_fraction = j.value("offpolicy_token_fraction", 0.0);
  m.mean_reward = j.value("mean_reward", 0.0);
  m.mean_entropy = j.value("mean_entropy", 0.0);
  m.loss = j.value("loss", 0.0);
  m.recompute_overhead = j.value("recompute_overhead", 0.0);
  m.batch_tokens = j.value("batch_tokens", uint64_t{0});
  m.buffered_partials = j.value("buffered_partials", uint64_t{0});
  return m;
}

inline void write_run_record(std::ostream& out, const RunRecord& rec) {
  nlohmann::json head{{"type", "config"},
                      {"schema_version", kSchemaVersion},
                      {"config", emit_config(rec.config)}};
  out << head.dump() << '\n';
  for (const auto& s : rec.steps) out << step_to_json(s).dump() << '\n';
  for (const auto& e : rec.evals) {
    nlohmann::json j{{"type", "eval"}, {"step", e.step}, {"mean_reward", e.mean_reward}};
    out << j.dump() << '\n';
  }
  nlohmann::json tail{{"type", "final"},
                      {"final_greedy_reward", rec.final_greedy_reward},
                      {"final_version", rec.final_version},
                      {"checkpoint", rec.checkpoint_ref}};
  out << tail.dump() << '\n';
}

inline RunRecord read_run_record(std::istream& in) {
  RunRecord rec;
  std::string line;
  bool have_config = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    std::string type = j.value("type", "");
    if (type == "config") {
      int schema = j.value("schema_version", -1);
      if (schema != kSchemaVersion) {
        std::ostringstream msg;
        msg << "run record schema version " << schema << " is incompatible with reader version "
            << kSchemaVersion;
        throw ConfigError(msg.str());
      }
      rec.config = parse_config_text(j["config"].dump());
      have_config = true;
    } else if (type == "step") {
      rec.steps.push_back(step_from_json(j));
    } else if (type == "eval") {
      rec.evals.push_back({j.value("step", 0), j.value("mean_reward", 0.0)});
    } else if (type == "final") {
      rec.final_greedy_reward = j.value("final_greedy_reward", 0.0);
      rec.final_version = j.value("final_version", uint64_t{0});
      rec.checkpoint_ref = j.value("checkpoint", "");
    }
  }
  if (!have_config) throw ConfigError("run record has no config line");
  return rec;
}

inline RunRecord load_run_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read run record: " + path);
  return read_run_record(in);
}

// ---------------------------------------------------------------------------
// Event trace: line-delimited records for replay and debugging.
// ---------------------------------------------------------------------------

inline void write_event_trace(std::ostream& out, const std::vector<SimEvent>& trace) {
  for (const auto& ev : trace) {
    nlohmann::json j{{"event", to_string(ev.kind)},
                     {"time", ev.time},
                     {"traj_id", ev.traj_id},
                     {"worker", ev.worker_id},
                     {"version", ev.version}};
    out << j.dump() << '\n';
  }
}

inline std::vector<SimEvent> read_event_trace(std::istream& in) {
  std::vector<SimEvent> trace;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SimEvent ev;
    ev.time = j.value("time", 0.0);
    ev.traj_id = j.value("traj_id", uint64_t{0});
    ev.worker_id = j.value("worker", -1);
    ev.version = j.value("version", uint64_t{0});
    std::string kind = j.value("event", "");
    if (kind == "assign") ev.kind = SimEventKind::Assign;
    else if (kind == "prefill_done") ev.kind = SimEventKind::PrefillDone;
    else if (kind == "reprefill_done") ev.kind = SimEventKind::Reprefill;
    else if (kind == "decode_tick") ev.kind = SimEventKind::DecodeTick;
    else if (kind == "request_done") ev.kind = SimEventKind::RequestDone;
    else if (kind == "preempt") ev.kind = SimEventKind::Preempt;
    else if (kind == "stage_halt") ev.kind = SimEventKind::StageHalt;
    else throw ConfigError("unknown event kind in trace: " + kind);
    trace.push_back(ev);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoint: flat binary tensor with a small header.
// ---------------------------------------------------------------------------

inline void write_checkpoint(const std::string& path, const PolicyParams& params,
                             uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  const char magic[8] = {'C', 'P', 'R', 'S', 'C', 'K', 'P', 'T'};
  out.write(magic, 8);
  uint32_t schema = kSchemaVersion;
  int32_t dims[4] = {params.shape.num_classes, params.shape.horizon, params.shape.vocab,
                     params.shape.answer_vocab};
  out.write(reinterpret_cast<const char*>(&schema), sizeof(schema));
  out.write(reinterpret_cast<const char*>(&params.version), sizeof(params.version));
  out.write(reinterpret_cast<const char*>(&seed), sizeof(seed));
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(params.logits.data()),
            static_cast<std::streamsize>(params.logits.size() * sizeof(double)));
}

inline PolicyParams read_checkpoint(const std::string& path, uint64_t* seed_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string(magic, 8) != "CPRSCKPT") throw ConfigError("bad checkpoint magic: " + path);
  uint32_t schema = 0;
  uint64_t version = 0, seed = 0;
  int32_t dims[4];
  in.read(reinterpret_cast<char*>(&schema), sizeof(schema));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&seed), sizeof(seed));
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (schema != static_cast<uint32_t>(kSchemaVersion))
    throw ConfigError("unsupported checkpoint schema in " + path);
  PolicyShape shape{dims[0], dims[1], dims[2], dims[3]};
  shape.validate();
  PolicyParams params(shape);
  params.version = version;
  in.read(reinterpret_cast<char*>(params.logits.data()),
          static_cast<std::streamsize>(params.logits.size() * sizeof(double)));
  if (!in) throw ConfigError("truncated checkpoint: " + path);
  if (seed_out) *seed_out = seed;
  return params;
}

// ---------------------------------------------------------------------------
// Named presets.
// ---------------------------------------------------------------------------

// Small, fast config that learns the toy task end to end.
inline RunConfig desk_default_config() {
  RunConfig cfg;
  cfg.mode = SchedulingMode::Copris;
  cfg.is_enabled = true;
  cfg.engine = EngineConfig{16, 4, 4, 8, 0};
  cfg.policy = PolicyShape{4, 8, 6, 4};
  cfg.cluster = ClusterConfig{4, 1.0, 0.05, 64, 8};
  cfg.length_model = LengthModel{LengthMode::PolicyDriven, 0.0, 0.0};
  cfg.total_steps = 200;
  cfg.seed = 1;
  cfg.eval_every = 20;
  return cfg;
}

// Hyperparameters mirrored from the upstream training setup; far heavier
// than the desk preset and intended as a reference point, not a quick run.
inline RunConfig full_scale_config() {
  RunConfig cfg;
  cfg.mode = SchedulingMode::Copris;
  cfg.is_enabled = true;
  cfg.engine = EngineConfig{1024, 64, 8, 15360, 0};
  cfg.policy = PolicyShape{64, 15360, 16, 8};
  cfg.cluster = ClusterConfig{32, 1.0, 0.02, 560000, 1024};
  cfg.length_model = LengthModel{LengthMode::Lognormal, 7.0, 1.0};
  cfg.clip = ClipConfig{0.2, 0.28, 0.0, 0.0, 1e-6};
  cfg.adam = AdamConfig{1e-6, 0.9, 0.999, 1e-8, 0.01};
  cfg.total_steps = 1000;
  cfg.seed = 1;
  cfg.eval_every = 50;
  return cfg;
}

}  // namespace copris
