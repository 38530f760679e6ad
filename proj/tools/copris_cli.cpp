// Command-line front end: run experiments, sweep ablation axes and render
// reports from saved run records.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "copris/copris.hpp"

namespace fs = std::filesystem;
using namespace copris;

namespace {

struct Overrides {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  int steps = 0;
  bool steps_set = false;
  std::string mode;
  int concurrency = 0;
  bool concurrency_set = false;
  std::string is_flag;
  std::string out_dir = "runs/out";
  int parallel_seeds = 1;
};

RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config_path.empty() ? desk_default_config() : load_config_file(o.config_path);
  if (o.seed_set) cfg.seed = o.seed;
  if (o.steps_set) cfg.total_steps = o.steps;
  if (!o.mode.empty()) cfg = apply_axis_value(cfg, AblationAxis::Mode, o.mode);
  if (o.concurrency_set) cfg.engine.concurrency = o.concurrency;
  if (!o.is_flag.empty()) cfg = apply_axis_value(cfg, AblationAxis::IS, o.is_flag);
  cfg.validate();
  return cfg;
}

// Runs one experiment into `dir`, flushing metrics line by line so a partial
// record survives a mid-run failure.
RunRecord execute_run(const RunConfig& cfg, const fs::path& dir, std::string& summary) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "metrics.csv");
  if (!csv) throw ConfigError("cannot write " + (dir / "metrics.csv").string());
  csv << metrics_csv_header() << '\n';

  RunRecord rec;
  rec.config = cfg;
  Trainer trainer(cfg);
  try {
    for (int s = 0; s < cfg.total_steps; ++s) {
      StepMetrics m = trainer.train_step();
      rec.steps.push_back(m);
      csv << metrics_csv_row(m) << '\n';
      csv.flush();
      if (cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0)
        rec.evals.push_back({s + 1, trainer.evaluate()});
    }
  } catch (...) {
    std::ofstream partial(dir / "run_record.jsonl");
    write_run_record(partial, rec);
    throw;
  }
  rec.final_greedy_reward = trainer.evaluate();
  rec.final_version = trainer.params().version;
  rec.checkpoint_ref = (dir / "checkpoint.bin").string();
  write_checkpoint(rec.checkpoint_ref, trainer.params(), cfg.seed);
  std::ofstream record(dir / "run_record.jsonl");
  write_run_record(record, rec);

  std::ostringstream line;
  line << "run complete: mode=" << to_string(cfg.mode) << " is=" << (cfg.is_enabled ? "on" : "off")
       << " seed=" << cfg.seed << " steps=" << rec.steps.size()
       << " final_reward=" << detail::fmt_double(rec.final_greedy_reward)
       << " mean_throughput=" << detail::fmt_double(rec.mean_effective_throughput())
       << " out=" << dir.string();
  summary = line.str();
  return rec;
}

int cmd_run(const Overrides& o) {
  RunConfig cfg = resolve_config(o);
  if (o.parallel_seeds <= 1) {
    std::string summary;
    execute_run(cfg, o.out_dir, summary);
    std::cout << summary << '\n';
    return 0;
  }
  // Independent seeds run concurrently; each gets its own output directory
  // and rng streams, so results match sequential execution exactly.
  std::vector<std::thread> threads;
  std::vector<std::string> summaries(o.parallel_seeds);
  std::vector<std::string> errors(o.parallel_seeds);
  for (int k = 0; k < o.parallel_seeds; ++k) {
    threads.emplace_back([&, k] {
      RunConfig c = cfg;
      c.seed = cfg.seed + static_cast<uint64_t>(k);
      fs::path dir = fs::path(o.out_dir) / ("seed_" + std::to_string(c.seed));
      try {
        execute_run(c, dir, summaries[k]);
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();
  int rc = 0;
  for (int k = 0; k < o.parallel_seeds; ++k) {
    if (!errors[k].empty()) {
      std::cerr << "seed " << cfg.seed + k << " failed: " << errors[k] << '\n';
      rc = 2;
    } else {
      std::cout << summaries[k] << '\n';
    }
  }
  return rc;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int cmd_ablate(const Overrides& o, const std::string& axis_name, const std::string& values_csv) {
  AblationAxis axis;
  if (axis_name == "concurrency")
    axis = AblationAxis::Concurrency;
  else if (axis_name == "is")
    axis = AblationAxis::IS;
  else if (axis_name == "mode")
    axis = AblationAxis::Mode;
  else
    throw ConfigError("axis must be concurrency, is or mode, got: " + axis_name);
  std::vector<std::string> values = split_csv(values_csv);
  if (values.empty()) throw ConfigError("ablate requires a non-empty --values list");

  RunConfig base = resolve_config(o);
  fs::create_directories(o.out_dir);
  std::ofstream csv(fs::path(o.out_dir) / "ablation.csv");
  csv << "axis,value,seed,steps,mean_step_time,mean_rollout_time,mean_logprob_time,"
         "mean_offpolicy_fraction,mean_throughput,final_reward\n";

  std::printf("ablation axis=%s, shared seed=%llu\n", axis_name.c_str(),
              static_cast<unsigned long long>(base.seed));
  std::printf("%-14s %14s %14s %14s %12s %12s\n", "value", "step_time", "rollout_time",
              "logprob_time", "offpolicy", "final_reward");
  for (const auto& v : values) {
    RunConfig cfg = apply_axis_value(base, axis, v);
    cfg.validate();
    std::string summary;
    RunRecord rec = execute_run(cfg, fs::path(o.out_dir) / (axis_name + "_" + v), summary);
    double st = 0, rt = 0, lt = 0, off = 0;
    for (const auto& m : rec.steps) {
      st += m.step_time;
      rt += m.rollout_time;
      lt += m.logprob_time;
      off += m.offpolicy_token_fraction;
    }
    double n = static_cast<double>(rec.steps.size());
    st /= n;
    rt /= n;
    lt /= n;
    off /= n;
    std::printf("%-14s %14.4f %14.4f %14.4f %12.4f %12.4f\n", v.c_str(), st, rt, lt, off,
                rec.final_greedy_reward);
    csv << axis_name << ',' << v << ',' << cfg.seed << ',' << rec.steps.size() << ','
        << detail::fmt_double(st) << ',' << detail::fmt_double(rt) << ','
        << detail::fmt_double(lt) << ',' << detail::fmt_double(off) << ','
        << detail::fmt_double(rec.mean_effective_throughput()) << ','
        << detail::fmt_double(rec.final_greedy_reward) << '\n';
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& out_path,
               bool charts) {
  std::vector<RunRecord> records;
  records.reserve(paths.size());
  for (const auto& p : paths) records.push_back(load_run_record(p));
  std::string report = make_report(records);
  if (out_path.empty()) {
    std::cout << report;
  } else {
    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot write report: " + out_path);
    out << report;
  }
  if (charts) {
    fs::path base = out_path.empty() ? fs::path("report") : fs::path(out_path).replace_extension();
    std::ofstream reward(base.string() + "_reward.svg");
    reward << render_reward_chart(records);
    std::ofstream throughput(base.string() + "_throughput.svg");
    throughput << render_throughput_chart(records);
    std::cerr << "charts: " << base.string() << "_reward.svg, " << base.string()
              << "_throughput.svg\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concurrency-controlled partial-rollout RL training on a simulated cluster"};
  app.require_subcommand(1);

  Overrides o;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "JSON config file (desk preset when omitted)");
    cmd->add_option("--seed", o.seed, "override config seed")->each([&](const std::string&) {
      o.seed_set = true;
    });
    cmd->add_option("--steps", o.steps, "override total_steps")->each([&](const std::string&) {
      o.steps_set = true;
    });
    cmd->add_option("--mode", o.mode, "synchronous | naive_partial | copris");
    cmd->add_option("--concurrency", o.concurrency, "override engine concurrency N'")
        ->each([&](const std::string&) { o.concurrency_set = true; });
    cmd->add_option("--is", o.is_flag, "importance sampling correction: on | off");
    cmd->add_option("--out-dir", o.out_dir, "output directory");
  };

  CLI::App* run = app.add_subcommand("run", "run one experiment");
  add_common(run);
  run->add_option("--parallel-seeds", o.parallel_seeds,
                  "run this many consecutive seeds concurrently");

  CLI::App* ablate = app.add_subcommand("ablate", "sweep one axis, emit a comparison table");
  add_common(ablate);
  std::string axis, values;
  ablate->add_option("--axis", axis, "concurrency | is | mode")->required();
  ablate->add_option("--values", values, "comma-separated axis values")->required();

  CLI::App* report = app.add_subcommand("report", "markdown report from run records");
  std::vector<std::string> record_paths;
  std::string report_out;
  bool report_charts = false;
  report->add_option("records", record_paths, "run_record.jsonl paths")->required();
  report->add_option("--out", report_out, "write report to this file instead of stdout");
  report->add_flag("--charts", report_charts, "also emit static SVG charts");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(o);
    if (ablate->parsed()) return cmd_ablate(o, axis, values);
    if (report->parsed()) return cmd_report(record_paths, report_out, report_charts);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
