#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "copris/io.hpp"
#include "copris/trainer.hpp"

namespace copris {

namespace detail {

inline std::string run_label(const RunConfig& cfg) {
  std::ostringstream s;
  s << to_string(cfg.mode) << " is=" << (cfg.is_enabled ? "on" : "off")
    << " n'=" << cfg.engine.concurrency << " seed=" << cfg.seed;
  return s.str();
}

// Config identity ignoring the seed, used to group seed replicas.
inline std::string config_family(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.seed = 0;
  return emit_config(c).dump();
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// One named series for chart emission.
struct ChartSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/**
 * Minimal static SVG line chart: axes, tick labels, one polyline per series
 * and a text legend. No dependencies, deliberately plain.
 */
inline std::string render_svg_chart(const std::string& title,
                                    const std::vector<ChartSeries>& series) {
  const int w = 720, h = 420, ml = 60, mr = 160, mt = 40, mb = 40;
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
      << title << "</text>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
      << h - mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    double xv = xmin + (xmax - xmin) * t / 4.0;
    double yv = ymin + (ymax - ymin) * t / 4.0;
    svg << "<text x=\"" << px(xv) << "\" y=\"" << h - mb + 16
        << "\" text-anchor=\"middle\">" << detail::fmt_double(xv) << "</text>\n";
    svg << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\">" << detail::fmt_double(yv) << "</text>\n";
  }
  for (size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = palette[i % 8];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (size_t k = 0; k < s.x.size(); ++k) svg << px(s.x[k]) << ',' << py(s.y[k]) << ' ';
    svg << "\"/>\n";
    double ly = mt + 16.0 * static_cast<double>(i);
    svg << "<line x1=\"" << w - mr + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - mr + 30
        << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << w - mr + 34 << "\" y=\"" << ly + 4 << "\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

// Reward-vs-step chart from the eval records of each run.
inline std::string render_reward_chart(const std::vector<RunRecord>& records) {
  std::vector<ChartSeries> series;
  for (const auto& r : records) {
    ChartSeries s;
    s.label = detail::run_label(r.config);
    for (const auto& e : r.evals) {
      s.x.push_back(e.step);
      s.y.push_back(e.mean_reward);
    }
    series.push_back(std::move(s));
  }
  return render_svg_chart("greedy reward vs step", series);
}

// Effective-throughput-vs-step chart.
inline std::string render_throughput_chart(const std::vector<RunRecord>& records) {
  std::vector<ChartSeries> series;
  for (const auto& r : records) {
    ChartSeries s;
    s.label = detail::run_label(r.config);
    for (const auto& m : r.steps) {
      s.x.push_back(m.step);
      s.y.push_back(m.effective_throughput);
    }
    series.push_back(std::move(s));
  }
  return render_svg_chart("effective throughput vs step", series);
}

/**
 * Markdown report over one or more run records: reward and throughput
 * against training step, speedup ratios against the first run, and
 * median/min/max spread for seed replicas of the same config.
 */
inline std::string make_report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ConfigError("report requires at least one run record");
  using detail::fmt_double;
  std::ostringstream out;
  out << "# Run report\n\n";

  out << "## Runs\n\n";
  out << "| run | mode | is | steps | final greedy reward | mean effective throughput | mean step time |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : records) {
    double mean_step = 0.0;
    for (const auto& s : r.steps) mean_step += s.step_time;
    if (!r.steps.empty()) mean_step /= static_cast<double>(r.steps.size());
    out << "| " << detail::run_label(r.config) << " | " << to_string(r.config.mode) << " | "
        << (r.config.is_enabled ? "on" : "off") << " | " << r.steps.size() << " | "
        << fmt_double(r.final_greedy_reward) << " | "
        << fmt_double(r.mean_effective_throughput()) << " | " << fmt_double(mean_step)
        << " |\n";
  }
  out << '\n';

  // Reward vs step from the eval records.
  std::set<int> eval_steps;
  for (const auto& r : records)
    for (const auto& e : r.evals) eval_steps.insert(e.step);
  if (!eval_steps.empty()) {
    out << "## Greedy reward vs step\n\n| step |";
    for (const auto& r : records) out << ' ' << detail::run_label(r.config) << " |";
    out << "\n|---|";
    for (size_t i = 0; i < records.size(); ++i) out << "---|";
    out << '\n';
    for (int step : eval_steps) {
      out << "| " << step << " |";
      for (const auto& r : records) {
        auto it = std::find_if(r.evals.begin(), r.evals.end(),
                               [&](const EvalRecord& e) { return e.step == step; });
        if (it == r.evals.end())
          out << "  |";
        else
          out << ' ' << fmt_double(it->mean_reward) << " |";
      }
      out << '\n';
    }
    out << '\n';
  }

  // Throughput vs step, downsampled to at most 20 rows.
  size_t max_steps = 0;
  for (const auto& r : records) max_steps = std::max(max_steps, r.steps.size());
  if (max_steps > 0) {
    size_t stride = std::max<size_t>(1, max_steps / 20);
    out << "## Effective throughput vs step\n\n| step |";
    for (const auto& r : records) out << ' ' << detail::run_label(r.config) << " |";
    out << "\n|---|";
    for (size_t i = 0; i < records.size(); ++i) out << "---|";
    out << '\n';
    for (size_t s = 0; s < max_steps; s += stride) {
      out << "| " << s << " |";
      for (const auto& r : records) {
        if (s < r.steps.size())
          out << ' ' << fmt_double(r.steps[s].effective_throughput) << " |";
        else
          out << "  |";
      }
      out << '\n';
    }
    out << '\n';
  }

  if (records.size() > 1) {
    out << "## Speedup vs first run\n\n";
    out << "| run | mean throughput | baseline throughput | speedup |\n|---|---|---|---|\n";
    double base = records.front().mean_effective_throughput();
    for (size_t i = 1; i < records.size(); ++i) {
      double tp = records[i].mean_effective_throughput();
      out << "| " << detail::run_label(records[i].config) << " | " << fmt_double(tp) << " | "
          << fmt_double(base) << " | " << fmt_double(base > 0.0 ? tp / base : 0.0) << " |\n";
    }
    out << '\n';
  }

  // Seed spread for replicas of the same config.
  std::map<std::string, std::vector<const RunRecord*>> families;
  for (const auto& r : records) families[detail::config_family(r.config)].push_back(&r);
  for (const auto& [key, group] : families) {
    if (group.size() < 2) continue;
    out << "## Seed spread (" << group.size() << " seeds, " << to_string(group[0]->config.mode)
        << " is=" << (group[0]->config.is_enabled ? "on" : "off") << ")\n\n";
    out << "| step | median reward | min | max |\n|---|---|---|---|\n";
    std::set<int> steps;
    for (const auto* r : group)
      for (const auto& e : r->evals) steps.insert(e.step);
    for (int step : steps) {
      std::vector<double> vals;
      for (const auto* r : group)
        for (const auto& e : r->evals)
          if (e.step == step) vals.push_back(e.mean_reward);
      if (vals.empty()) continue;
      out << "| " << step << " | " << fmt_double(detail::median(vals)) << " | "
          << fmt_double(*std::min_element(vals.begin(), vals.end())) << " | "
          << fmt_double(*std::max_element(vals.begin(), vals.end())) << " |\n";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace copris
