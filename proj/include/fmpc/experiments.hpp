#pragma once

// Scenario execution and CSV outputs.
//
//   trajectory.csv  t, z1..z4, y, y_ref, e_i, k_i, bound_i, u, margin
//   summary.csv     entry, metric, value
//   mpc_steps.csv   one row per receding-horizon step
//   ident_report.csv, ident_fits.csv, prediction.csv for identification
//
// Exit status: 0 success, 1 configuration error, 2 infeasibility or runtime
// failure (with an error row in summary.csv).

#include "fmpc/config.hpp"
#include "fmpc/csv.hpp"
#include "fmpc/ident.hpp"
#include "fmpc/mpc.hpp"
#include "fmpc/simloop.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace fmpc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitInfeasible = 2;

class IncomparableScenarios : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Metrics shared by every experiment kind; NaN where a metric does not apply.
struct ScenarioOutcome {
  int exit_code = kExitOk;
  std::filesystem::path directory;
  std::map<std::string, double> metrics;

  double metric(const std::string& name) const {
    const auto it = metrics.find(name);
    return it == metrics.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
  }
};

inline const std::vector<std::string>& comparison_metrics() {
  static const std::vector<std::string> m{"performance", "min_margin", "control_range",
                                          "coarsest_feasible_tau"};
  return m;
}

inline std::vector<std::string> trajectory_header(int levels) {
  std::vector<std::string> h{"t", "z1", "z2", "z3", "z4", "y", "y_ref"};
  for (const char* prefix : {"e_", "k_", "bound_"}) {
    for (int i = 0; i < levels; ++i) h.push_back(prefix + std::to_string(i));
  }
  h.push_back("u");
  h.push_back("margin");
  return h;
}

inline void write_trajectory(const std::filesystem::path& path, const SimRecord& rec) {
  CsvWriter w(path.string(), trajectory_header(rec.levels));
  for (const auto& row : rec.rows) {
    w.add(row.t);
    for (Eigen::Index i = 0; i < row.z.size(); ++i) w.add(row.z[i]);
    w.add(row.y).add(row.y_ref);
    for (const auto* arr : {&row.e, &row.gain, &row.bound}) {
      for (int i = 0; i < rec.levels; ++i) w.add((*arr)[static_cast<std::size_t>(i)]);
    }
    w.add(row.u).add(row.margin);
    w.end_row();
  }
}

class SummaryWriter {
 public:
  explicit SummaryWriter(const std::filesystem::path& path)
      : w_(path.string(), {"entry", "metric", "value"}) {}

  void add(const std::string& entry, const std::string& metric, double value) {
    w_.add(entry).add(metric).add(value);
    w_.end_row();
  }
  void add_text(const std::string& entry, const std::string& metric, const std::string& value) {
    w_.add(entry).add(metric).add(value);
    w_.end_row();
  }

 private:
  CsvWriter w_;
};

namespace detail {

inline double safe_performance(const SimRecord& rec, const StageCost& cost, double delta,
                               double horizon) {
  try {
    return performance_measure(rec, cost, delta, horizon);
  } catch (const GridMismatch&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// Standard per-record metrics, written to the summary under `entry`.
inline std::map<std::string, double> record_metrics(const Scenario& sc, const SimRecord& rec) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> m;
  m["feasible"] = rec.feasible ? 1.0 : 0.0;
  m["aborted"] = rec.aborted ? 1.0 : 0.0;
  m["first_violation"] = rec.first_violation.value_or(nan);
  m["min_margin"] = rec.min_margin();
  m["min_margin_until_exit"] = rec.min_margin_until_exit();
  m["u_min"] = rec.u_min();
  m["u_max"] = rec.u_max();
  m["control_range"] = rec.control_range_width();
  m["end_time"] = rec.end_time();
  m["performance"] = safe_performance(rec, StageCost{StageCost::Kind::Classical, sc.cost.lambda},
                                      sc.performance_delta, sc.t_end);
  m["performance_funnel"] = safe_performance(
      rec, StageCost{StageCost::Kind::Funnel, sc.cost.lambda}, sc.performance_delta, sc.t_end);
  return m;
}

inline void write_metrics(SummaryWriter& s, const std::string& entry,
                          const std::map<std::string, double>& m) {
  for (const auto& [k, v] : m) s.add(entry, k, v);
}

inline std::string tau_label(double tau) {
  const double inv = 1.0 / tau;
  if (std::abs(inv - std::round(inv)) < 1e-9 * inv) {
    return "1/" + std::to_string(static_cast<long>(std::llround(inv)));
  }
  return format_number(tau);
}

inline ScenarioOutcome run_continuous(const Scenario& sc, const std::filesystem::path& dir,
                                      SummaryWriter& summary) {
  const MassOnCar plant(sc.plant);
  ContinuousOptions opt = sc.continuous;
  const SimRecord rec = simulate_fc_continuous(plant, sc.funnel, sc.reference, sc.z0, sc.t_end, opt);
  write_trajectory(dir / "trajectory.csv", rec);
  ScenarioOutcome out;
  out.metrics = record_metrics(sc, rec);
  out.metrics["coarsest_feasible_tau"] = std::numeric_limits<double>::quiet_NaN();
  write_metrics(summary, "run", out.metrics);
  out.exit_code = rec.feasible ? kExitOk : kExitInfeasible;
  return out;
}

inline ScenarioOutcome run_zoh(const Scenario& sc, const std::filesystem::path& dir,
                               SummaryWriter& summary) {
  const MassOnCar plant(sc.plant);
  ScenarioOutcome out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double coarsest = nan;
  bool all_feasible = true;
  const bool single = sc.taus.size() == 1;
  for (std::size_t i = 0; i < sc.taus.size(); ++i) {
    const double tau = sc.taus[i];
    const SimRecord rec =
        simulate_fc_zoh(plant, sc.funnel, sc.reference, sc.z0, sc.t_end, tau, sc.zoh);
    const std::filesystem::path sub = single ? dir : dir / ("tau_" + std::to_string(i + 1));
    std::filesystem::create_directories(sub);
    write_trajectory(sub / "trajectory.csv", rec);
    auto m = record_metrics(sc, rec);
    m["tau"] = tau;
    const std::string entry = single ? "run" : "tau_" + std::to_string(i + 1);
    write_metrics(summary, entry, m);
    summary.add_text(entry, "tau_label", tau_label(tau));
    if (rec.feasible && !(coarsest >= tau)) coarsest = tau;
    all_feasible = all_feasible && rec.feasible;
    if (single) out.metrics = m;
  }
  if (!single) {
    for (const auto& k : {"performance", "min_margin", "control_range"}) out.metrics[k] = nan;
  }
  out.metrics["coarsest_feasible_tau"] = coarsest;
  summary.add("run", "coarsest_feasible_tau", coarsest);
  if (!single) {
    out.metrics["feasible"] = all_feasible ? 1.0 : 0.0;
    summary.add("run", "feasible", all_feasible ? 1.0 : 0.0);
  }
  out.exit_code = all_feasible ? kExitOk : kExitInfeasible;
  return out;
}

inline ScenarioOutcome run_mpc(const Scenario& sc, const std::filesystem::path& dir,
                               SummaryWriter& summary) {
  const MassOnCar plant(sc.plant);
  ScenarioOutcome out;
  MpcRun run = run_funnel_mpc(plant, sc.funnel, sc.reference, sc.z0, sc.mpc, sc.cost, sc.t_end);
  write_trajectory(dir / "trajectory.csv", run.record);
  {
    CsvWriter w((dir / "mpc_steps.csv").string(),
                {"t", "theta", "iterations", "converged", "objective", "cost",
                 "warm_start_objective", "predicted_min_margin", "open_loop_measure", "u",
                 "warm_start_source"});
    for (const auto& s : run.steps) {
      w.add(s.t).add(s.theta).add(s.iterations).add(s.converged ? 1 : 0).add(s.objective);
      w.add(s.cost).add(s.warm_start_objective).add(s.predicted_min_margin);
      w.add(s.open_loop_measure).add(s.u).add(s.warm_start_source);
      w.end_row();
    }
  }
  out.metrics = record_metrics(sc, run.record);
  out.metrics["coarsest_feasible_tau"] =
      run.record.feasible ? sc.mpc.delta : std::numeric_limits<double>::quiet_NaN();
  write_metrics(summary, "mpc", out.metrics);

  long iterations = 0;
  int unconverged = 0;
  int worse = 0;
  for (const auto& s : run.steps) {
    iterations += s.iterations;
    unconverged += s.converged ? 0 : 1;
    worse += s.objective > s.warm_start_objective ? 1 : 0;
  }
  summary.add("mpc", "steps", static_cast<double>(run.steps.size()));
  summary.add("mpc", "solver_iterations", static_cast<double>(iterations));
  summary.add("mpc", "unconverged_steps", unconverged);
  summary.add("mpc", "steps_worse_than_warm_start", worse);
  if (!run.steps.empty()) {
    summary.add("mpc", "first_open_loop_measure", run.steps.front().open_loop_measure);
  }

  // funnel control on the same setup: sampled with tau = delta, and continuous
  SampledOptions zopt = sc.zoh;
  const SimRecord zoh =
      simulate_fc_zoh(plant, sc.funnel, sc.reference, sc.z0, sc.t_end, sc.mpc.delta, zopt);
  const SimRecord cont =
      simulate_fc_continuous(plant, sc.funnel, sc.reference, sc.z0, sc.t_end, sc.continuous);
  std::filesystem::create_directories(dir / "fc_zoh");
  std::filesystem::create_directories(dir / "fc_continuous");
  write_trajectory(dir / "fc_zoh" / "trajectory.csv", zoh);
  write_trajectory(dir / "fc_continuous" / "trajectory.csv", cont);
  const auto mz = record_metrics(sc, zoh);
  const auto mc = record_metrics(sc, cont);
  write_metrics(summary, "fc_zoh", mz);
  write_metrics(summary, "fc_continuous", mc);
  const double perf = out.metrics["performance"];
  summary.add("comparison", "performance_ratio_fc_zoh", perf / mz.at("performance"));
  summary.add("comparison", "performance_ratio_fc_continuous", perf / mc.at("performance"));
  summary.add("comparison", "control_range_ratio_fc_zoh",
              out.metrics["control_range"] / mz.at("control_range"));
  summary.add("comparison", "control_range_ratio_fc_continuous",
              out.metrics["control_range"] / mc.at("control_range"));
  out.exit_code = run.record.feasible ? kExitOk : kExitInfeasible;
  return out;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline ScenarioOutcome run_ident(const Scenario& sc, const std::filesystem::path& dir,
                                 SummaryWriter& summary) {
  const MassOnCar plant(sc.plant);
  const IdentSettings& st = sc.ident;
  const LearningData truth =
      collect_learning_data(plant, sc.funnel, sc.reference, sc.z0, st.tau, st.horizon);

  CsvWriter fits((dir / "ident_fits.csv").string(),
                 {"t_bar", "seed", "alpha", "m1", "m2", "k", "d", "z0_1", "z0_2", "z0_3", "z0_4",
                  "residual", "error_2", "error_inf", "evaluations", "best_start",
                  "finite_starts"});
  CsvWriter report((dir / "ident_report.csv").string(),
                   {"t_bar", "samples", "seeds", "error_2", "error_inf", "error_2_min",
                    "error_2_max", "residual"});

  std::vector<double> medians;
  std::vector<std::vector<double>> first_gaps;
  double last_sup = 0.0;
  for (std::size_t j = 0; j < st.t_bars.size(); ++j) {
    const double t_bar = st.t_bars[j];
    const LearningData data =
        collect_learning_data(plant, sc.funnel, sc.reference, sc.z0, st.tau, t_bar);
    std::vector<double> e2, einf, res;
    for (int s = 0; s < st.seeds; ++s) {
      IdentOptions opt = st.options;
      opt.seed = sc.seed + static_cast<std::uint64_t>(s);
      const IdentResult r = identify(data, st.box, opt);
      const PredictionError pe = prediction_error(r.fitted, truth);
      if (s == 0) first_gaps.push_back(pe.gap);
      e2.push_back(pe.norm2);
      einf.push_back(pe.norm_inf);
      res.push_back(r.residual);
      const auto v = r.fitted.to_vector();
      fits.add(t_bar).add(static_cast<long>(opt.seed));
      for (int i = 0; i < kIdentDim; ++i) fits.add(v[i]);
      fits.add(r.residual).add(pe.norm2).add(pe.norm_inf).add(r.evaluations).add(r.best_start);
      fits.add(r.finite_starts);
      fits.end_row();
    }
    const double m2 = median(e2);
    const double minf = median(einf);
    medians.push_back(m2);
    last_sup = minf;
    report.add(t_bar).add(data.samples()).add(st.seeds).add(m2).add(minf);
    report.add(*std::min_element(e2.begin(), e2.end()));
    report.add(*std::max_element(e2.begin(), e2.end())).add(median(res));
    report.end_row();
    const std::string entry = "t_bar_" + std::to_string(j + 1);
    summary.add(entry, "t_bar", t_bar);
    summary.add(entry, "error_2", m2);
    summary.add(entry, "error_inf", minf);
    summary.add(entry, "residual", median(res));
  }

  // open-loop predictions of the first seed, every 100th sample
  {
    std::vector<std::string> header{"t", "u", "y"};
    for (std::size_t j = 0; j < st.t_bars.size(); ++j) {
      header.push_back("gap_" + std::to_string(j + 1));
    }
    CsvWriter w((dir / "prediction.csv").string(), header);
    for (std::size_t i = 0; i < truth.y.size(); i += 100) {
      w.add(static_cast<double>(i) * truth.tau).add(truth.u[i]).add(truth.y[i]);
      for (const auto& g : first_gaps) w.add(g[i]);
      w.end_row();
    }
  }

  double output_max = 0.0;
  for (double y : truth.y) output_max = std::max(output_max, std::abs(y));
  bool decreasing = true;
  for (std::size_t j = 1; j < medians.size(); ++j) decreasing = decreasing && medians[j] < medians[j - 1];
  summary.add("run", "output_max", output_max);
  summary.add("run", "error_2_strictly_decreasing", decreasing ? 1.0 : 0.0);
  summary.add("run", "final_error_inf_relative", last_sup / output_max);

  ScenarioOutcome out;
  for (const auto& k : comparison_metrics()) out.metrics[k] = std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace detail

/// Runs the scenario and writes its outputs into `dir` (created if needed).
inline ScenarioOutcome run_scenario(const Scenario& sc, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  SummaryWriter summary(dir / "summary.csv");
  summary.add_text("scenario", "name", sc.name);
  summary.add_text("scenario", "kind", to_string(sc.kind));
  summary.add_text("scenario", "seed", std::to_string(sc.seed));
  ScenarioOutcome out;
  try {
    switch (sc.kind) {
      case ExperimentKind::Continuous: out = detail::run_continuous(sc, dir, summary); break;
      case ExperimentKind::Zoh: out = detail::run_zoh(sc, dir, summary); break;
      case ExperimentKind::Mpc: out = detail::run_mpc(sc, dir, summary); break;
      case ExperimentKind::Ident: out = detail::run_ident(sc, dir, summary); break;
    }
  } catch (const FunnelViolation& ex) {
    summary.add_text("error", "funnel_violation", ex.what());
    out.exit_code = kExitInfeasible;
  } catch (const std::exception& ex) {
    summary.add_text("error", "runtime", ex.what());
    out.exit_code = kExitInfeasible;
  }
  out.directory = dir;
  summary.add("scenario", "exit_code", out.exit_code);
  return out;
}

inline std::filesystem::path output_directory(const std::filesystem::path& root,
                                              const Scenario& sc) {
  return root / sc.output;
}

struct Comparison {
  std::string metric;
  std::string scenario_a;
  std::string scenario_b;
  double value_a = 0.0;
  double value_b = 0.0;
  double ratio = 0.0;  // value_a / value_b
};

/// Runs both scenarios and writes compare.csv into `dir`.
inline Comparison compare_scenarios(const Scenario& a, const Scenario& b, const std::string& metric,
                                    const std::filesystem::path& root,
                                    const std::filesystem::path& dir) {
  const auto& known = comparison_metrics();
  if (std::find(known.begin(), known.end(), metric) == known.end()) {
    throw ConfigError("--metric", "unknown metric '" + metric + "'");
  }
  if (!same_setup(a, b)) {
    throw IncomparableScenarios("scenarios '" + a.name + "' and '" + b.name +
                                "' differ in plant, funnel, reference or initial state");
  }
  const ScenarioOutcome oa = run_scenario(a, output_directory(root, a));
  const ScenarioOutcome ob = (a == b) ? oa : run_scenario(b, output_directory(root, b));
  Comparison c{metric, a.name, b.name, oa.metric(metric), ob.metric(metric), 0.0};
  c.ratio = c.value_a / c.value_b;
  std::filesystem::create_directories(dir);
  CsvWriter w((dir / "compare.csv").string(),
              {"metric", "scenario_a", "scenario_b", "value_a", "value_b", "ratio"});
  w.add(c.metric).add(c.scenario_a).add(c.scenario_b).add(c.value_a).add(c.value_b).add(c.ratio);
  w.end_row();
  return c;
}

struct SweepEntry {
  std::string value;
  ScenarioOutcome outcome;
};

/// Re-runs the scenario with `section.key` set to each value in turn. Every
/// variant is validated before anything runs.
inline std::vector<SweepEntry> sweep_scenario(const boost::property_tree::ptree& tree,
                                              const std::string& default_name,
                                              const std::string& param,
                                              const std::vector<std::string>& values,
                                              const std::filesystem::path& root,
                                              std::optional<std::uint64_t> seed = {}) {
  if (param.find('.') == std::string::npos) {
    throw ConfigError("--param", "expected 'section.key', got '" + param + "'");
  }
  if (values.empty()) throw ConfigError("--values", "empty list");
  std::vector<Scenario> variants;
  for (const auto& v : values) {
    boost::property_tree::ptree t = tree;
    t.put(param, v);
    Scenario sc = scenario_from_tree(t, default_name);
    if (seed) sc.seed = *seed;
    variants.push_back(std::move(sc));
  }
  const std::filesystem::path base = root / variants.front().output;
  std::filesystem::create_directories(base);
  std::vector<SweepEntry> entries;
  CsvWriter w((base / "sweep.csv").string(),
              {"param", "value", "directory", "exit_code", "feasible", "performance", "min_margin",
               "control_range", "coarsest_feasible_tau"});
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const std::string sub = "sweep_" + std::to_string(i + 1);
    ScenarioOutcome o = run_scenario(variants[i], base / sub);
    w.add(param).add(values[i]).add(sub).add(o.exit_code).add(o.metric("feasible"));
    w.add(o.metric("performance")).add(o.metric("min_margin")).add(o.metric("control_range"));
    w.add(o.metric("coarsest_feasible_tau"));
    w.end_row();
    entries.push_back({values[i], std::move(o)});
  }
  return entries;
}

}  // namespace fmpc
