// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "fmpc/config.hpp"
#include "fmpc/ident.hpp"
#include "fmpc/mpc.hpp"
#include "fmpc/simloop.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fmpc::Scenario scenario(const std::string& name) {
  return fmpc::load_scenario(std::string(FMPC_SCENARIO_DIR) + "/" + name + ".ini");
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

int failures = 0;

void verdict(int id, bool pass, const std::string& title, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << title << "  ["
            << detail << "]" << std::endl;
}

double classical_measure(const fmpc::Scenario& sc, const fmpc::SimRecord& rec) {
  return fmpc::performance_measure(rec, {fmpc::StageCost::Kind::Classical, sc.cost.lambda},
                                   sc.performance_delta, sc.t_end);
}

struct TimedRecord {
  fmpc::SimRecord rec;
  double seconds = 0.0;
};

struct TimedMpc {
  fmpc::Scenario sc;
  fmpc::MpcRun run;
  double seconds = 0.0;
};

TimedMpc run_mpc(const std::string& name) {
  TimedMpc m{scenario(name), {}, 0.0};
  const auto t0 = Clock::now();
  m.run = fmpc::run_funnel_mpc(fmpc::MassOnCar(m.sc.plant), m.sc.funnel, m.sc.reference, m.sc.z0,
                               m.sc.mpc, m.sc.cost, m.sc.t_end);
  m.seconds = seconds_since(t0);
  std::cout << "  " << name << ": " << m.run.steps.size() << " steps in " << num(m.seconds)
            << " s" << std::endl;
  return m;
}

TimedRecord run_zoh(const fmpc::Scenario& sc, double tau) {
  const auto t0 = Clock::now();
  TimedRecord t{fmpc::simulate_fc_zoh(fmpc::MassOnCar(sc.plant), sc.funnel, sc.reference, sc.z0,
                                      sc.t_end, tau, sc.zoh),
                0.0};
  t.seconds = seconds_since(t0);
  return t;
}

TimedRecord run_continuous(const fmpc::Scenario& sc) {
  const auto t0 = Clock::now();
  TimedRecord t{fmpc::simulate_fc_continuous(fmpc::MassOnCar(sc.plant), sc.funnel, sc.reference,
                                             sc.z0, sc.t_end, sc.continuous),
                0.0};
  t.seconds = seconds_since(t0);
  return t;
}

bool inside(const fmpc::SimRecord& rec) { return rec.feasible && rec.min_margin() > 1e-6; }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void criterion_1(const TimedMpc& classical, const TimedMpc& funnel) {
  const fmpc::Scenario cont_sc = scenario("paper_3_1_continuous");
  const TimedRecord cont = run_continuous(cont_sc);
  const fmpc::Scenario zoh_sc = scenario("paper_3_1_zoh_sweep");
  const TimedRecord zoh = run_zoh(zoh_sc, 1.0 / 600.0);
  const bool pass = inside(cont.rec) && inside(zoh.rec) && inside(classical.run.record) &&
                    inside(funnel.run.record) && cont.seconds < 120 && zoh.seconds < 120 &&
                    classical.seconds < 120 && funnel.seconds < 120;
  std::ostringstream d;
  d << "min margin / runtime s: continuous " << num(cont.rec.min_margin()) << " / "
    << num(cont.seconds) << ", zoh 1/600 " << num(zoh.rec.min_margin()) << " / "
    << num(zoh.seconds) << ", mpc classical " << num(classical.run.record.min_margin()) << " / "
    << num(classical.seconds) << ", mpc funnel " << num(funnel.run.record.min_margin()) << " / "
    << num(funnel.seconds);
  verdict(1, pass, "funnel invariance", d.str());
}

void criterion_2() {
  const fmpc::Scenario sc = scenario("paper_3_1_zoh_degradation");
  std::vector<double> margin, before_exit, range;
  for (double tau : sc.taus) {
    const fmpc::SimRecord rec = run_zoh(sc, tau).rec;
    margin.push_back(rec.min_margin());
    before_exit.push_back(rec.min_margin_until_exit());
    range.push_back(rec.control_range_width());
  }
  int inversions = 0;
  bool ordered = true;
  for (std::size_t j = 1; j < margin.size(); ++j) {
    if (margin[j] >= margin[j - 1]) continue;
    ++inversions;
    if ((margin[j - 1] - margin[j]) >= 0.01 * std::abs(margin[j - 1])) ordered = false;
  }
  ordered = ordered && inversions <= 1;
  const bool widest = *std::max_element(range.begin(), range.end()) == range.front();
  std::ostringstream d;
  for (std::size_t j = 0; j < sc.taus.size(); ++j) {
    d << (j ? "; " : "") << "tau 1/" << std::llround(1.0 / sc.taus[j]) << ": margin "
      << num(margin[j]) << ", margin before exit " << num(before_exit[j]) << ", range "
      << num(range[j]);
  }
  verdict(2, ordered && widest, "zoh degradation ordering", d.str());
}

void criteria_3_4(const TimedMpc& classical) {
  const fmpc::Scenario zsc = scenario("paper_3_2_fc_zoh");
  const fmpc::SimRecord zoh = run_zoh(zsc, zsc.taus.front()).rec;
  const double perf_mpc = classical_measure(classical.sc, classical.run.record);
  const double perf_fc = classical_measure(zsc, zoh);
  const double ratio = perf_mpc / perf_fc;
  const double range_ratio =
      classical.run.record.control_range_width() / zoh.control_range_width();
  std::ostringstream d3;
  d3 << "performance mpc " << num(perf_mpc) << " vs fc zoh 1/40 " << num(perf_fc) << ", ratio "
     << num(ratio) << " (target 0.22), range ratio " << num(range_ratio) << " (target 0.18)";
  verdict(3, ratio < 0.5 && range_ratio < 1.0, "mpc outperforms fc", d3.str());

  const double m_mpc = classical.run.record.min_margin();
  const bool fc_weak = !zoh.feasible || zoh.min_margin() < 0.1 * m_mpc;
  std::ostringstream d4;
  d4 << "mpc feasible " << classical.run.record.feasible << " margin " << num(m_mpc)
     << "; fc zoh 1/40 feasible " << zoh.feasible << " margin " << num(zoh.min_margin());
  if (zoh.first_violation) d4 << " first exit t = " << num(*zoh.first_violation);
  verdict(4, inside(classical.run.record) && fc_weak, "sampling-rate relaxation", d4.str());
}

void criterion_5(const TimedMpc& classical, const TimedMpc& funnel) {
  const double mc = classical.run.record.min_margin();
  const double mf = funnel.run.record.min_margin();
  const bool same_lambda = classical.sc.cost.lambda == funnel.sc.cost.lambda;
  verdict(5, same_lambda && mf > mc, "funnel stage cost keeps a larger distance",
          "min margin funnel cost " + num(mf) + " vs classical " + num(mc));
}

void criterion_6(const TimedMpc& rk4, const TimedMpc& euler) {
  const double a = classical_measure(rk4.sc, rk4.run.record);
  const double b = classical_measure(euler.sc, euler.run.record);
  const double rel = std::abs(a - b) / std::abs(a);
  verdict(6, rel < 0.01, "integrator robustness",
          "performance rk4 " + num(a) + " vs euler " + num(b) + ", relative gap " + num(rel));
}

void criterion_7(const TimedMpc& r3) {
  const TimedRecord fc = run_continuous(r3.sc);
  const double p_mpc = classical_measure(r3.sc, r3.run.record);
  const double p_fc = classical_measure(r3.sc, fc.rec);
  std::ostringstream d;
  d << "mpc feasible " << r3.run.record.feasible << " margin " << num(r3.run.record.min_margin())
    << ", performance mpc " << num(p_mpc) << " vs fc " << num(p_fc);
  verdict(7, inside(r3.run.record) && fc.rec.feasible && p_mpc < p_fc, "relative degree three",
          d.str());
}

void criterion_8() {
  const auto t0 = Clock::now();
  const fmpc::Scenario sc = scenario("paper_3_3_ident");
  const fmpc::MassOnCar plant(sc.plant);
  const fmpc::IdentSettings& st = sc.ident;
  const fmpc::LearningData truth =
      fmpc::collect_learning_data(plant, sc.funnel, sc.reference, sc.z0, st.tau, st.horizon);
  double y_max = 0.0;
  for (double y : truth.y) y_max = std::max(y_max, std::abs(y));

  std::vector<double> medians;
  double last_sup = 0.0;
  for (double t_bar : st.t_bars) {
    const fmpc::LearningData data =
        fmpc::collect_learning_data(plant, sc.funnel, sc.reference, sc.z0, st.tau, t_bar);
    std::vector<double> e2;
    last_sup = 0.0;
    for (int s = 0; s < st.seeds; ++s) {
      fmpc::IdentOptions opt = st.options;
      opt.seed = sc.seed + static_cast<std::uint64_t>(s);
      const fmpc::IdentResult r = fmpc::identify(data, st.box, opt);
      const fmpc::PredictionError pe = fmpc::prediction_error(r.fitted, truth);
      e2.push_back(pe.norm2);
      last_sup = std::max(last_sup, pe.norm_inf);
    }
    medians.push_back(median(e2));
  }
  bool decreasing = true;
  for (std::size_t j = 1; j < medians.size(); ++j) {
    decreasing = decreasing && medians[j] < medians[j - 1];
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "median error_2";
  for (std::size_t j = 0; j < medians.size(); ++j) {
    d << (j ? ", " : " ") << "t_bar " << num(st.t_bars[j]) << ": " << num(medians[j]);
  }
  d << "; sup gap at last t_bar " << num(last_sup) << " vs max|y| " << num(y_max) << "; "
    << num(secs) << " s";
  verdict(8, decreasing && last_sup < 0.01 * y_max && secs < 600, "identification trend", d.str());
}

void criterion_9(const std::vector<const TimedMpc*>& mpc_runs) {
  std::ostringstream d;
  bool pass = true;

  double jet = 0.0, gamma = 0.0;
  for (int r : {2, 3}) {
    jet = std::max(jet, oracle::jet_derivatives_vs_finite_differences(r, 100, 900 + r).worst);
    gamma = std::max(gamma, oracle::high_gain_vs_finite_differences(r, 100, 910 + r).worst);
  }
  pass = pass && jet < 1e-6 && gamma < 1e-6;
  d << "(a) jet " << num(jet) << ", gamma " << num(gamma);

  const double mass = oracle::mass_matrix_residual(1000, 920).worst;
  pass = pass && mass < 1e-12;
  d << "; (b) mass matrix " << num(mass);

  double obj = 0.0;
  for (double t_bar : {0.1, 0.2, 0.5, 1.0}) obj = std::max(obj, oracle::objective_at_truth(t_bar));
  pass = pass && obj < 1e-10;
  d << "; (c) objective at truth " << num(obj);

  double active = 0.0;
  for (int r : {2, 3}) active = std::max(active, oracle::theta_activeness(r, 100, 930 + r).worst);
  pass = pass && active <= 1e-12;
  d << "; (d) theta activeness " << num(active);

  int worse = 0, steps = 0;
  for (const TimedMpc* m : mpc_runs) {
    for (const auto& s : m->run.steps) {
      ++steps;
      if (!(s.objective <= s.warm_start_objective)) ++worse;
    }
  }
  pass = pass && worse == 0 && steps > 0;
  d << "; (e) " << worse << " of " << steps << " steps above the warm start";
  verdict(9, pass, "oracle suites", d.str());
}

}  // namespace

int main() {
  try {
    std::cout << "running the shipped mpc scenarios" << std::endl;
    const TimedMpc classical = run_mpc("paper_3_2_mpc_classical");
    const TimedMpc funnel = run_mpc("paper_3_2_mpc_funnel");
    const TimedMpc euler = run_mpc("paper_3_2_mpc_euler");
    const TimedMpc r3 = run_mpc("paper_3_2_mpc_r3");

    criterion_1(classical, funnel);
    criterion_2();
    criteria_3_4(classical);
    criterion_5(classical, funnel);
    criterion_6(classical, euler);
    criterion_7(r3);
    criterion_8();
    criterion_9({&classical, &funnel, &euler, &r3});
  } catch (const std::exception& e) {
    std::cout << "acceptance run aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << failures << " of 9 criteria failed" << std::endl;
  return failures == 0 ? 0 : 1;
}
