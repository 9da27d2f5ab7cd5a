#pragma once

// Funnel-MPC: feasibility margin Theta from a funnel-control rollout, the
// finite-horizon optimal control problem by direct single shooting, and the
// receding-horizon loop.
//
// OCP at (t_hat, x_hat), horizon T = N delta, piecewise-constant controls:
//   min  int l(t, x, u) dt
//   s.t. |e_i(t)| <= 1/phi_i(t)                         on [t_hat, t_hat + T]
//        |e_i(t_hat + delta)| <= 1/phi_i(t_hat + delta) - Theta
// Path constraints enter as a log barrier (classical cost) or through the
// cost itself (funnel cost, +inf outside). The tightening always uses a log
// barrier. Barrier terms are w * log(1 + 1/m), which is non-negative, so the
// objective can only drop as the weight w decreases.

#include "fmpc/funnel.hpp"
#include "fmpc/integrate.hpp"
#include "fmpc/quasi_newton.hpp"
#include "fmpc/simloop.hpp"
#include "fmpc/stage_cost.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmpc {

class InfeasibleInitialPoint : public std::runtime_error {
 public:
  InfeasibleInitialPoint(double t, double margin)
      : std::runtime_error("initial point outside the funnel at t=" + std::to_string(t) +
                           " (margin " + std::to_string(margin) + ")") {}
};

/// No strictly feasible control was found; carries the best infeasible
/// violation measure for diagnostics.
class SolverStalled : public std::runtime_error {
 public:
  SolverStalled(double t, double violation)
      : std::runtime_error("OCP solver found no strictly feasible control at t=" +
                           std::to_string(t) + " (violation " + std::to_string(violation) + ")") {}
};

class MpcStepError : public std::runtime_error {
 public:
  MpcStepError(std::size_t step, const std::string& what)
      : std::runtime_error("Funnel-MPC step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

enum class ThetaMode { AtInitialTime, MinOverHorizon };

inline const char* to_string(ThetaMode m) {
  return m == ThetaMode::AtInitialTime ? "at_initial_time" : "min_over_horizon";
}

struct MpcConfig {
  int intervals = 41;  // N, horizon T = N delta
  double delta = 1.0 / 40.0;
  int substeps = 5;  // fixed steps per control interval
  StepMethod integrator = StepMethod::RK4;
  int max_iterations = 20;  // per barrier stage
  double fd_step = 1e-6;    // relative central-difference step
  std::vector<double> barrier_weights{1e-2, 1e-4, 1e-6};
  double tolerance = 1e-5;
  bool enforce_feasibility_constraint = true;
  bool path_constraints = true;
  ThetaMode theta_mode = ThetaMode::MinOverHorizon;
  int rollout_samples = 20;  // funnel-control rollout samples per interval
  AdaptiveOptions rollout_tol{1e-8, 1e-10};
  SampledOptions plant{0.0, 10, {1e-10, 1e-12}};

  double horizon() const { return intervals * delta; }

  friend bool operator==(const MpcConfig&, const MpcConfig&) = default;

  void validate() const {
    if (!(delta > 0.0)) throw InvalidParameter("mpc: delta must be positive");
    if (intervals < 1) throw InvalidParameter("mpc: need at least one control interval");
    if (substeps < 1) throw InvalidParameter("mpc: substeps must be >= 1");
    if (max_iterations < 0) throw InvalidParameter("mpc: max_iterations must be >= 0");
    if (!(fd_step > 0.0)) throw InvalidParameter("mpc: fd_step must be positive");
    if (barrier_weights.empty()) throw InvalidParameter("mpc: need at least one barrier weight");
    for (std::size_t i = 0; i < barrier_weights.size(); ++i) {
      if (!(barrier_weights[i] > 0.0)) throw InvalidParameter("mpc: barrier weights must be > 0");
      if (i > 0 && barrier_weights[i] > barrier_weights[i - 1]) {
        throw InvalidParameter("mpc: barrier weights must be non-increasing");
      }
    }
    if (!(tolerance > 0.0)) throw InvalidParameter("mpc: tolerance must be positive");
    if (rollout_samples < 1) throw InvalidParameter("mpc: rollout_samples must be >= 1");
  }
};

/// Funnel-control rollout over [t_hat, t_hat + T].
struct FcRollout {
  double theta_initial = 0.0;  // min_i (1/phi_i(t_hat) - |e_i(t_hat)|)
  double theta_horizon = 0.0;  // same minimum over the whole rollout
  Eigen::VectorXd interval_mean_u;

  double theta(ThetaMode m) const {
    return m == ThetaMode::AtInitialTime ? theta_initial : theta_horizon;
  }
};

template <ControlAffinePlant Plant>
FcRollout fc_rollout(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                     double t_hat, const typename Plant::State& x_hat, const MpcConfig& cfg) {
  const ErrorCascade c0 = error_cascade_unchecked(plant, spec, ref, t_hat, x_hat);
  if (!c0.valid()) throw InfeasibleInitialPoint(t_hat, c0.margin());

  const double dt = cfg.delta / cfg.rollout_samples;
  const SimRecord rec = simulate_fc_continuous(plant, spec, ref, x_hat, t_hat + cfg.horizon(),
                                               {t_hat, dt, cfg.rollout_tol});
  FcRollout out;
  out.theta_initial = c0.margin();
  out.theta_horizon = rec.rows.front().margin;
  for (const auto& r : rec.rows) out.theta_horizon = std::min(out.theta_horizon, r.margin);

  out.interval_mean_u.resize(cfg.intervals);
  const std::size_t m = static_cast<std::size_t>(cfg.rollout_samples);
  for (int j = 0; j < cfg.intervals; ++j) {
    const std::size_t base = static_cast<std::size_t>(j) * m;
    double s = 0.0;
    for (std::size_t q = 0; q <= m; ++q) {
      const std::size_t idx = std::min(base + q, rec.rows.size() - 1);
      s += (q == 0 || q == m ? 0.5 : 1.0) * rec.rows[idx].u;
    }
    out.interval_mean_u[j] = s / static_cast<double>(m);
  }
  return out;
}

/// Theta = Psi(t_hat, x_hat, T): the feasibility margin of the funnel controller.
template <ControlAffinePlant Plant>
double theta(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref, double t_hat,
             const typename Plant::State& x_hat, const MpcConfig& cfg) {
  if (cfg.theta_mode == ThetaMode::AtInitialTime) {
    const ErrorCascade c = error_cascade_unchecked(plant, spec, ref, t_hat, x_hat);
    if (!c.valid()) throw InfeasibleInitialPoint(t_hat, c.margin());
    return c.margin();
  }
  return fc_rollout(plant, spec, ref, t_hat, x_hat, cfg).theta_horizon;
}

template <class State>
struct OcpSolution {
  Eigen::VectorXd u;
  std::vector<double> times;   // prediction grid (substeps)
  std::vector<State> states;   // predicted trajectory on `times`
  double objective = 0.0;      // barrier-augmented, at the final weight
  double cost = 0.0;           // quadrature of the stage cost alone
  double theta = 0.0;
  std::vector<double> terminal_margins;  // margin_i(t_hat + delta) - Theta
  double min_path_margin = 0.0;
  double open_loop_measure = 0.0;  // sum of l at the N interval starts
  double warm_start_objective = 0.0;  // funnel-control warm start, final weight
  std::vector<double> stage_objectives;  // objective after each barrier stage
  int iterations = 0;
  bool converged = false;
  std::string warm_start_source;
};

namespace detail {

struct RolloutTotals {
  double cost = 0.0;
  double barrier_path = 0.0;
  double barrier_terminal = 0.0;
  double violation = 0.0;  // sum of squared shortfalls below the restoration target
  double min_path_margin = std::numeric_limits<double>::infinity();
  bool feasible = true;
};

inline double barrier_term(double m) { return std::log1p(1.0 / m); }

/// Single-shooting evaluator with interval checkpoints, so a perturbation of
/// u_j only re-simulates intervals j..N-1.
template <ControlAffinePlant Plant>
class ShootingProblem {
 public:
  using State = typename Plant::State;

  ShootingProblem(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                  double t_hat, const State& x_hat, const MpcConfig& cfg, const StageCost& cost,
                  double theta, int substeps)
      : plant_(plant),
        spec_(spec),
        ref_(ref),
        t_hat_(t_hat),
        x_hat_(x_hat),
        cfg_(cfg),
        cost_(cost),
        theta_(theta),
        substeps_(substeps),
        h_(cfg.delta / substeps),
        checkpoints_(static_cast<std::size_t>(cfg.intervals)) {
    const int r = plant_.relative_degree();
    time_data_.reserve(static_cast<std::size_t>(cfg.intervals * substeps + 1));
    time_data_.push_back(funnel_time_data(spec_, ref_, r, t_hat_));
    for (int j = 0; j < cfg.intervals; ++j) {
      const double t_start = t_hat_ + j * cfg.delta;
      for (int s = 1; s <= substeps; ++s) {
        time_data_.push_back(funnel_time_data(spec_, ref_, r, t_start + s * h_));
      }
    }
    const ErrorCascade c = error_cascade_unchecked(plant_, time_data_.front(), x_hat_);
    g_start_ = cost_.state_part(c);
  }

  int intervals() const { return cfg_.intervals; }

  /// Barrier-augmented objective; +inf when some constraint is violated.
  double objective(const Eigen::VectorXd& u, double w) const {
    return combine(run(u, 0, initial_checkpoint(), nullptr, nullptr), w);
  }

  RolloutTotals totals(const Eigen::VectorXd& u, std::vector<double>* times = nullptr,
                       std::vector<State>* states = nullptr) const {
    return run(u, 0, initial_checkpoint(), times, states);
  }

  /// Smooth measure of constraint violation (restoration phase).
  double violation(const Eigen::VectorXd& u) const {
    return run(u, 0, initial_checkpoint(), nullptr, nullptr, true).violation;
  }

  /// Central differences of `objective(., w)` or, with `restoration`, of `violation`.
  void gradient(const Eigen::VectorXd& u, double w, Eigen::VectorXd& g, bool restoration) const {
    record_checkpoints_ = true;
    const RolloutTotals base = run(u, 0, initial_checkpoint(), nullptr, nullptr, restoration);
    record_checkpoints_ = false;
    const double f0 = restoration ? base.violation : combine(base, w);
    g.resize(u.size());
    Eigen::VectorXd up = u;
    for (Eigen::Index j = 0; j < u.size(); ++j) {
      const double step = cfg_.fd_step * std::max(1.0, std::abs(u[j]));
      const Checkpoint& cp = checkpoints_[static_cast<std::size_t>(j)];
      up[j] = u[j] + step;
      const RolloutTotals plus = run(up, static_cast<int>(j), cp, nullptr, nullptr, restoration);
      up[j] = u[j] - step;
      const RolloutTotals minus = run(up, static_cast<int>(j), cp, nullptr, nullptr, restoration);
      up[j] = u[j];
      const double fp = restoration ? plus.violation : combine(plus, w);
      const double fm = restoration ? minus.violation : combine(minus, w);
      if (std::isfinite(fp) && std::isfinite(fm)) {
        g[j] = (fp - fm) / (2.0 * step);
      } else if (std::isfinite(fp)) {
        g[j] = (fp - f0) / step;
      } else if (std::isfinite(fm)) {
        g[j] = (f0 - fm) / step;
      } else {
        g[j] = 0.0;
      }
    }
  }

  std::vector<double> terminal_margins(const std::vector<double>& times,
                                       const std::vector<State>& states) const {
    const std::size_t idx = static_cast<std::size_t>(substeps_);
    std::vector<double> m;
    const ErrorCascade c = error_cascade_unchecked(plant_, time_data_[idx], states[idx]);
    for (int i = 0; i < c.levels; ++i) m.push_back(c.level_margin(i) - theta_);
    return m;
  }

 private:
  struct Checkpoint {
    State z;
    double g_start = 0.0;
    RolloutTotals acc;
  };

  Checkpoint initial_checkpoint() const {
    Checkpoint cp;
    cp.z = x_hat_;
    cp.g_start = g_start_;
    return cp;
  }

  double combine(const RolloutTotals& r, double w) const {
    if (!r.feasible) return std::numeric_limits<double>::infinity();
    const double barrier =
        (cost_.kind == StageCost::Kind::Classical ? r.barrier_path : 0.0) + r.barrier_terminal;
    return r.cost + w * barrier;
  }

  RolloutTotals run(const Eigen::VectorXd& u, int j0, const Checkpoint& cp,
                    std::vector<double>* times, std::vector<State>* states,
                    bool restoration = false) const {
    constexpr double kRestorationTarget = 1e-4;
    RolloutTotals acc = cp.acc;
    State z = cp.z;
    double g_prev = cp.g_start;
    if (times) {
      times->clear();
      states->clear();
      times->push_back(t_hat_);
      states->push_back(x_hat_);
    }
    const bool classical = cost_.kind == StageCost::Kind::Classical;
    for (int j = j0; j < cfg_.intervals; ++j) {
      if (record_checkpoints_) {
        checkpoints_[static_cast<std::size_t>(j)] = Checkpoint{z, g_prev, acc};
      }
      const double uj = u[j];
      const double t_start = t_hat_ + j * cfg_.delta;
      auto field = [&](double, const State& x) -> State { return plant_.dynamics(x, uj); };
      double sum_g = 0.5 * g_prev;
      double g_last = g_prev;
      ErrorCascade c;
      for (int s = 1; s <= substeps_; ++s) {
        const double t = t_start + (s - 1) * h_;
        try {
          z = fixed_step(cfg_.integrator, field, t, z, h_);
        } catch (const NonFiniteState&) {
          acc.feasible = false;
          acc.violation = std::numeric_limits<double>::infinity();
          return acc;
        }
        const double t_next = t_start + s * h_;
        c = error_cascade_unchecked(plant_, time_data_[static_cast<std::size_t>(j * substeps_ + s)],
                                    z);
        const double g = cost_.state_part(c);
        g_last = g;
        for (int i = 0; i < c.levels; ++i) {
          const double m = c.level_margin(i);
          acc.min_path_margin = std::min(acc.min_path_margin, m);
          if (restoration && m < kRestorationTarget) {
            acc.violation += (kRestorationTarget - m) * (kRestorationTarget - m);
          }
          if (cfg_.path_constraints || !classical) {
            if (!(m > 0.0)) {
              acc.feasible = false;
            } else if (classical && cfg_.path_constraints) {
              acc.barrier_path += barrier_term(m);
            }
          }
        }
        if (!std::isfinite(g)) acc.feasible = false;
        sum_g += (s == substeps_ ? 0.5 : 1.0) * g;
        if (times) {
          times->push_back(t_next);
          states->push_back(z);
        }
        if (!acc.feasible && !restoration && !times) return acc;
      }
      acc.cost += h_ * sum_g + cost_.lambda * uj * uj * cfg_.delta;
      g_prev = g_last;
      if (j == 0 && cfg_.enforce_feasibility_constraint) {
        for (int i = 0; i < c.levels; ++i) {
          const double m = c.level_margin(i) - theta_;
          if (restoration && m < kRestorationTarget) {
            acc.violation += (kRestorationTarget - m) * (kRestorationTarget - m);
          }
          if (!(m > 0.0)) {
            acc.feasible = false;
          } else {
            acc.barrier_terminal += barrier_term(m);
          }
        }
        if (!acc.feasible && !restoration && !times) return acc;
      }
    }
    return acc;
  }

  const Plant& plant_;
  const FunnelSpec& spec_;
  const ReferenceSignal& ref_;
  double t_hat_;
  State x_hat_;
  const MpcConfig& cfg_;
  StageCost cost_;
  double theta_;
  int substeps_;
  double h_;
  double g_start_ = 0.0;
  std::vector<FunnelTimeData> time_data_;  // one entry per prediction grid point
  mutable bool record_checkpoints_ = false;
  mutable std::vector<Checkpoint> checkpoints_;
};

}  // namespace detail

/// Direct single shooting with a decreasing barrier-weight schedule and BFGS.
/// `warm_start` is tried first, then the interval means of the funnel-control
/// rollout; if neither is strictly feasible a restoration phase minimizes the
/// constraint violation first. The returned control is never worse than the
/// funnel-control warm start at the final weight.
template <ControlAffinePlant Plant>
OcpSolution<typename Plant::State> solve_ocp(const Plant& plant, const FunnelSpec& spec,
                                             const ReferenceSignal& ref, double t_hat,
                                             const typename Plant::State& x_hat,
                                             const MpcConfig& cfg, const StageCost& cost,
                                             double theta_value, const FcRollout& fc,
                                             const std::optional<Eigen::VectorXd>& warm_start = {}) {
  using State = typename Plant::State;
  cfg.validate();
  cost.validate();
  {
    const ErrorCascade c = error_cascade_unchecked(plant, spec, ref, t_hat, x_hat);
    if (!c.valid()) throw InfeasibleInitialPoint(t_hat, c.margin());
  }
  detail::ShootingProblem<Plant> problem(plant, spec, ref, t_hat, x_hat, cfg, cost, theta_value,
                                         cfg.substeps);
  const double w_first = cfg.barrier_weights.front();
  const double w_last = cfg.barrier_weights.back();

  OcpSolution<State> sol;
  sol.theta = theta_value;
  sol.warm_start_objective = problem.objective(fc.interval_mean_u, w_last);

  Eigen::VectorXd u;
  if (warm_start && warm_start->size() == cfg.intervals &&
      std::isfinite(problem.objective(*warm_start, w_first))) {
    u = *warm_start;
    sol.warm_start_source = "shifted";
  } else if (std::isfinite(problem.objective(fc.interval_mean_u, w_first))) {
    u = fc.interval_mean_u;
    sol.warm_start_source = "funnel_control";
  } else {
    // restoration from the funnel-control means
    sol.warm_start_source = "restoration";
    QuasiNewtonOptions ro;
    ro.max_iterations = 4 * cfg.max_iterations;
    ro.gradient_tolerance = 0.0;
    ro.relative_decrease = 0.0;
    auto viol = [&](const Eigen::VectorXd& x) { return problem.violation(x); };
    auto viol_grad = [&](const Eigen::VectorXd& x, double, Eigen::VectorXd& g) {
      problem.gradient(x, w_first, g, true);
    };
    const QuasiNewtonResult r = minimize_bfgs(viol, viol_grad, fc.interval_mean_u, ro);
    if (!std::isfinite(problem.objective(r.x, w_first))) {
      throw SolverStalled(t_hat, problem.violation(r.x));
    }
    u = r.x;
    sol.iterations += r.iterations;
  }

  QuasiNewtonOptions qo;
  qo.max_iterations = cfg.max_iterations;
  qo.gradient_tolerance = cfg.tolerance;
  bool converged = true;
  for (double w : cfg.barrier_weights) {
    auto f = [&](const Eigen::VectorXd& x) { return problem.objective(x, w); };
    auto grad = [&](const Eigen::VectorXd& x, double, Eigen::VectorXd& g) {
      problem.gradient(x, w, g, false);
    };
    const QuasiNewtonResult r = minimize_bfgs(f, grad, u, qo);
    u = r.x;
    sol.iterations += r.iterations;
    converged = converged && r.converged;
    sol.stage_objectives.push_back(r.f);
  }
  sol.converged = converged;
  sol.objective = problem.objective(u, w_last);
  if (sol.warm_start_objective < sol.objective) {
    u = fc.interval_mean_u;
    sol.objective = sol.warm_start_objective;
    sol.warm_start_source += "+fallback";
  }

  sol.u = u;
  const detail::RolloutTotals tot = problem.totals(u, &sol.times, &sol.states);
  sol.cost = tot.cost;
  sol.min_path_margin = tot.min_path_margin;
  sol.terminal_margins = problem.terminal_margins(sol.times, sol.states);

  StageCost funnel_cost{StageCost::Kind::Funnel, cost.lambda};
  double olm = 0.0;
  for (int j = 0; j < cfg.intervals; ++j) {
    const std::size_t idx = static_cast<std::size_t>(j * cfg.substeps);
    olm += funnel_cost(error_cascade_unchecked(plant, spec, ref, sol.times[idx], sol.states[idx]),
                       u[j]);
  }
  sol.open_loop_measure = olm;
  return sol;
}

/// Convenience overload computing the rollout and Theta itself.
template <ControlAffinePlant Plant>
OcpSolution<typename Plant::State> solve_ocp(const Plant& plant, const FunnelSpec& spec,
                                             const ReferenceSignal& ref, double t_hat,
                                             const typename Plant::State& x_hat,
                                             const MpcConfig& cfg, const StageCost& cost,
                                             const std::optional<Eigen::VectorXd>& warm_start = {}) {
  const FcRollout fc = fc_rollout(plant, spec, ref, t_hat, x_hat, cfg);
  return solve_ocp(plant, spec, ref, t_hat, x_hat, cfg, cost, fc.theta(cfg.theta_mode), fc,
                   warm_start);
}

/// Objective of `u` under the solver's own discretization (or a refined one).
template <ControlAffinePlant Plant>
double ocp_cost(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                double t_hat, const typename Plant::State& x_hat, const MpcConfig& cfg,
                const StageCost& cost, const Eigen::VectorXd& u, int substeps) {
  detail::ShootingProblem<Plant> problem(plant, spec, ref, t_hat, x_hat, cfg, cost, 0.0, substeps);
  return problem.totals(u).cost;
}

struct MpcStep {
  double t = 0.0;
  double theta = 0.0;
  int iterations = 0;
  bool converged = false;
  double objective = 0.0;
  double cost = 0.0;
  double warm_start_objective = 0.0;
  double predicted_min_margin = 0.0;
  double open_loop_measure = 0.0;
  double u = 0.0;
  std::string warm_start_source;
};

struct MpcRun {
  SimRecord record;
  std::vector<MpcStep> steps;
};

/// Receding-horizon loop: measure, compute Theta, solve, apply u*_0 on
/// [t_hat, t_hat + delta), repeat. A control is also computed at t_end so the
/// record holds the feedback value there.
template <ControlAffinePlant Plant>
MpcRun run_funnel_mpc(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                      const typename Plant::State& z0, const MpcConfig& cfg, const StageCost& cost,
                      double t_end) {
  using State = typename Plant::State;
  cfg.validate();
  cost.validate();
  spec.validate(plant.relative_degree());
  MpcRun run;
  std::optional<Eigen::VectorXd> previous;

  auto controller = [&](std::size_t k, double t_hat, const State& x_hat) -> double {
    try {
      const FcRollout fc = fc_rollout(plant, spec, ref, t_hat, x_hat, cfg);
      std::optional<Eigen::VectorXd> shifted;
      if (previous) {
        Eigen::VectorXd s(cfg.intervals);
        s.head(cfg.intervals - 1) = previous->tail(cfg.intervals - 1);
        s[cfg.intervals - 1] = fc.interval_mean_u[cfg.intervals - 1];
        shifted = s;
      }
      const double th = fc.theta(cfg.theta_mode);
      const OcpSolution<State> sol =
          solve_ocp(plant, spec, ref, t_hat, x_hat, cfg, cost, th, fc, shifted);
      previous = sol.u;
      MpcStep st;
      st.t = t_hat;
      st.theta = th;
      st.iterations = sol.iterations;
      st.converged = sol.converged;
      st.objective = sol.objective;
      st.cost = sol.cost;
      st.warm_start_objective = sol.warm_start_objective;
      st.predicted_min_margin = sol.min_path_margin;
      st.open_loop_measure = sol.open_loop_measure;
      st.u = sol.u[0];
      st.warm_start_source = sol.warm_start_source;
      run.steps.push_back(std::move(st));
      return sol.u[0];
    } catch (const std::runtime_error& ex) {
      throw MpcStepError(k, ex.what());
    }
  };
  run.record = simulate_sampled(plant, spec, ref, z0, t_end, cfg.delta, controller, cfg.plant);
  return run;
}

}  // namespace fmpc
