#include "fmpc/mpc.hpp"
#include "fmpc/quasi_newton.hpp"
#include "fmpc/stage_cost.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

namespace {

using fmpc::ErrorCascade;
using fmpc::FunnelSpec;
using fmpc::MassOnCar;
using fmpc::MpcConfig;
using fmpc::ReferenceSignal;
using fmpc::StageCost;
using State = MassOnCar::State;

const MassOnCar& plant_r2() {
  static const MassOnCar p(fmpc::MassOnCarParams{});
  return p;
}

ErrorCascade cascade_with(double e0, double e1) {
  ErrorCascade c;
  c.levels = 2;
  c.e[0] = fmpc::Jet::constant(e0, 1);
  c.e[1] = fmpc::Jet::constant(e1, 0);
  c.bound = {10.0, 10.0};
  c.gain = {1.0 / (1.0 - e0 * e0 / 100.0), 1.0 / (1.0 - e1 * e1 / 100.0)};
  return c;
}

TEST(StageCostClassical, PerfectTrackingWithoutControlIsZero) {
  EXPECT_EQ(fmpc::stage_cost_classical(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal::zero(),
                                       0.5, State::Zero(), 0.0, 0.005),
            0.0);
}

TEST(StageCostClassical, HandEvaluation) {
  const StageCost l{StageCost::Kind::Classical, 0.005};
  EXPECT_NEAR(l(cascade_with(1.0, 2.0), 2.0), 5.02, 1e-14);
}

TEST(StageCostClassical, DoublingLambdaAddsControlTerm) {
  const ErrorCascade c = cascade_with(0.3, -0.7);
  const double u = 3.5, lambda = 0.02;
  const double a = StageCost{StageCost::Kind::Classical, lambda}(c, u);
  const double b = StageCost{StageCost::Kind::Classical, 2 * lambda}(c, u);
  EXPECT_NEAR(b - a, lambda * u * u, 1e-14);
}

TEST(StageCostFunnel, PerfectTrackingCostsOnePerLevel) {
  EXPECT_EQ(fmpc::stage_cost_funnel(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal::zero(),
                                    0.5, State::Zero(), 0.0, 0.005),
            2.0);
}

TEST(StageCostFunnel, SixTenthsFilledFirstLevel) {
  // e_0 = 3.06 of 5.1; choosing y' = -k_0 e_0 makes e_1 = 0
  const double k0 = 1.5625;
  const State z(3.06, -k0 * 3.06, 0.0, 0.0);
  const double l = fmpc::stage_cost_funnel(plant_r2(), FunnelSpec::standard_r2(),
                                           ReferenceSignal::zero(), 0.0, z, 0.0, 0.005);
  EXPECT_NEAR(l, 2.5625, 1e-12);
}

TEST(StageCostFunnel, BarrierGrowsToInfinityAtTheBoundary) {
  double previous = 0.0;
  // y' = -k_0 e_0 keeps e_1 = 0 while e_0 approaches its boundary
  for (double fill : {0.5, 0.9, 0.99, 0.9999}) {
    const StageCost l{StageCost::Kind::Funnel, 0.005};
    const double v = l.state_part(fmpc::error_cascade_unchecked(
        plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal::zero(), 0.0,
        State(fill * 5.1, -fill * 5.1 / (1 - fill * fill), 0.0, 0.0)));
    EXPECT_GT(v, previous);
    previous = v;
  }
  const double at = fmpc::stage_cost_funnel(plant_r2(), FunnelSpec::standard_r2(),
                                            ReferenceSignal::zero(), 0.0, State(5.1, 0, 0, 0), 0.0,
                                            0.005);
  EXPECT_EQ(at, std::numeric_limits<double>::infinity());
}

TEST(StageCost, RejectsNonPositiveLambda) {
  EXPECT_THROW((StageCost{StageCost::Kind::Funnel, 0.0}.validate()), fmpc::InvalidParameter);
}

TEST(Theta, PerfectTrackingAtInitialTime) {
  MpcConfig cfg;
  cfg.theta_mode = fmpc::ThetaMode::AtInitialTime;
  EXPECT_DOUBLE_EQ(fmpc::theta(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal::zero(), 0.0,
                               State::Zero(), cfg),
                   5.1);
}

TEST(Theta, ActiveAtSomeLevel) {
  for (int r : {2, 3}) {
    const oracle::ScalarCheck c = oracle::theta_activeness(r, 100, 71 + r);
    EXPECT_EQ(c.samples, 100);
    EXPECT_LE(c.worst, 1e-12);
  }
}

TEST(Theta, HorizonMinimumNeverExceedsInitialMargin) {
  const ReferenceSignal ref;
  MpcConfig cfg;
  for (const auto& s :
       oracle::feasible_samples(plant_r2(), FunnelSpec::standard_r2(), ref, 10, 73, 0.8)) {
    const fmpc::FcRollout fc = fmpc::fc_rollout(plant_r2(), FunnelSpec::standard_r2(), ref, s.t, s.z, cfg);
    EXPECT_LE(fc.theta_horizon, fc.theta_initial);
    EXPECT_GT(fc.theta_horizon, 0.0);
    EXPECT_EQ(fc.interval_mean_u.size(), cfg.intervals);
  }
}

TEST(Theta, InfeasibleInitialPointThrows) {
  MpcConfig cfg;
  EXPECT_THROW(fmpc::theta(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal{}, 0.0,
                           State(9.0, 0, 0, 0), cfg),
               fmpc::InfeasibleInitialPoint);
  cfg.theta_mode = fmpc::ThetaMode::AtInitialTime;
  EXPECT_THROW(fmpc::theta(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal{}, 0.0,
                           State(9.0, 0, 0, 0), cfg),
               fmpc::InfeasibleInitialPoint);
}

TEST(Bfgs, MinimizesRosenbrock) {
  auto f = [](const Eigen::VectorXd& x) {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  };
  auto g = [](const Eigen::VectorXd& x, double, Eigen::VectorXd& out) {
    out.resize(2);
    out[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
    out[1] = 200.0 * (x[1] - x[0] * x[0]);
  };
  fmpc::QuasiNewtonOptions opt;
  opt.max_iterations = 200;
  opt.gradient_tolerance = 1e-10;
  const auto r = fmpc::minimize_bfgs(f, g, Eigen::Vector2d(-1.2, 1.0), opt);
  EXPECT_NEAR(r.x[0], 1.0, 1e-6);
  EXPECT_NEAR(r.x[1], 1.0, 1e-6);
}

TEST(Bfgs, InfiniteTrialPointsAreRejected) {
  // minimum of (x - 2)^2 lies outside the admissible half-line x < 1
  auto f = [](const Eigen::VectorXd& x) {
    return x[0] < 1.0 ? std::pow(x[0] - 2.0, 2) - std::log(1.0 - x[0])
                      : std::numeric_limits<double>::infinity();
  };
  auto g = [](const Eigen::VectorXd& x, double, Eigen::VectorXd& out) {
    out.resize(1);
    out[0] = 2.0 * (x[0] - 2.0) + 1.0 / (1.0 - x[0]);
  };
  fmpc::QuasiNewtonOptions opt;
  opt.max_iterations = 100;
  opt.gradient_tolerance = 1e-12;
  const auto r = fmpc::minimize_bfgs(f, g, Eigen::VectorXd::Zero(1), opt);
  // stationary point: 2(x-2)(1-x) + 1 = 0
  EXPECT_NEAR(r.x[0], (3.0 - std::sqrt(3.0)) / 2.0, 1e-6);
}

MpcConfig quick_config() {
  MpcConfig cfg;
  cfg.intervals = 41;
  cfg.delta = 1.0 / 40;
  return cfg;
}

TEST(SolveOcp, EquilibriumOptimumIsZeroControl) {
  const MpcConfig cfg = quick_config();
  for (auto kind : {StageCost::Kind::Classical, StageCost::Kind::Funnel}) {
    const auto sol = fmpc::solve_ocp(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal::zero(),
                                     0.0, State::Zero(), cfg, StageCost{kind, 0.005});
    EXPECT_LT(sol.u.cwiseAbs().maxCoeff(), 1e-6);
    const double floor = kind == StageCost::Kind::Classical ? 0.0 : 2.0 * cfg.horizon();
    EXPECT_NEAR(sol.cost, floor, 1e-9);
  }
}

TEST(SolveOcp, ReturnedControlIsFeasibleAndNoWorseThanWarmStart) {
  const ReferenceSignal ref;
  const MpcConfig cfg = quick_config();
  const FunnelSpec spec = FunnelSpec::standard_r2();
  int solved = 0;
  for (const auto& s : oracle::feasible_samples(plant_r2(), spec, ref, 6, 79, 0.7)) {
    for (auto kind : {StageCost::Kind::Classical, StageCost::Kind::Funnel}) {
      const StageCost cost{kind, 0.005};
      const auto sol = fmpc::solve_ocp(plant_r2(), spec, ref, s.t, s.z, cfg, cost);
      ++solved;
      EXPECT_LE(sol.objective, sol.warm_start_objective);
      for (double m : sol.terminal_margins) EXPECT_GE(m, 0.0);
      EXPECT_GT(sol.min_path_margin, 0.0);
      for (std::size_t i = 1; i < sol.stage_objectives.size(); ++i) {
        EXPECT_LE(sol.stage_objectives[i], sol.stage_objectives[i - 1]);
      }

      // independent re-simulation of the returned control on a finer RK4 grid
      State z = s.z;
      const int fine = 50;
      double min_margin = std::numeric_limits<double>::infinity();
      double terminal_margin = 0.0;
      for (int j = 0; j < cfg.intervals; ++j) {
        const double uj = sol.u[j];
        auto f = [&](double, const State& x) { return plant_r2().dynamics(x, uj); };
        for (int q = 0; q < fine; ++q) {
          const double t = s.t + (j + static_cast<double>(q) / fine) * cfg.delta;
          z = fmpc::rk4_step(f, t, z, cfg.delta / fine);
          const auto c = fmpc::error_cascade_unchecked(plant_r2(), spec, ref,
                                                       t + cfg.delta / fine, z);
          min_margin = std::min(min_margin, c.margin());
          if (j == 0 && q == fine - 1) terminal_margin = c.margin();
        }
      }
      EXPECT_GT(min_margin, 0.0);
      EXPECT_GE(terminal_margin - sol.theta, -1e-6);
    }
  }
  EXPECT_EQ(solved, 12);
}

TEST(SolveOcp, CostMatchesRefinedQuadrature) {
  const ReferenceSignal ref;
  const MpcConfig cfg = quick_config();
  const StageCost cost{StageCost::Kind::Classical, 0.005};
  const auto sol =
      fmpc::solve_ocp(plant_r2(), FunnelSpec::standard_r2(), ref, 0.0, State::Zero(), cfg, cost);
  const double refined = fmpc::ocp_cost(plant_r2(), FunnelSpec::standard_r2(), ref, 0.0,
                                        State::Zero(), cfg, cost, sol.u, 10 * cfg.substeps);
  EXPECT_NEAR(sol.cost, refined, 0.01 * std::abs(refined));
}

TEST(SolveOcp, WarmStartRolloutIsInteriorAndTightened) {
  const ReferenceSignal ref;
  MpcConfig cfg = quick_config();
  const FunnelSpec spec = FunnelSpec::standard_r2();
  for (const auto& s : oracle::feasible_samples(plant_r2(), spec, ref, 10, 83, 0.8)) {
    const fmpc::FcRollout fc = fmpc::fc_rollout(plant_r2(), spec, ref, s.t, s.z, cfg);
    // the continuous funnel-control trajectory itself: margin at t_hat + delta >= Theta
    const auto rec = fmpc::simulate_fc_continuous(plant_r2(), spec, ref, s.z, s.t + cfg.delta,
                                                  {s.t, cfg.delta / 20, cfg.rollout_tol});
    EXPECT_TRUE(rec.feasible);
    EXPECT_GE(rec.rows.back().margin, fc.theta_horizon);
  }
}

TEST(RecedingHorizon, ShortRunStaysFeasible) {
  const MpcConfig cfg = quick_config();
  const auto run = fmpc::run_funnel_mpc(plant_r2(), FunnelSpec::standard_r2(), ReferenceSignal{},
                                        State::Zero(), cfg, StageCost{}, 0.5);
  EXPECT_TRUE(run.record.feasible);
  EXPECT_EQ(run.steps.size(), 21u);
  std::size_t k = 0;
  for (const auto& row : run.record.rows) {
    if (!row.hold) continue;
    ASSERT_LT(k, run.steps.size());
    EXPECT_NEAR(row.t, run.steps[k].t, 1e-12);
    EXPECT_EQ(row.u, run.steps[k].u);
    EXPECT_GT(run.steps[k].theta, 0.0);
    EXPECT_LE(run.steps[k].objective, run.steps[k].warm_start_objective);
    ++k;
  }
}

TEST(MpcConfigValidation, RejectsBadSettings) {
  MpcConfig cfg;
  cfg.delta = 0.0;
  EXPECT_THROW(cfg.validate(), fmpc::InvalidParameter);
  cfg = MpcConfig{};
  cfg.barrier_weights = {1e-4, 1e-2};
  EXPECT_THROW(cfg.validate(), fmpc::InvalidParameter);
  cfg = MpcConfig{};
  cfg.intervals = 0;
  EXPECT_THROW(cfg.validate(), fmpc::InvalidParameter);
}

}  // namespace
