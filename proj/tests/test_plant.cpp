#include "fmpc/integrate.hpp"
#include "fmpc/plant.hpp"

#include <gtest/gtest.h>

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <random>

namespace {

using fmpc::MassOnCar;
using fmpc::MassOnCarParams;
using State = MassOnCar::State;

constexpr double kPi = std::numbers::pi;

MassOnCarParams with_alpha(double alpha) {
  MassOnCarParams p;
  p.alpha = alpha;
  return p;
}

/// M(alpha) (x'', s'')^T + (0, k s + d s')^T - (u, 0)^T
Eigen::Vector2d mass_matrix_residual(const MassOnCarParams& p, const State& z, double u,
                                     const State& dz) {
  const double c = std::cos(p.alpha);
  Eigen::Matrix2d M;
  M << p.m1 + p.m2, p.m2 * c, p.m2 * c, p.m2;
  const Eigen::Vector2d acc(dz[1], dz[3]);
  const Eigen::Vector2d spring(0.0, p.k * z[2] + p.d * z[3]);
  return M * acc + spring - Eigen::Vector2d(u, 0.0);
}

State random_state(std::mt19937_64& rng, double scale = 2.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  return State(d(rng), d(rng), d(rng), d(rng));
}

/// Second output derivative built from the raw dynamics, for either case.
double y_ddot_from_dynamics(const MassOnCar& plant, const State& z, double u) {
  const State dz = plant.dynamics(z, u);
  return dz[1] + std::cos(plant.params().alpha) * dz[3];
}

/// Third output derivative for alpha = 0: y'' = -(k s + d s')/m2.
double y_dddot_alpha0(const MassOnCar& plant, const State& z, double u) {
  const auto& p = plant.params();
  const State dz = plant.dynamics(z, u);
  return -(p.k * dz[2] + p.d * dz[3]) / p.m2;
}

TEST(Dynamics, EquilibriumAtRest) {
  const MassOnCar plant(MassOnCarParams{});
  EXPECT_EQ(plant.dynamics(State::Zero(), 0.0), State::Zero());
}

TEST(Dynamics, UnitForceAtRest) {
  const MassOnCarParams p;
  const MassOnCar plant(p);
  const State dz = plant.dynamics(State::Zero(), 1.0);
  EXPECT_NEAR(dz[1], 2.0 / 9.0, 1e-15);
  EXPECT_NEAR(dz[3], -std::cos(kPi / 4) / 4.5, 1e-15);
  EXPECT_LT(mass_matrix_residual(p, State::Zero(), 1.0, dz).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Dynamics, MassMatrixResidualOverRandomSamples) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ua(-50.0, 50.0);
  std::uniform_real_distribution<double> alpha(0.0, 1.5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const MassOnCarParams p = with_alpha(i % 2 ? kPi / 4 : alpha(rng));
    const MassOnCar plant(p);
    const State z = random_state(rng, 5.0);
    const double u = ua(rng);
    worst = std::max(worst,
                     mass_matrix_residual(p, z, u, plant.dynamics(z, u)).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Dynamics, KinematicRowsCopyVelocities) {
  const MassOnCar plant(MassOnCarParams{});
  const State z(0.1, 0.2, 0.3, 0.4);
  const State dz = plant.dynamics(z, 3.0);
  EXPECT_EQ(dz[0], z[1]);
  EXPECT_EQ(dz[2], z[3]);
}

TEST(LinearModel, MatchesNonlinearEvaluation) {
  std::mt19937_64 rng(5);
  const MassOnCarParams p = with_alpha(0.7);
  const MassOnCar plant(p);
  const auto lm = fmpc::linear_model(p);
  for (int i = 0; i < 20; ++i) {
    const State z = random_state(rng);
    const double u = 0.5 * i - 3.0;
    EXPECT_LT((lm.A * z + lm.B * u - plant.dynamics(z, u)).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_NEAR((lm.C * z).value(), plant.output(z), 1e-15);
  }
}

TEST(OutputJet, ZeroStateGivesZeroJet) {
  for (double a : {0.0, kPi / 4}) {
    const MassOnCar plant(with_alpha(a));
    const fmpc::Jet j = plant.output_jet(State::Zero(), plant.relative_degree() - 1);
    for (int i = 0; i <= j.order; ++i) EXPECT_EQ(j[i], 0.0);
  }
}

TEST(OutputJet, OutputAtUnitPositions) {
  const MassOnCar plant(MassOnCarParams{});
  EXPECT_NEAR(plant.output_jet(State(1.0, 0.0, 1.0, 0.0), 0).value(), 1.0 + std::sqrt(2.0) / 2.0,
              1e-15);
  EXPECT_NEAR(plant.output_jet(State(1.0, 0.0, 1.0, 0.0), 0).value(), 1.70711, 1e-5);
}

TEST(OutputJet, OrderAtRelativeDegreeThrows) {
  const MassOnCar r2(MassOnCarParams{});
  const MassOnCar r3(with_alpha(0.0));
  EXPECT_THROW(r2.output_jet(State::Zero(), 2), fmpc::OrderExceedsRelativeDegree);
  EXPECT_THROW(r3.output_jet(State::Zero(), 3), fmpc::OrderExceedsRelativeDegree);
  EXPECT_NO_THROW(r3.output_jet(State::Zero(), 2));
}

TEST(OutputJet, SecondDerivativeMatchesCentralDifferenceAlongFreeFlow) {
  const MassOnCar plant(with_alpha(0.0));
  auto free = [&](double, const State& z) { return plant.dynamics(z, 0.0); };
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const State z = random_state(rng);
    const double exact = plant.output_jet(z, 2)[2];
    auto fd = [&](double h) {
      const State zp = fmpc::rk4_step(free, 0.0, z, h);
      const State zm = fmpc::rk4_step(free, 0.0, z, -h);
      return (plant.output_jet(zp, 1)[1] - plant.output_jet(zm, 1)[1]) / (2.0 * h);
    };
    const double e1 = std::abs(fd(1e-3) - exact);
    const double e2 = std::abs(fd(5e-4) - exact);
    EXPECT_LT(e2, 1e-6);
    if (e1 > 1e-11) EXPECT_NEAR(e1 / e2, 4.0, 1.0);
  }
}

TEST(OutputJet, FirstDerivativeMatchesDynamics) {
  std::mt19937_64 rng(9);
  for (double a : {0.0, 0.3, kPi / 4}) {
    const MassOnCar plant(with_alpha(a));
    for (int i = 0; i < 10; ++i) {
      const State z = random_state(rng);
      const State dz = plant.dynamics(z, 0.0);
      EXPECT_NEAR(plant.output_jet(z, 1)[1], dz[0] + std::cos(a) * dz[2], 1e-14);
    }
  }
}

TEST(RelativeDegreeStructure, LowerDerivativesIgnoreInput) {
  std::mt19937_64 rng(21);
  const MassOnCar r2(MassOnCarParams{});
  const MassOnCar r3(with_alpha(0.0));
  for (int i = 0; i < 50; ++i) {
    const State z = random_state(rng);
    // y' along the flow for r = 2
    const State a = r2.dynamics(z, -7.0), b = r2.dynamics(z, 13.0);
    const double c = std::cos(kPi / 4);
    EXPECT_EQ(a[0] + c * a[2], b[0] + c * b[2]);
    // y'' for r = 3
    EXPECT_NEAR(y_ddot_from_dynamics(r3, z, -7.0), y_ddot_from_dynamics(r3, z, 13.0), 1e-12);
    EXPECT_NEAR(y_ddot_from_dynamics(r3, z, 0.0), r3.output_jet(z, 2)[2], 1e-12);
  }
}

TEST(HighGain, RelativeDegreeTwoFiniteDifference) {
  const MassOnCar plant(MassOnCarParams{});
  const State z(0.3, -0.2, 0.5, 0.1);
  const double h = 1e-3;
  const double fd = (y_ddot_from_dynamics(plant, z, h) - y_ddot_from_dynamics(plant, z, -h)) / (2 * h);
  EXPECT_NEAR(fd, 1.0 / 9.0, 1e-10);
  EXPECT_NEAR(plant.high_gain(z), 1.0 / 9.0, 1e-15);
}

TEST(HighGain, RelativeDegreeThreeFiniteDifference) {
  const MassOnCar plant(with_alpha(0.0));
  const State z(0.3, -0.2, 0.5, 0.1);
  const double h = 1e-3;
  const double fd = (y_dddot_alpha0(plant, z, h) - y_dddot_alpha0(plant, z, -h)) / (2 * h);
  EXPECT_NEAR(fd, 0.25, 1e-10);
  EXPECT_NEAR(plant.high_gain(z), 0.25, 1e-15);
}

TEST(HighGain, MatchesFiniteDifferenceAtRandomStates) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> alpha(0.05, 1.5);
  for (int i = 0; i < 100; ++i) {
    const bool r3 = i % 4 == 0;
    const MassOnCar plant(with_alpha(r3 ? 0.0 : alpha(rng)));
    const State z = random_state(rng);
    const double h = 1e-4;
    const double fd = r3 ? (y_dddot_alpha0(plant, z, h) - y_dddot_alpha0(plant, z, -h)) / (2 * h)
                         : (y_ddot_from_dynamics(plant, z, h) - y_ddot_from_dynamics(plant, z, -h)) /
                               (2 * h);
    EXPECT_NEAR(fd, plant.high_gain(z), 1e-6);
    EXPECT_GT(plant.high_gain(z), 0.0);
  }
}

TEST(HighGain, DriftTopIsInputFreePart) {
  std::mt19937_64 rng(23);
  for (double a : {0.0, kPi / 4}) {
    const MassOnCar plant(with_alpha(a));
    for (int i = 0; i < 20; ++i) {
      const State z = random_state(rng);
      const double top0 =
          a == 0.0 ? y_dddot_alpha0(plant, z, 0.0) : y_ddot_from_dynamics(plant, z, 0.0);
      EXPECT_NEAR(plant.drift_top(z), top0, 1e-12);
      const double top1 =
          a == 0.0 ? y_dddot_alpha0(plant, z, 2.5) : y_ddot_from_dynamics(plant, z, 2.5);
      EXPECT_NEAR(top1, plant.drift_top(z) + plant.high_gain(z) * 2.5, 1e-12);
    }
  }
}

TEST(HighGain, PositiveForAdmissibleParameters) {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  std::uniform_real_distribution<double> alpha(0.0, 1.57);
  for (int i = 0; i < 200; ++i) {
    MassOnCarParams p{pos(rng), pos(rng), pos(rng), pos(rng), i % 5 ? alpha(rng) : 0.0};
    EXPECT_GT(MassOnCar(p).high_gain(State::Zero()), 0.0);
  }
}

TEST(RelativeDegree, Cases) {
  EXPECT_EQ(fmpc::relative_degree(with_alpha(kPi / 4)), 2);
  EXPECT_EQ(fmpc::relative_degree(with_alpha(0.0)), 3);
  EXPECT_EQ(fmpc::relative_degree(with_alpha(1e-13)), 3);
  EXPECT_EQ(fmpc::relative_degree(with_alpha(1e-11)), 2);
}

TEST(Params, ValidationRejectsInadmissibleValues) {
  MassOnCarParams p;
  p.m1 = -1.0;
  EXPECT_THROW(MassOnCar{p}, fmpc::InvalidParameter);
  p = MassOnCarParams{};
  p.d = 0.0;
  EXPECT_THROW(MassOnCar{p}, fmpc::InvalidParameter);
  EXPECT_THROW(MassOnCar{with_alpha(kPi / 2)}, fmpc::InvalidParameter);
  EXPECT_THROW(MassOnCar{with_alpha(-0.1)}, fmpc::InvalidParameter);
  EXPECT_NEAR(MassOnCarParams{}.mass_determinant(), 4.5, 1e-15);
}

TEST(Energy, DampedFreeMotionDissipates) {
  for (double a : {0.0, kPi / 4}) {
    const MassOnCarParams p = with_alpha(a);
    const MassOnCar plant(p);
    auto energy = [&](const State& z) {
      const double c = std::cos(a);
      Eigen::Matrix2d M;
      M << p.m1 + p.m2, p.m2 * c, p.m2 * c, p.m2;
      const Eigen::Vector2d v(z[1], z[3]);
      return 0.5 * v.dot(M * v) + 0.5 * p.k * z[2] * z[2];
    };
    auto free = [&](double, const State& z) { return plant.dynamics(z, 0.0); };
    const auto tr = fmpc::integrate_fixed(free, 0.0, State(0.5, 1.0, -1.0, 0.3), 10.0, 1e-3);
    for (std::size_t i = 1; i < tr.states.size(); ++i) {
      EXPECT_LE(energy(tr.states[i]), energy(tr.states[i - 1]) + 1e-12);
    }
  }
}

}  // namespace
