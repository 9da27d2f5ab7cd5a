#pragma once

// BFGS with Armijo backtracking. The objective may return +inf to reject a
// trial point (barrier-style feasibility), which the line search treats as a
// failed Armijo test.

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace fmpc {

struct QuasiNewtonOptions {
  int max_iterations = 50;
  double gradient_tolerance = 1e-6;  // on |g|_inf / max(1, |f|)
  double relative_decrease = 1e-13;  // stop when the decrease falls below this
  double armijo = 1e-4;
  int max_backtracks = 40;
};

struct QuasiNewtonResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// `objective(x) -> double`, `gradient(x, f_x, g&)` fills g at x.
template <class Objective, class Gradient>
QuasiNewtonResult minimize_bfgs(Objective&& objective, Gradient&& gradient, Eigen::VectorXd x,
                                const QuasiNewtonOptions& opt = {}) {
  const Eigen::Index n = x.size();
  QuasiNewtonResult res;
  double f = objective(x);
  res.x = x;
  res.f = f;
  if (!std::isfinite(f)) return res;

  Eigen::VectorXd g(n), g_new(n);
  gradient(x, f, g);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;

  for (int it = 0; it < opt.max_iterations; ++it) {
    if (g.cwiseAbs().maxCoeff() <= opt.gradient_tolerance * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd d = -H * g;
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      H.setIdentity();
      scaled = false;
      d = -g;
      slope = -g.squaredNorm();
    }
    double step = 1.0;
    if (!scaled) step = std::min(1.0, 1.0 / std::max(1e-300, d.cwiseAbs().maxCoeff()));

    Eigen::VectorXd x_new(n);
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int b = 0; b < opt.max_backtracks; ++b) {
      x_new = x + step * d;
      f_new = objective(x_new);
      if (std::isfinite(f_new) && f_new <= f + opt.armijo * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    res.iterations = it + 1;
    if (!accepted) break;

    gradient(x_new, f_new, g_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-14 * s.norm() * y.norm()) {
      if (!scaled) {
        H *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * y;
      H += (rho * rho * y.dot(Hy) + rho) * (s * s.transpose()) -
           rho * (Hy * s.transpose() + s * Hy.transpose());
    }
    const double decrease = f - f_new;
    x = x_new;
    g = g_new;
    f = f_new;
    res.x = x;
    res.f = f;
    if (decrease <= opt.relative_decrease * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace fmpc
