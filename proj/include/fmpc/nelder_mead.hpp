#pragma once

// Nelder-Mead on the unit box [0,1]^n. Trial points are projected onto the box
// before evaluation, so every evaluated point is admissible. Coefficients
// adapt to the dimension, which behaves better than the textbook values once
// n grows past a handful.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace fmpc {

struct NelderMeadOptions {
  int max_evaluations = 4000;
  double initial_step = 0.1;      // simplex edge in unit-box coordinates
  double x_tolerance = 1e-10;     // max vertex distance from the best vertex
  double f_tolerance = 1e-16;     // absolute spread of objective values
  int max_restarts = 4;           // fresh simplices around the incumbent

  friend bool operator==(const NelderMeadOptions&, const NelderMeadOptions&) = default;
};

struct NelderMeadResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  int restarts = 0;
  bool converged = false;
};

inline Eigen::VectorXd project_unit_box(Eigen::VectorXd x) {
  return x.cwiseMax(0.0).cwiseMin(1.0);
}

namespace detail {

template <class Objective>
NelderMeadResult nelder_mead_once(Objective& f, const Eigen::VectorXd& x0,
                                  const NelderMeadOptions& opt, int budget) {
  const Eigen::Index n = x0.size();
  const double dn = static_cast<double>(n);
  const double alpha = 1.0;
  const double gamma = 1.0 + 2.0 / dn;
  const double rho = 0.75 - 1.0 / (2.0 * dn);
  const double shrink = 1.0 - 1.0 / dn;

  NelderMeadResult res;
  auto eval = [&](const Eigen::VectorXd& x) {
    ++res.evaluations;
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<Eigen::VectorXd> v(static_cast<std::size_t>(n + 1));
  std::vector<double> fv(static_cast<std::size_t>(n + 1));
  v[0] = project_unit_box(x0);
  fv[0] = eval(v[0]);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd p = v[0];
    // step inward when the start sits on the upper face
    p[i] += (p[i] + opt.initial_step <= 1.0) ? opt.initial_step : -opt.initial_step;
    v[static_cast<std::size_t>(i + 1)] = project_unit_box(p);
    fv[static_cast<std::size_t>(i + 1)] = eval(v[static_cast<std::size_t>(i + 1)]);
  }

  std::vector<std::size_t> order(v.size());
  while (res.evaluations < budget) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second = order[order.size() - 2];

    double size = 0.0;
    for (const auto& p : v) size = std::max(size, (p - v[best]).cwiseAbs().maxCoeff());
    if (std::isfinite(fv[worst]) && fv[worst] - fv[best] <= opt.f_tolerance &&
        size <= opt.x_tolerance) {
      res.converged = true;
      break;
    }
    if (size <= opt.x_tolerance * 1e-3) {
      res.converged = true;
      break;
    }

    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i != worst) centroid += v[i];
    }
    centroid /= dn;

    const Eigen::VectorXd xr = project_unit_box(centroid + alpha * (centroid - v[worst]));
    const double fr = eval(xr);
    if (fr < fv[best]) {
      const Eigen::VectorXd xe = project_unit_box(centroid + gamma * (xr - centroid));
      const double fe = eval(xe);
      if (fe < fr) {
        v[worst] = xe;
        fv[worst] = fe;
      } else {
        v[worst] = xr;
        fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second]) {
      v[worst] = xr;
      fv[worst] = fr;
      continue;
    }
    const bool outside = fr < fv[worst];
    const Eigen::VectorXd xc = outside ? project_unit_box(centroid + rho * (xr - centroid))
                                       : project_unit_box(centroid + rho * (v[worst] - centroid));
    const double fc = eval(xc);
    if (fc < (outside ? fr : fv[worst])) {
      v[worst] = xc;
      fv[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i == best) continue;
      v[i] = v[best] + shrink * (v[i] - v[best]);
      fv[i] = eval(v[i]);
    }
  }
  const auto it = std::min_element(fv.begin(), fv.end());
  res.x = v[static_cast<std::size_t>(it - fv.begin())];
  res.f = *it;
  return res;
}

}  // namespace detail

/// Minimizes `f` over [0,1]^n starting from x0. After convergence the search
/// restarts from the incumbent with a fresh simplex while that still helps.
template <class Objective>
NelderMeadResult minimize_nelder_mead(Objective&& f, const Eigen::VectorXd& x0,
                                      const NelderMeadOptions& opt = {}) {
  NelderMeadResult total;
  total.x = project_unit_box(x0);
  NelderMeadOptions o = opt;
  for (int r = 0; r <= opt.max_restarts; ++r) {
    const int budget = opt.max_evaluations - total.evaluations;
    if (budget <= 0) break;
    NelderMeadResult pass = detail::nelder_mead_once(f, total.x, o, budget);
    total.evaluations += pass.evaluations;
    total.restarts = r;
    const bool improved = pass.f < total.f;
    const double previous = total.f;
    if (pass.f <= total.f) {
      total.x = pass.x;
      total.f = pass.f;
    }
    total.converged = pass.converged;
    if (!std::isfinite(total.f)) break;
    if (r > 0 && (!improved || previous - pass.f <= opt.f_tolerance)) break;
    o.initial_step = std::max(opt.initial_step * 0.1, 1e3 * opt.x_tolerance);
  }
  return total;
}

}  // namespace fmpc
