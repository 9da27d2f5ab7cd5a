#pragma once

// Learning phase: excite the plant with sampled funnel control, record
// (u(i tau), y(i tau)), and fit (alpha, m1, m2, k, d, z0) by least squares on
// the outputs predicted by chaining the hold-interval flow map.

#include "fmpc/integrate.hpp"
#include "fmpc/nelder_mead.hpp"
#include "fmpc/plant.hpp"
#include "fmpc/simloop.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/MatrixFunctions>
#include <unsupported/Eigen/NonLinearOptimization>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmpc {

class AllStartsFailed : public std::runtime_error {
 public:
  explicit AllStartsFailed(int starts)
      : std::runtime_error("identification: all " + std::to_string(starts) +
                           " starts gave a non-finite objective") {}
};

inline constexpr int kIdentDim = 9;  // alpha, m1, m2, k, d, z0[0..3]

inline const std::array<const char*, kIdentDim>& ident_coordinate_names() {
  static const std::array<const char*, kIdentDim> names{"alpha", "m1", "m2", "k", "d",
                                                        "z0_1",  "z0_2", "z0_3", "z0_4"};
  return names;
}

struct IdentPoint {
  MassOnCarParams params;
  Eigen::Vector4d z0 = Eigen::Vector4d::Zero();

  Eigen::Matrix<double, kIdentDim, 1> to_vector() const {
    Eigen::Matrix<double, kIdentDim, 1> v;
    v << params.alpha, params.m1, params.m2, params.k, params.d, z0;
    return v;
  }

  static IdentPoint from_vector(const Eigen::Matrix<double, kIdentDim, 1>& v) {
    IdentPoint p;
    p.params = {v[1], v[2], v[3], v[4], v[0]};
    p.z0 = v.tail<4>();
    return p;
  }
};

/// Search box. A coordinate with lower == upper is held fixed.
struct ParamBox {
  Eigen::Matrix<double, kIdentDim, 1> lower;
  Eigen::Matrix<double, kIdentDim, 1> upper;

  static ParamBox standard() {
    ParamBox b;
    b.lower << 0.0, 2.0, 0.5, 1.0, 0.5, -2.5, -1.0, -2.75, -1.0;
    b.upper << std::numbers::pi / 2.0, 6.0, 1.5, 3.0, 1.5, 3.5, 1.0, 3.25, 1.0;
    return b;
  }

  static ParamBox point(const IdentPoint& p) {
    ParamBox b;
    b.lower = b.upper = p.to_vector();
    return b;
  }

  void validate() const {
    const auto& names = ident_coordinate_names();
    for (int i = 0; i < kIdentDim; ++i) {
      if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || lower[i] > upper[i]) {
        throw InvalidParameter(std::string("parameter box: invalid interval for ") + names[i]);
      }
    }
    if (lower[0] < 0.0 || upper[0] > std::numbers::pi / 2.0) {
      throw InvalidParameter("parameter box: alpha must stay within [0, pi/2]");
    }
    for (int i = 1; i <= 4; ++i) {
      if (!(lower[i] > 0.0)) {
        throw InvalidParameter(std::string("parameter box: ") + names[i] + " must be positive");
      }
    }
  }

  bool contains(const IdentPoint& p) const {
    const auto v = p.to_vector();
    return (v.array() >= lower.array()).all() && (v.array() <= upper.array()).all();
  }
};

struct LearningData {
  double tau = 1e-3;
  std::vector<double> u;  // u(i tau), i = 0..M
  std::vector<double> y;  // y(i tau)

  int samples() const { return static_cast<int>(y.size()); }

  void validate() const {
    if (!(tau > 0.0)) throw InvalidParameter("learning data: tau must be positive");
    if (u.size() != y.size()) throw InvalidParameter("learning data: u and y differ in length");
    if (y.size() < 3) throw InvalidParameter("learning data: need at least three samples");
  }
};

/// Runs sampled funnel control with period tau on [0, t_bar] and records the
/// control and output at every sampling instant.
template <ControlAffinePlant Plant>
LearningData collect_learning_data(const Plant& plant, const FunnelSpec& spec,
                                   const ReferenceSignal& ref, const typename Plant::State& z0,
                                   double tau, double t_bar) {
  SampledOptions opt;
  opt.samples_per_hold = 1;
  const SimRecord rec = simulate_fc_zoh(plant, spec, ref, z0, t_bar, tau, opt);
  if (!rec.feasible) {
    for (const auto& row : rec.rows) {
      if (row.t > 0.0 && !(row.margin > 0.0)) {
        int level = 0;
        for (int i = 0; i < rec.levels; ++i) {
          const auto idx = static_cast<std::size_t>(i);
          if (!(std::abs(row.e[idx]) < row.bound[idx])) {
            level = i;
            break;
          }
        }
        throw FunnelViolation(level, row.t, row.margin);
      }
    }
    throw FunnelViolation(0, rec.first_violation.value_or(rec.end_time()), rec.min_margin());
  }
  LearningData d;
  d.tau = tau;
  d.u.reserve(rec.rows.size());
  d.y.reserve(rec.rows.size());
  for (const auto& row : rec.rows) {
    d.u.push_back(row.u);
    d.y.push_back(row.y);
  }
  return d;
}

enum class FlowMap { Exact, Adaptive };

/// Output of the model at `p` driven by the held controls of `data`.
/// Exact uses the matrix exponential of the linear dynamics over one hold
/// interval; Adaptive integrates every interval with the embedded RK pair.
inline std::vector<double> predict_outputs(const IdentPoint& p, const std::vector<double>& u,
                                           double tau, FlowMap flow = FlowMap::Exact,
                                           double adaptive_tol = 1e-9) {
  const LinearModel lm = linear_model(p.params);
  std::vector<double> y(u.size());
  Eigen::Vector4d z = p.z0;
  if (y.empty()) return y;
  y[0] = (lm.C * z).value();
  if (flow == FlowMap::Exact) {
    Eigen::Matrix<double, 5, 5> aug = Eigen::Matrix<double, 5, 5>::Zero();
    aug.topLeftCorner<4, 4>() = lm.A * tau;
    aug.topRightCorner<4, 1>() = lm.B * tau;
    const Eigen::Matrix<double, 5, 5> e = aug.exp();
    const Eigen::Matrix4d phi = e.topLeftCorner<4, 4>();
    const Eigen::Vector4d gam = e.topRightCorner<4, 1>();
    for (std::size_t i = 1; i < u.size(); ++i) {
      z = phi * z + gam * u[i - 1];
      y[i] = (lm.C * z).value();
    }
    return y;
  }
  const AdaptiveOptions tol{adaptive_tol, adaptive_tol};
  for (std::size_t i = 1; i < u.size(); ++i) {
    const double ui = u[i - 1];
    auto f = [&](double, const Eigen::Vector4d& x) -> Eigen::Vector4d {
      return lm.A * x + lm.B * ui;
    };
    const double t0 = static_cast<double>(i - 1) * tau;
    z = flow_adaptive(f, t0, z, t0 + tau, tol);
    y[i] = (lm.C * z).value();
  }
  return y;
}

/// Sum of squared output residuals over all samples.
inline double identification_objective(const LearningData& data, const IdentPoint& p,
                                       FlowMap flow = FlowMap::Exact) {
  const std::vector<double> yh = predict_outputs(p, data.u, data.tau, flow);
  double s = 0.0;
  for (std::size_t i = 0; i < yh.size(); ++i) {
    const double r = yh[i] - data.y[i];
    s += r * r;
  }
  return std::isfinite(s) ? s : std::numeric_limits<double>::infinity();
}

namespace detail {

/// Hold-interval map z+ = phi z + gam u and its derivatives with respect to
/// (alpha, m1, m2, k, d). Model-matrix derivatives come from complex steps,
/// the discretization derivatives from the block-triangular exponential
/// exp([[M, dM], [0, M]]), whose upper-right block is d exp(M).
struct HoldMapSensitivity {
  Eigen::Matrix4d phi;
  Eigen::Vector4d gam;
  Eigen::RowVector4d C;
  std::array<Eigen::Matrix4d, 5> dphi;
  std::array<Eigen::Vector4d, 5> dgam;
  std::array<Eigen::RowVector4d, 5> dC;
};

inline HoldMapSensitivity hold_map_sensitivity(const IdentPoint& p, double tau) {
  using Cx = std::complex<double>;
  constexpr double h = 1e-30;
  const Eigen::Matrix<double, kIdentDim, 1> v = p.to_vector();
  const LinearModel lm = linear_model(p.params);

  Eigen::Matrix<double, 5, 5> M = Eigen::Matrix<double, 5, 5>::Zero();
  M.topLeftCorner<4, 4>() = lm.A * tau;
  M.topRightCorner<4, 1>() = lm.B * tau;
  const Eigen::Matrix<double, 5, 5> E = M.exp();

  HoldMapSensitivity s;
  s.phi = E.topLeftCorner<4, 4>();
  s.gam = E.topRightCorner<4, 1>();
  s.C = lm.C;
  for (int j = 0; j < 5; ++j) {
    std::array<Cx, 5> q{};
    for (int i = 0; i < 5; ++i) q[static_cast<std::size_t>(i)] = Cx(v[i], i == j ? h : 0.0);
    // vector order is alpha, m1, m2, k, d
    const LinearModelT<Cx> cm = linear_model<Cx>(q[1], q[2], q[3], q[4], q[0]);
    Eigen::Matrix<double, 10, 10> big = Eigen::Matrix<double, 10, 10>::Zero();
    big.topLeftCorner<5, 5>() = M;
    big.bottomRightCorner<5, 5>() = M;
    big.block<4, 4>(0, 5) = cm.A.imag() * (tau / h);
    big.block<4, 1>(0, 9) = cm.B.imag() * (tau / h);
    const Eigen::Matrix<double, 10, 10> EB = big.exp();
    const auto js = static_cast<std::size_t>(j);
    s.dphi[js] = EB.block<4, 4>(0, 5);
    s.dgam[js] = EB.block<4, 1>(0, 9);
    s.dC[js] = cm.C.imag() / h;
  }
  return s;
}

/// Outputs and their Jacobian with respect to all nine coordinates.
inline void predict_with_jacobian(const IdentPoint& p, const std::vector<double>& u, double tau,
                                  Eigen::VectorXd& y, Eigen::MatrixXd& J) {
  const HoldMapSensitivity s = hold_map_sensitivity(p, tau);
  const auto n = static_cast<Eigen::Index>(u.size());
  y.resize(n);
  J.resize(n, kIdentDim);
  Eigen::Vector4d z = p.z0;
  Eigen::Matrix<double, 4, kIdentDim> S = Eigen::Matrix<double, 4, kIdentDim>::Zero();
  S.rightCols<4>().setIdentity();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i > 0) {
      const double ui = u[static_cast<std::size_t>(i - 1)];
      Eigen::Matrix<double, 4, kIdentDim> Sn = s.phi * S;
      for (int j = 0; j < 5; ++j) {
        const auto js = static_cast<std::size_t>(j);
        Sn.col(j) += s.dphi[js] * z + s.dgam[js] * ui;
      }
      z = s.phi * z + s.gam * ui;
      S = Sn;
    }
    y[i] = (s.C * z).value();
    J.row(i) = s.C * S;
    for (int j = 0; j < 5; ++j) J(i, j) += (s.dC[static_cast<std::size_t>(j)] * z).value();
  }
}

/// Residual functor in box-normalized coordinates of the free coordinates.
/// Points outside [0,1] are projected, with zero derivative across the faces.
struct NormalizedResidual {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  const LearningData* data;
  const ParamBox* box;
  const std::vector<int>* free;
  long* evaluations;

  int inputs() const { return static_cast<int>(free->size()); }
  int values() const { return data->samples(); }

  IdentPoint point(const Eigen::VectorXd& x) const {
    Eigen::Matrix<double, kIdentDim, 1> v = box->lower;
    for (std::size_t j = 0; j < free->size(); ++j) {
      const int i = (*free)[j];
      const double xj = std::clamp(x[static_cast<Eigen::Index>(j)], 0.0, 1.0);
      v[i] = box->lower[i] + xj * (box->upper[i] - box->lower[i]);
    }
    return IdentPoint::from_vector(v);
  }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
    ++*evaluations;
    const std::vector<double> yh = predict_outputs(point(x), data->u, data->tau);
    for (Eigen::Index i = 0; i < f.size(); ++i) {
      f[i] = yh[static_cast<std::size_t>(i)] - data->y[static_cast<std::size_t>(i)];
    }
    return f.allFinite() ? 0 : -1;
  }

  int df(const Eigen::VectorXd& x, Eigen::MatrixXd& fjac) const {
    Eigen::VectorXd y;
    Eigen::MatrixXd J;
    predict_with_jacobian(point(x), data->u, data->tau, y, J);
    for (std::size_t j = 0; j < free->size(); ++j) {
      const int i = (*free)[j];
      const auto jj = static_cast<Eigen::Index>(j);
      const bool inside = x[jj] >= 0.0 && x[jj] <= 1.0;
      fjac.col(jj) = inside ? Eigen::VectorXd(J.col(i) * (box->upper[i] - box->lower[i]))
                            : Eigen::VectorXd::Zero(J.rows());
    }
    return fjac.allFinite() ? 0 : -1;
  }
};

}  // namespace detail

/// Local method run from every start. Nelder-Mead stalls once the residual
/// is small, because the data barely excite some parameter directions;
/// Levenberg-Marquardt with exact output sensitivities resolves them.
enum class LocalSearch { LevenbergMarquardt, NelderMead };

inline const char* to_string(LocalSearch m) {
  return m == LocalSearch::LevenbergMarquardt ? "levenberg_marquardt" : "nelder_mead";
}

struct IdentOptions {
  int multistart = 20;
  std::uint64_t seed = 1;
  LocalSearch local = LocalSearch::LevenbergMarquardt;
  FlowMap flow = FlowMap::Exact;  // Nelder-Mead only; the sensitivities use the exact map
  NelderMeadOptions search{6000, 0.1, 1e-10, 1e-30, 4};
  int lm_evaluations = 400;  // residual evaluations per Levenberg-Marquardt run
  std::optional<IdentPoint> initial_guess;  // tried before the random starts
};

struct IdentResult {
  IdentPoint fitted;
  double residual = 0.0;  // sum of squared output residuals
  int best_start = -1;    // -1 for the initial guess
  int starts = 0;
  int finite_starts = 0;
  long evaluations = 0;
  bool converged = false;
};

/// Uniform draw in [0,1) from the top 53 bits of one generator output.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Multistart local search in box-normalized coordinates with projection onto
/// the box.
/// Deterministic for a given seed; the best start wins, ties to the earlier one.
inline IdentResult identify(const LearningData& data, const ParamBox& box,
                            const IdentOptions& opt = {}) {
  data.validate();
  box.validate();
  if (opt.multistart < 0) throw InvalidParameter("identification: multistart must be >= 0");
  if (opt.multistart == 0 && !opt.initial_guess) {
    throw InvalidParameter("identification: need a start (multistart > 0 or an initial guess)");
  }

  std::vector<int> free;
  for (int i = 0; i < kIdentDim; ++i) {
    if (box.upper[i] > box.lower[i]) free.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(free.size());
  auto to_point = [&](const Eigen::VectorXd& x) {
    Eigen::Matrix<double, kIdentDim, 1> v = box.lower;
    for (Eigen::Index j = 0; j < n; ++j) {
      const int i = free[static_cast<std::size_t>(j)];
      v[i] = box.lower[i] + x[j] * (box.upper[i] - box.lower[i]);
    }
    return IdentPoint::from_vector(v);
  };
  long evaluations = 0;
  auto objective = [&](const Eigen::VectorXd& x) {
    ++evaluations;
    return identification_objective(data, to_point(x), opt.flow);
  };
  auto local_search = [&](const Eigen::VectorXd& x0) {
    if (opt.local == LocalSearch::NelderMead) return minimize_nelder_mead(objective, x0, opt.search);
    detail::NormalizedResidual fn{&data, &box, &free, &evaluations};
    Eigen::LevenbergMarquardt<detail::NormalizedResidual> lm(fn);
    lm.parameters.maxfev = opt.lm_evaluations;
    lm.parameters.ftol = 1e-20;
    lm.parameters.xtol = 1e-15;
    Eigen::VectorXd x = x0;
    const auto status = lm.minimize(x);
    NelderMeadResult r;
    r.x = project_unit_box(x);
    r.f = objective(r.x);
    r.evaluations = static_cast<int>(lm.nfev);
    r.converged = status == Eigen::LevenbergMarquardtSpace::RelativeReductionTooSmall ||
                  status == Eigen::LevenbergMarquardtSpace::RelativeErrorTooSmall ||
                  status == Eigen::LevenbergMarquardtSpace::RelativeErrorAndReductionTooSmall ||
                  status == Eigen::LevenbergMarquardtSpace::CosinusTooSmall;
    return r;
  };

  IdentResult best;
  best.residual = std::numeric_limits<double>::infinity();
  auto consider = [&](const NelderMeadResult& r, int start) {
    ++best.starts;
    if (!std::isfinite(r.f)) return;
    ++best.finite_starts;
    if (r.f < best.residual) {
      best.residual = r.f;
      best.fitted = to_point(r.x);
      best.best_start = start;
      best.converged = r.converged;
    }
  };

  if (n == 0) {
    NelderMeadResult r;
    r.x = Eigen::VectorXd(0);
    r.f = objective(r.x);
    r.converged = true;
    consider(r, 0);
  } else {
    if (opt.initial_guess) {
      const auto v = opt.initial_guess->to_vector();
      Eigen::VectorXd x(n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const int i = free[static_cast<std::size_t>(j)];
        x[j] = (v[i] - box.lower[i]) / (box.upper[i] - box.lower[i]);
      }
      consider(local_search(x), -1);
    }
    std::mt19937_64 rng(opt.seed);
    for (int s = 0; s < opt.multistart; ++s) {
      Eigen::VectorXd x(n);
      for (Eigen::Index j = 0; j < n; ++j) x[j] = unit_uniform(rng);
      consider(local_search(x), s);
    }
  }
  best.evaluations = evaluations;
  if (best.finite_starts == 0) throw AllStartsFailed(best.starts);
  return best;
}

struct PredictionError {
  double norm2 = 0.0;    // sqrt(sum_i gap_i^2) over the sampling grid
  double norm_inf = 0.0;
  double output_max = 0.0;  // max_i |y_i| of the reference run
  std::vector<double> gap;  // y_i - yhat_i
};

/// Replays the recorded controls of `truth` open-loop on the fitted model and
/// compares outputs sample by sample.
inline PredictionError prediction_error(const IdentPoint& fitted, const LearningData& truth) {
  truth.validate();
  const std::vector<double> yh = predict_outputs(fitted, truth.u, truth.tau);
  PredictionError pe;
  pe.gap.resize(yh.size());
  double s = 0.0;
  for (std::size_t i = 0; i < yh.size(); ++i) {
    const double g = truth.y[i] - yh[i];
    pe.gap[i] = g;
    s += g * g;
    pe.norm_inf = std::max(pe.norm_inf, std::abs(g));
    pe.output_max = std::max(pe.output_max, std::abs(truth.y[i]));
  }
  pe.norm2 = std::sqrt(s);
  return pe;
}

/// Closed-loop sampled funnel control on the true plant over [0, horizon],
/// then the open-loop replay on the fitted model.
template <ControlAffinePlant Plant>
PredictionError prediction_error(const IdentPoint& fitted, const Plant& true_plant,
                                 const FunnelSpec& spec, const ReferenceSignal& ref,
                                 const typename Plant::State& z0_true, double horizon = 100.0,
                                 double tau = 1e-3) {
  return prediction_error(fitted,
                          collect_learning_data(true_plant, spec, ref, z0_true, tau, horizon));
}

}  // namespace fmpc
