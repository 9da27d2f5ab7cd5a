#pragma once

// Closed-loop simulation: continuous funnel control, sampled-data (zero-order
// hold) loops driven by an arbitrary controller, and the performance measure
// sum_{i=0}^{T/delta} l(i delta, x(i delta), u(i delta)).

#include "fmpc/funnel.hpp"
#include "fmpc/integrate.hpp"
#include "fmpc/stage_cost.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmpc {

class GridMismatch : public std::runtime_error {
 public:
  explicit GridMismatch(double t)
      : std::runtime_error("record has no sample at t=" + std::to_string(t)) {}
};

struct SimRow {
  double t = 0.0;
  Eigen::VectorXd z;
  double y = 0.0;
  double y_ref = 0.0;
  std::array<double, kMaxLevels> e{};
  std::array<double, kMaxLevels> gain{};
  std::array<double, kMaxLevels> bound{};
  double u = 0.0;
  double margin = 0.0;
  bool interior = true;  // cascade strictly inside every funnel
  bool hold = false;     // row sits on a control update instant
};

struct SimRecord {
  int levels = 0;
  std::vector<SimRow> rows;
  bool feasible = true;
  std::optional<double> first_violation;
  bool aborted = false;
  std::string abort_reason;

  void push(SimRow row) {
    if (row.t > 0.0 && !(row.margin > 0.0) && feasible) {
      feasible = false;
      first_violation = row.t;
    }
    rows.push_back(std::move(row));
  }

  void abort(double t, std::string reason) {
    aborted = true;
    abort_reason = std::move(reason);
    if (feasible) {
      feasible = false;
      first_violation = t;
    }
  }

  /// Minimum margin over rows with t > t_from.
  double min_margin(double t_from = 0.0) const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) {
      if (r.t > t_from) m = std::min(m, r.margin);
    }
    return m;
  }

  /// Minimum margin over rows with t > 0 up to and including the first exit.
  double min_margin_until_exit() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) {
      if (r.t <= 0.0) continue;
      m = std::min(m, r.margin);
      if (first_violation && r.t >= *first_violation) break;
    }
    return m;
  }

  double u_min() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : rows) m = std::min(m, r.u);
    return m;
  }

  double u_max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& r : rows) m = std::max(m, r.u);
    return m;
  }

  double control_range_width() const { return rows.empty() ? 0.0 : u_max() - u_min(); }

  double end_time() const { return rows.empty() ? 0.0 : rows.back().t; }
};

template <ControlAffinePlant Plant>
SimRow make_row(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref, double t,
                const typename Plant::State& z, double u, bool hold) {
  const ErrorCascade c = error_cascade_unchecked(plant, spec, ref, t, z);
  SimRow row;
  row.t = t;
  row.z = z;
  row.y = plant.output_jet(z, 0).value();
  row.y_ref = ref.value(t);
  for (int i = 0; i < c.levels; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    row.e[idx] = c.error(i);
    row.gain[idx] = c.gain[idx];
    row.bound[idx] = c.bound[idx];
  }
  row.u = u;
  row.margin = c.margin();
  row.interior = c.valid();
  row.hold = hold;
  return row;
}

namespace detail {

/// t0, t0 + dt, ..., with t_end appended when not a multiple.
inline std::vector<double> uniform_grid(double t0, double t_end, double dt) {
  const double span = t_end - t0;
  const auto n = static_cast<long>(std::floor(span / dt + 1e-9));
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(n) + 2);
  for (long i = 0; i <= n; ++i) g.push_back(t0 + static_cast<double>(i) * dt);
  if (t_end - g.back() > 1e-9 * std::max(1.0, std::abs(t_end))) {
    g.push_back(t_end);
  } else {
    g.back() = t_end;
  }
  return g;
}

}  // namespace detail

struct ContinuousOptions {
  double t0 = 0.0;
  double dt_out = 1e-3;
  AdaptiveOptions tol{};

  friend bool operator==(const ContinuousOptions&, const ContinuousOptions&) = default;
};

/// Closed loop with u = funnel_control(t, z) evaluated inside the integrator.
template <ControlAffinePlant Plant>
SimRecord simulate_fc_continuous(const Plant& plant, const FunnelSpec& spec,
                                 const ReferenceSignal& ref, const typename Plant::State& z0,
                                 double t_end, const ContinuousOptions& opt = {}) {
  using State = typename Plant::State;
  spec.validate(plant.relative_degree());
  error_cascade(plant, spec, ref, opt.t0, z0);  // initial feasibility

  auto closed_loop = [&](double t, const State& z) -> State {
    const ErrorCascade c = error_cascade_unchecked(plant, spec, ref, t, z);
    if (!c.valid()) return State::Constant(std::numeric_limits<double>::quiet_NaN());
    return plant.dynamics(z, funnel_control(c, spec.sigma));
  };

  const std::vector<double> grid = detail::uniform_grid(opt.t0, t_end, opt.dt_out);
  const std::vector<State> states =
      grid.size() > 1 ? sample_adaptive(closed_loop, opt.t0, z0, grid, opt.tol)
                      : std::vector<State>{z0};

  SimRecord rec;
  rec.levels = plant.relative_degree();
  rec.rows.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const ErrorCascade c = error_cascade_unchecked(plant, spec, ref, grid[i], states[i]);
    rec.push(make_row(plant, spec, ref, grid[i], states[i], funnel_control(c, spec.sigma), false));
  }
  return rec;
}

struct SampledOptions {
  double t0 = 0.0;
  int samples_per_hold = 10;  // dense rows per hold interval, including the hold instant
  AdaptiveOptions flow{1e-10, 1e-12};

  friend bool operator==(const SampledOptions&, const SampledOptions&) = default;
};

/// Sampled-data loop: at t_k = t0 + k period the controller sees the exact
/// state and returns u_k, held constant on [t_k, t_{k+1}). A controller is
/// called as `ctrl(k, t_k, z_k)`. Non-finite controls or integration failure
/// stop the loop and mark the record aborted.
template <ControlAffinePlant Plant, class Controller>
SimRecord simulate_sampled(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                           const typename Plant::State& z0, double t_end, double period,
                           Controller&& ctrl, const SampledOptions& opt = {}) {
  using State = typename Plant::State;
  if (!(period > 0.0)) throw InvalidParameter("sampling period must be positive");
  if (!(t_end > opt.t0)) throw InvalidParameter("t_end must exceed the start time");
  if (opt.samples_per_hold < 1) throw InvalidParameter("samples_per_hold must be >= 1");
  spec.validate(plant.relative_degree());

  const std::vector<double> holds = detail::uniform_grid(opt.t0, t_end, period);
  const int m = opt.samples_per_hold;

  SimRecord rec;
  rec.levels = plant.relative_degree();
  rec.rows.reserve(holds.size() * static_cast<std::size_t>(m));

  State z = z0;
  std::vector<double> sub(static_cast<std::size_t>(m));
  for (std::size_t k = 0; k < holds.size(); ++k) {
    const double tk = holds[k];
    const double u = ctrl(k, tk, z);
    if (!std::isfinite(u)) {
      rec.push(make_row(plant, spec, ref, tk, z, u, true));
      rec.abort(tk, "non-finite control");
      break;
    }
    rec.push(make_row(plant, spec, ref, tk, z, u, true));
    if (k + 1 == holds.size()) break;

    const double t_next = holds[k + 1];
    const double h = t_next - tk;
    for (int j = 1; j <= m; ++j) sub[static_cast<std::size_t>(j - 1)] = tk + h * j / m;
    sub.back() = t_next;
    auto held = [&](double, const State& x) -> State { return plant.dynamics(x, u); };
    std::vector<State> zs;
    try {
      zs = sample_adaptive(held, tk, z, sub, opt.flow);
    } catch (const std::runtime_error& ex) {
      rec.abort(tk, ex.what());
      break;
    }
    for (int j = 0; j + 1 < m; ++j) {
      rec.push(make_row(plant, spec, ref, sub[static_cast<std::size_t>(j)],
                        zs[static_cast<std::size_t>(j)], u, false));
    }
    z = zs.back();
    if (!detail::all_finite(z)) {
      rec.abort(t_next, "non-finite state");
      break;
    }
  }
  return rec;
}

/// Zero-order-hold funnel control u(t) = u_FC(floor(t/tau) tau). Exits from the
/// funnel do not stop the run: gains then follow the raw formula and the
/// record is flagged infeasible.
template <ControlAffinePlant Plant>
SimRecord simulate_fc_zoh(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                          const typename Plant::State& z0, double t_end, double tau,
                          const SampledOptions& opt = {}) {
  using State = typename Plant::State;
  error_cascade(plant, spec, ref, opt.t0, z0);
  auto fc = [&](std::size_t, double t, const State& z) {
    return funnel_control(error_cascade_unchecked(plant, spec, ref, t, z), spec.sigma);
  };
  return simulate_sampled(plant, spec, ref, z0, t_end, tau, fc, opt);
}

/// Bare sum of the stage cost over the instants i delta, i = 0..horizon/delta,
/// using the control applied at each instant.
inline double performance_measure(const SimRecord& rec, const StageCost& cost, double delta,
                                  double horizon = 10.0, double t0 = 0.0) {
  if (!(delta > 0.0)) throw InvalidParameter("performance measure: delta must be positive");
  const auto n = static_cast<long>(std::llround(horizon / delta));
  double sum = 0.0;
  auto it = rec.rows.begin();
  for (long i = 0; i <= n; ++i) {
    const double ti = t0 + static_cast<double>(i) * delta;
    const double tol = 1e-9 * std::max(1.0, std::abs(ti));
    it = std::lower_bound(it, rec.rows.end(), ti - tol,
                          [](const SimRow& r, double t) { return r.t < t; });
    if (it == rec.rows.end() || std::abs(it->t - ti) > tol) throw GridMismatch(ti);
    auto pick = it;
    // prefer the hold row when a dense row shares the instant
    for (auto j = it; j != rec.rows.end() && std::abs(j->t - ti) <= tol; ++j) {
      if (j->hold) {
        pick = j;
        break;
      }
    }
    ErrorCascade c;
    c.levels = rec.levels;
    for (int l = 0; l < rec.levels; ++l) {
      const auto idx = static_cast<std::size_t>(l);
      c.e[idx] = Jet::constant(pick->e[idx], 0);
      c.gain[idx] = pick->gain[idx];
      c.bound[idx] = pick->bound[idx];
    }
    c.first_violation = pick->interior ? -1 : 0;
    sum += cost(c, pick->u);
  }
  return sum;
}

}  // namespace fmpc
