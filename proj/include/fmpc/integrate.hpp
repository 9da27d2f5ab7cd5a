#pragma once

// Deterministic ODE integration: explicit Euler, classical RK4 and the
// Dormand-Prince 4(5) embedded pair with cubic Hermite dense output.
//
// States are either `double` or fixed/dynamic Eigen column vectors. A vector
// field is any callable `State f(double t, const State& x)`.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmpc {

class NonFiniteState : public std::runtime_error {
 public:
  explicit NonFiniteState(double t)
      : std::runtime_error("non-finite state encountered at t=" + std::to_string(t)), time_(t) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

class StepUnderflow : public std::runtime_error {
 public:
  StepUnderflow(double t, double h)
      : std::runtime_error("step size underflow at t=" + std::to_string(t) +
                           " (h=" + std::to_string(h) + ")"),
        time_(t) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

enum class StepMethod { Euler, RK4 };

template <class State>
struct Trajectory {
  std::vector<double> times;
  std::vector<State> states;

  std::size_t size() const noexcept { return times.size(); }
  const State& back() const { return states.back(); }
};

namespace detail {

inline bool all_finite(double x) noexcept { return std::isfinite(x); }

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& x) {
  return x.allFinite();
}

// max_i |err_i| / (atol + rtol * max(|x0_i|, |x1_i|))
inline double scaled_error(double err, double x0, double x1, double rtol, double atol) {
  return std::abs(err) / (atol + rtol * std::max(std::abs(x0), std::abs(x1)));
}

template <class D0, class D1, class D2>
double scaled_error(const Eigen::MatrixBase<D0>& err, const Eigen::MatrixBase<D1>& x0,
                    const Eigen::MatrixBase<D2>& x1, double rtol, double atol) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < err.size(); ++i) {
    worst = std::max(worst, scaled_error(err[i], x0[i], x1[i], rtol, atol));
  }
  return worst;
}

inline double max_abs(double x) noexcept { return std::abs(x); }

template <class Derived>
double max_abs(const Eigen::MatrixBase<Derived>& x) {
  return x.size() == 0 ? 0.0 : x.cwiseAbs().maxCoeff();
}

// Cubic Hermite interpolation on [t0, t0 + h] at fraction theta.
template <class State>
State hermite(const State& x0, const State& f0, const State& x1, const State& f1, double h,
              double theta) {
  const double t2 = theta * theta;
  const double t3 = t2 * theta;
  const double h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
  const double h10 = t3 - 2.0 * t2 + theta;
  const double h01 = -2.0 * t3 + 3.0 * t2;
  const double h11 = t3 - t2;
  return State(h00 * x0 + (h10 * h) * f0 + h01 * x1 + (h11 * h) * f1);
}

}  // namespace detail

template <class Field, class State>
State euler_step(Field&& f, double t, const State& x, double h) {
  const State k1 = f(t, x);
  if (!detail::all_finite(k1)) throw NonFiniteState(t);
  return State(x + h * k1);
}

template <class Field, class State>
State rk4_step(Field&& f, double t, const State& x, double h) {
  const State k1 = f(t, x);
  const State k2 = f(t + 0.5 * h, State(x + (0.5 * h) * k1));
  const State k3 = f(t + 0.5 * h, State(x + (0.5 * h) * k2));
  const State k4 = f(t + h, State(x + h * k3));
  if (!detail::all_finite(k1) || !detail::all_finite(k2) || !detail::all_finite(k3) ||
      !detail::all_finite(k4)) {
    throw NonFiniteState(t);
  }
  return State(x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
}

template <class Field, class State>
State fixed_step(StepMethod method, Field&& f, double t, const State& x, double h) {
  return method == StepMethod::Euler ? euler_step(f, t, x, h) : rk4_step(f, t, x, h);
}

/// Grid t0, t0 + h, ... with a shorter final step landing exactly on tf.
template <class Field, class State>
Trajectory<State> integrate_fixed(Field&& f, double t0, const State& x0, double tf, double h,
                                  StepMethod method = StepMethod::RK4) {
  if (!(tf > t0)) throw std::invalid_argument("integrate_fixed: tf must exceed t0");
  if (!(h > 0.0)) throw std::invalid_argument("integrate_fixed: h must be positive");
  const double span = tf - t0;
  auto steps = static_cast<long>(std::ceil(span / h - 1e-9));
  steps = std::max(steps, 1L);

  Trajectory<State> out;
  out.times.reserve(static_cast<std::size_t>(steps) + 1);
  out.states.reserve(static_cast<std::size_t>(steps) + 1);
  out.times.push_back(t0);
  out.states.push_back(x0);
  State x = x0;
  for (long k = 0; k < steps; ++k) {
    const double t = t0 + static_cast<double>(k) * h;
    const double t_next = (k + 1 == steps) ? tf : t0 + static_cast<double>(k + 1) * h;
    x = fixed_step(method, f, t, x, t_next - t);
    out.times.push_back(t_next);
    out.states.push_back(x);
  }
  return out;
}

struct AdaptiveOptions {
  double rtol = 1e-6;
  double atol = 1e-8;
  double initial_step = 0.0;  // 0 selects a starting step automatically
  double max_step = std::numeric_limits<double>::infinity();

  friend bool operator==(const AdaptiveOptions&, const AdaptiveOptions&) = default;
};

namespace dopri {

// Dormand-Prince 5(4) tableau, FSAL.
inline constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
inline constexpr double a21 = 1.0 / 5.0;
inline constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
inline constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
inline constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                        a54 = -212.0 / 729.0;
inline constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                        a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
inline constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0,
                        b5 = -2187.0 / 6784.0, b6 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
inline constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                        e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;

}  // namespace dopri

namespace detail {

// Drives the Dormand-Prince pair from t0 to tf. `on_step(t, x)` fires for every
// accepted step, `on_sample(index, x)` for each entry of `samples` (sorted,
// inside [t0, tf]). A non-finite stage rejects the step and shrinks h.
template <class Field, class State, class OnStep, class OnSample>
void dopri5_drive(Field&& f, double t0, const State& x0, double tf, const AdaptiveOptions& opt,
                  std::span<const double> samples, OnStep&& on_step, OnSample&& on_sample) {
  using namespace dopri;
  if (!(tf > t0)) throw std::invalid_argument("integrate_adaptive: tf must exceed t0");
  if (!(opt.rtol > 0.0) || !(opt.atol > 0.0)) {
    throw std::invalid_argument("integrate_adaptive: tolerances must be positive");
  }
  const double span = tf - t0;
  const double h_min = 1e-14 * span;

  std::size_t next_sample = 0;
  while (next_sample < samples.size() && samples[next_sample] <= t0) {
    on_sample(next_sample++, x0);
  }

  double t = t0;
  State x = x0;
  State k1 = f(t, x);
  if (!all_finite(k1)) throw NonFiniteState(t);

  double h = opt.initial_step;
  if (!(h > 0.0)) {
    // Hairer-Norsett-Wanner starting step heuristic.
    const double d0 = max_abs(x) / (opt.atol + opt.rtol * max_abs(x));
    const double d1 = max_abs(k1) / (opt.atol + opt.rtol * max_abs(x));
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, span);
    const State x1 = x + h0 * k1;
    const State f1 = f(t + h0, x1);
    const double d2 = all_finite(f1)
                          ? max_abs(State(f1 - k1)) / (opt.atol + opt.rtol * max_abs(x)) / h0
                          : std::numeric_limits<double>::infinity();
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 1.0 / 5.0);
    h = std::min(100.0 * h0, h1);
  }
  h = std::min({h, span, opt.max_step});

  bool last_failure_non_finite = false;
  while (t < tf) {
    if (h < h_min) {
      if (last_failure_non_finite) throw NonFiniteState(t);
      throw StepUnderflow(t, h);
    }
    bool final_step = false;
    if (t + h >= tf || tf - (t + h) < h_min) {
      h = tf - t;
      final_step = true;
    }

    const State k2 = f(t + c2 * h, State(x + h * (a21 * k1)));
    const State k3 = f(t + c3 * h, State(x + h * (a31 * k1 + a32 * k2)));
    const State k4 = f(t + c4 * h, State(x + h * (a41 * k1 + a42 * k2 + a43 * k3)));
    const State k5 = f(t + c5 * h, State(x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4)));
    const State k6 =
        f(t + h, State(x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5)));
    const State x_new = x + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    const State k7 = f(t + h, x_new);

    const bool finite = all_finite(k2) && all_finite(k3) && all_finite(k4) && all_finite(k5) &&
                        all_finite(k6) && all_finite(k7) && all_finite(x_new);
    if (!finite) {
      last_failure_non_finite = true;
      h *= 0.25;
      continue;
    }
    const State err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double err_norm = scaled_error(err, x, x_new, opt.rtol, opt.atol);

    const double factor = err_norm == 0.0 ? 5.0
                                          : std::clamp(0.9 * std::pow(1.0 / err_norm, 0.2), 0.2,
                                                       5.0);
    if (err_norm > 1.0) {
      last_failure_non_finite = false;
      h *= factor;
      continue;
    }

    const double t_new = final_step ? tf : t + h;
    while (next_sample < samples.size() && samples[next_sample] <= t_new) {
      const double ts = samples[next_sample];
      if (ts == t_new) {
        on_sample(next_sample, x_new);
      } else {
        on_sample(next_sample, hermite(x, k1, x_new, k7, t_new - t, (ts - t) / (t_new - t)));
      }
      ++next_sample;
    }
    t = t_new;
    x = x_new;
    k1 = k7;
    on_step(t, x);
    h = std::min(h * factor, opt.max_step);
  }
}

}  // namespace detail

/// Adaptive Dormand-Prince 4(5) integration. The returned grid holds every
/// accepted step merged with the requested `samples` (dense output).
template <class Field, class State>
Trajectory<State> integrate_adaptive(Field&& f, double t0, const State& x0, double tf,
                                     const AdaptiveOptions& opt = {},
                                     std::span<const double> samples = {}) {
  Trajectory<State> steps;
  steps.times.push_back(t0);
  steps.states.push_back(x0);
  std::vector<State> sampled(samples.size(), x0);
  detail::dopri5_drive(
      f, t0, x0, tf, opt, samples,
      [&](double t, const State& x) {
        steps.times.push_back(t);
        steps.states.push_back(x);
      },
      [&](std::size_t i, const State& x) { sampled[i] = x; });
  if (samples.empty()) return steps;

  Trajectory<State> merged;
  std::size_t i = 0, j = 0;
  while (i < steps.size() || j < samples.size()) {
    const bool take_sample = j < samples.size() && (i >= steps.size() || samples[j] <= steps.times[i]);
    if (take_sample) {
      if (i < steps.size() && samples[j] == steps.times[i]) ++i;
      if (merged.times.empty() || samples[j] > merged.times.back()) {
        merged.times.push_back(samples[j]);
        merged.states.push_back(sampled[j]);
      }
      ++j;
    } else {
      if (merged.times.empty() || steps.times[i] > merged.times.back()) {
        merged.times.push_back(steps.times[i]);
        merged.states.push_back(steps.states[i]);
      }
      ++i;
    }
  }
  return merged;
}

/// States at the requested sorted `times` only; integration runs to times.back().
template <class Field, class State>
std::vector<State> sample_adaptive(Field&& f, double t0, const State& x0,
                                   std::span<const double> times, const AdaptiveOptions& opt = {}) {
  std::vector<State> out(times.size(), x0);
  if (times.empty() || times.back() <= t0) return out;
  detail::dopri5_drive(
      f, t0, x0, times.back(), opt, times, [](double, const State&) {},
      [&](std::size_t i, const State& x) { out[i] = x; });
  return out;
}

/// Final state only.
template <class Field, class State>
State flow_adaptive(Field&& f, double t0, const State& x0, double tf, const AdaptiveOptions& opt = {}) {
  State last = x0;
  detail::dopri5_drive(
      f, t0, x0, tf, opt, {}, [&](double, const State& x) { last = x; },
      [](std::size_t, const State&) {});
  return last;
}

}  // namespace fmpc
