#pragma once

// Funnel boundaries, reference signals, the auxiliary error cascade
//
//   e_0 = y - y_ref,   e_{i+1} = e_i' + k_i e_i,   k_i = 1 / (1 - phi_i^2 |e_i|^2)
//
// and the funnel control law u = sigma k_{r-1} e_{r-1}. All time derivatives
// are carried exactly through jets, so e_i is evaluated from (t, z) alone.

#include "fmpc/jet.hpp"
#include "fmpc/plant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmpc {

class FunnelViolation : public std::runtime_error {
 public:
  FunnelViolation(int level, double t, double margin)
      : std::runtime_error("funnel violated at level " + std::to_string(level) +
                           ", t=" + std::to_string(t) + " (margin " + std::to_string(margin) + ")"),
        level_(level),
        time_(t),
        margin_(margin) {}
  int level() const noexcept { return level_; }
  double time() const noexcept { return time_; }
  double margin() const noexcept { return margin_; }

 private:
  int level_;
  double time_;
  double margin_;
};

/// Boundary 1/phi(t) = a + b exp(-c t).
struct FunnelLevel {
  double a = 1.0;
  double b = 0.0;
  double c = 0.0;

  void validate() const {
    if (!(a > 0.0) || !std::isfinite(a)) throw InvalidParameter("funnel: a must be positive");
    if (!(b >= 0.0) || !std::isfinite(b)) throw InvalidParameter("funnel: b must be non-negative");
    if (!(c >= 0.0) || !std::isfinite(c)) throw InvalidParameter("funnel: c must be non-negative");
  }

  double boundary(double t) const { return a + b * std::exp(-c * t); }

  Jet boundary_jet(double t, int order) const {
    Jet j(order);
    double term = b * std::exp(-c * t);
    j[0] = a + term;
    for (int i = 1; i <= order; ++i) {
      term *= -c;
      j[i] = term;
    }
    return j;
  }

  Jet phi_jet(double t, int order) const { return reciprocal(boundary_jet(t, order)); }

  friend bool operator==(const FunnelLevel&, const FunnelLevel&) = default;
};

struct FunnelSpec {
  std::vector<FunnelLevel> levels;
  double sigma = -1.0;  // -1 for a positive high-gain matrix

  void validate(int relative_degree) const {
    if (static_cast<int>(levels.size()) != relative_degree) {
      throw InvalidParameter("funnel: need one level per relative degree (" +
                             std::to_string(relative_degree) + "), got " +
                             std::to_string(levels.size()));
    }
    if (relative_degree < 1 || relative_degree >= kJetCapacity) {
      throw InvalidParameter("funnel: unsupported relative degree");
    }
    for (const auto& l : levels) l.validate();
    if (sigma != 1.0 && sigma != -1.0) throw InvalidParameter("funnel: sigma must be +1 or -1");
  }

  /// Funnels used for the relative-degree-two study.
  static FunnelSpec standard_r2() { return {{{0.1, 5.0, 2.0}, {0.5, 10.0, 2.0}}, -1.0}; }
  /// Funnels used for the relative-degree-three study.
  static FunnelSpec standard_r3() {
    return {{{0.1, 5.0, 2.0}, {0.05, 1.4, 1.0}, {0.05, 1.4, 1.0}}, -1.0};
  }

  friend bool operator==(const FunnelSpec&, const FunnelSpec&) = default;
};

/// y_ref(t) = offset + amplitude cos(frequency t + phase).
struct ReferenceSignal {
  double amplitude = 1.0;
  double frequency = 1.0;
  double phase = 0.0;
  double offset = 0.0;

  static ReferenceSignal zero() { return {0.0, 1.0, 0.0, 0.0}; }

  double value(double t) const { return offset + amplitude * std::cos(frequency * t + phase); }

  Jet jet(double t, int order) const {
    Jet j(order);
    const double arg = frequency * t + phase;
    const double c = std::cos(arg);
    const double s = std::sin(arg);
    // cycle of derivatives of cos: cos, -sin, -cos, sin
    double scale = amplitude;
    for (int i = 0; i <= order; ++i) {
      switch (i % 4) {
        case 0: j[i] = scale * c; break;
        case 1: j[i] = -scale * s; break;
        case 2: j[i] = -scale * c; break;
        default: j[i] = scale * s; break;
      }
      scale *= frequency;
    }
    j[0] += offset;
    return j;
  }

  friend bool operator==(const ReferenceSignal&, const ReferenceSignal&) = default;
};

inline constexpr int kMaxLevels = kJetCapacity;

struct ErrorCascade {
  int levels = 0;
  double time = 0.0;
  std::array<Jet, kMaxLevels> e{};  // e[i] carries derivatives up to order levels-1-i
  std::array<double, kMaxLevels> gain{};
  std::array<double, kMaxLevels> bound{};  // 1/phi_i(t)
  int first_violation = -1;                // -1 iff strictly interior at every level

  bool valid() const noexcept { return first_violation < 0; }
  double error(int i) const noexcept { return e[static_cast<std::size_t>(i)].value(); }

  /// bound_i - |e_i|
  double level_margin(int i) const noexcept {
    return bound[static_cast<std::size_t>(i)] - std::abs(error(i));
  }

  double margin() const noexcept {
    double m = std::numeric_limits<double>::infinity();
    for (int i = 0; i < levels; ++i) m = std::min(m, level_margin(i));
    return m;
  }
};

/// Time-only ingredients of the cascade at one instant: reference jet and,
/// per level, the boundary and the jet of phi_i needed for the gain jet.
struct FunnelTimeData {
  double time = 0.0;
  int levels = 0;
  Jet reference;
  std::array<double, kMaxLevels> bound{};
  std::array<Jet, kMaxLevels> phi{};  // order levels-2-i, unused for the top level
};

inline FunnelTimeData funnel_time_data(const FunnelSpec& spec, const ReferenceSignal& ref,
                                       int levels, double t) {
  FunnelTimeData td;
  td.time = t;
  td.levels = levels;
  td.reference = ref.jet(t, levels - 1);
  for (int i = 0; i < levels; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const int order = levels - 1 - i;
    if (order == 0) {
      td.bound[idx] = spec.levels[idx].boundary(t);
    } else {
      const Jet beta = spec.levels[idx].boundary_jet(t, order - 1);
      td.bound[idx] = beta.value();
      td.phi[idx] = reciprocal(beta);
    }
  }
  return td;
}

/// Evaluates the cascade without throwing. Past the first violated level the
/// gains follow the raw formula (possibly negative or infinite).
template <ControlAffinePlant Plant>
ErrorCascade error_cascade_unchecked(const Plant& plant, const FunnelTimeData& td,
                                     const typename Plant::State& z) {
  const int r = td.levels;
  ErrorCascade c;
  c.levels = r;
  c.time = td.time;
  Jet ej = plant.output_jet(z, r - 1) - td.reference;
  for (int i = 0; i < r; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    c.e[idx] = ej;
    c.bound[idx] = td.bound[idx];
    const int order = r - 1 - i;  // derivatives of e_i available
    if (order == 0) {
      const double ratio = ej.value() / td.bound[idx];
      c.gain[idx] = 1.0 / (1.0 - ratio * ratio);
    } else {
      const Jet phi_e = td.phi[idx] * truncated(ej, order - 1);
      const Jet gain = reciprocal(Jet::constant(1.0, order - 1) - phi_e * phi_e);
      c.gain[idx] = gain.value();
      ej = derivative(ej) + gain * truncated(ej, order - 1);
    }
    if (c.first_violation < 0 && !(std::abs(c.e[idx].value()) < c.bound[idx])) {
      c.first_violation = i;
    }
  }
  return c;
}

template <ControlAffinePlant Plant>
ErrorCascade error_cascade_unchecked(const Plant& plant, const FunnelSpec& spec,
                                     const ReferenceSignal& ref, double t,
                                     const typename Plant::State& z) {
  return error_cascade_unchecked(plant,
                                 funnel_time_data(spec, ref, plant.relative_degree(), t), z);
}

/// Throws FunnelViolation at the first level with phi_i |e_i| >= 1.
template <ControlAffinePlant Plant>
ErrorCascade error_cascade(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                           double t, const typename Plant::State& z) {
  ErrorCascade c = error_cascade_unchecked(plant, spec, ref, t, z);
  if (!c.valid()) {
    throw FunnelViolation(c.first_violation, t, c.level_margin(c.first_violation));
  }
  return c;
}

inline double funnel_control(const ErrorCascade& c, double sigma) {
  const auto top = static_cast<std::size_t>(c.levels - 1);
  return sigma * c.gain[top] * c.e[top].value();
}

template <ControlAffinePlant Plant>
double funnel_control(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                      double t, const typename Plant::State& z) {
  return funnel_control(error_cascade(plant, spec, ref, t, z), spec.sigma);
}

/// min_i (1/phi_i(t) - |e_i|); positive iff strictly interior.
inline double margin(const ErrorCascade& c) { return c.margin(); }

}  // namespace fmpc
