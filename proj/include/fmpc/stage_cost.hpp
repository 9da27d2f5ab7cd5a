#pragma once

#include "fmpc/funnel.hpp"

#include <limits>
#include <stdexcept>

namespace fmpc {

/// Running cost l(t, x, u) of the optimal control problem.
///  Classical: sum_i |e_i|^2 + lambda |u|^2
///  Funnel:    sum_i 1/(1 - phi_i^2 |e_i|^2) + lambda |u|^2, +inf outside the funnel
struct StageCost {
  enum class Kind { Classical, Funnel };

  Kind kind = Kind::Classical;
  double lambda = 0.005;

  void validate() const {
    if (!(lambda > 0.0)) throw InvalidParameter("stage cost: lambda must be positive");
  }

  /// u-independent part.
  double state_part(const ErrorCascade& c) const {
    double s = 0.0;
    if (kind == Kind::Classical) {
      for (int i = 0; i < c.levels; ++i) s += c.error(i) * c.error(i);
      return s;
    }
    if (!c.valid()) return std::numeric_limits<double>::infinity();
    for (int i = 0; i < c.levels; ++i) s += c.gain[static_cast<std::size_t>(i)];
    return s;
  }

  double operator()(const ErrorCascade& c, double u) const {
    return state_part(c) + lambda * u * u;
  }

  friend bool operator==(const StageCost&, const StageCost&) = default;
};

inline const char* to_string(StageCost::Kind k) {
  return k == StageCost::Kind::Classical ? "classical" : "funnel";
}

template <ControlAffinePlant Plant>
double stage_cost_classical(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                            double t, const typename Plant::State& z, double u, double lambda) {
  return StageCost{StageCost::Kind::Classical, lambda}(error_cascade(plant, spec, ref, t, z), u);
}

/// Returns +inf on boundary contact instead of throwing.
template <ControlAffinePlant Plant>
double stage_cost_funnel(const Plant& plant, const FunnelSpec& spec, const ReferenceSignal& ref,
                         double t, const typename Plant::State& z, double u, double lambda) {
  return StageCost{StageCost::Kind::Funnel, lambda}(
      error_cascade_unchecked(plant, spec, ref, t, z), u);
}

}  // namespace fmpc
