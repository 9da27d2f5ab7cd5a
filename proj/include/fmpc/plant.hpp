#pragma once

// Control-affine plant abstraction and the mass-spring system on a car:
//
//   [m1+m2       m2 cos(a)] [x'']   [      0     ]   [u]
//   [m2 cos(a)   m2       ] [s''] + [k s + d s'  ] = [0],     y = x + s cos(a)
//
// State z = (x, x', s, s'). Relative degree 2 for 0 < a < pi/2, 3 for a = 0.

#include "fmpc/jet.hpp"

#include <Eigen/Core>

#include <cmath>
#include <concepts>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fmpc {

class InvalidParameter : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class OrderExceedsRelativeDegree : public std::out_of_range {
 public:
  OrderExceedsRelativeDegree(int order, int r)
      : std::out_of_range("output jet order " + std::to_string(order) +
                          " exceeds relative degree " + std::to_string(r) + " - 1") {}
};

/// SISO control-affine plant with analytic output jets. `output_jet(z, j)`
/// returns (y, y', ..., y^(j)) for j < relative_degree(), all independent of u.
template <class P>
concept ControlAffinePlant = requires(const P& p, const typename P::State& z, double u, int j) {
  typename P::State;
  { p.relative_degree() } -> std::convertible_to<int>;
  { p.dynamics(z, u) } -> std::convertible_to<typename P::State>;
  { p.output_jet(z, j) } -> std::same_as<Jet>;
  { p.drift_top(z) } -> std::convertible_to<double>;
  { p.high_gain(z) } -> std::convertible_to<double>;
};

/// alpha below this counts as exactly zero (relative degree three).
inline constexpr double kAlphaZeroThreshold = 1e-12;

struct MassOnCarParams {
  double m1 = 4.0;
  double m2 = 1.0;
  double k = 2.0;
  double d = 1.0;
  double alpha = std::numbers::pi / 4.0;

  /// det M(alpha) = m2 (m1 + m2 sin^2 alpha)
  double mass_determinant() const {
    const double s = std::sin(alpha);
    return m2 * (m1 + m2 * s * s);
  }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0) || !std::isfinite(v)) {
        throw InvalidParameter(std::string("mass-on-car parameter ") + name +
                               " must be positive and finite");
      }
    };
    positive(m1, "m1");
    positive(m2, "m2");
    positive(k, "k");
    positive(d, "d");
    if (!(alpha >= 0.0) || !(alpha < std::numbers::pi / 2.0)) {
      throw InvalidParameter("mass-on-car parameter alpha must lie in [0, pi/2)");
    }
    if (!(mass_determinant() > 0.0)) throw InvalidParameter("mass matrix is singular");
  }

  friend bool operator==(const MassOnCarParams&, const MassOnCarParams&) = default;
};

inline int relative_degree(const MassOnCarParams& p) {
  return std::abs(p.alpha) <= kAlphaZeroThreshold ? 3 : 2;
}

/// Linear state-space form z' = A z + B u, y = C z. Only requires det M > 0,
/// so it also covers alpha = pi/2 (used by identification over closed boxes).
template <class T>
struct LinearModelT {
  Eigen::Matrix<T, 4, 4> A;
  Eigen::Matrix<T, 4, 1> B;
  Eigen::Matrix<T, 1, 4> C;
};

using LinearModel = LinearModelT<double>;

/// Generic in the scalar so complex-step differentiation can run through it.
template <class T>
LinearModelT<T> linear_model(T m1, T m2, T k, T d, T alpha) {
  using std::cos;
  using std::sin;
  const T c = cos(alpha);
  const T s = sin(alpha);
  const T delta = m2 * (m1 + m2 * s * s);
  LinearModelT<T> lm;
  lm.A.setZero();
  lm.A(0, 1) = T(1.0);
  lm.A(2, 3) = T(1.0);
  // x'' = (m2 u + m2 c F)/delta,  s'' = (-m2 c u - (m1+m2) F)/delta,  F = k s + d s'
  lm.A(1, 2) = m2 * c * k / delta;
  lm.A(1, 3) = m2 * c * d / delta;
  lm.A(3, 2) = -(m1 + m2) * k / delta;
  lm.A(3, 3) = -(m1 + m2) * d / delta;
  lm.B << T(0.0), m2 / delta, T(0.0), -m2 * c / delta;
  lm.C << T(1.0), T(0.0), c, T(0.0);
  return lm;
}

inline LinearModel linear_model(const MassOnCarParams& p) {
  return linear_model<double>(p.m1, p.m2, p.k, p.d, p.alpha);
}

class MassOnCar {
 public:
  using State = Eigen::Vector4d;

  explicit MassOnCar(const MassOnCarParams& params) : p_(params) {
    p_.validate();
    r_ = fmpc::relative_degree(p_);
    cos_a_ = std::cos(p_.alpha);
    const double s = std::sin(p_.alpha);
    sin2_a_ = s * s;
    delta_ = p_.mass_determinant();
  }

  const MassOnCarParams& params() const noexcept { return p_; }
  int relative_degree() const noexcept { return r_; }

  State dynamics(const State& z, double u) const {
    const double spring = p_.k * z[2] + p_.d * z[3];
    State dz;
    dz[0] = z[1];
    dz[1] = (p_.m2 * u + p_.m2 * cos_a_ * spring) / delta_;
    dz[2] = z[3];
    dz[3] = (-p_.m2 * cos_a_ * u - (p_.m1 + p_.m2) * spring) / delta_;
    return dz;
  }

  double output(const State& z) const { return z[0] + cos_a_ * z[2]; }

  Jet output_jet(const State& z, int order) const {
    if (order < 0 || order >= r_) throw OrderExceedsRelativeDegree(order, r_);
    Jet j(order);
    j[0] = output(z);
    if (order >= 1) j[1] = z[1] + cos_a_ * z[3];
    if (order >= 2) j[2] = -(p_.k * z[2] + p_.d * z[3]) / p_.m2;
    return j;
  }

  /// u-free part of y^(r).
  double drift_top(const State& z) const {
    const double spring = p_.k * z[2] + p_.d * z[3];
    if (r_ == 2) return -cos_a_ * p_.m1 * spring / delta_;
    // y''' = -(k s' + d s'')/m2 with s'' evaluated at u = 0 and alpha = 0
    const double s_ddot = -(p_.m1 + p_.m2) * spring / (p_.m1 * p_.m2);
    return -(p_.k * z[3] + p_.d * s_ddot) / p_.m2;
  }

  /// Coefficient of u in y^(r); state independent for this plant.
  double high_gain(const State& /*z*/) const {
    if (r_ == 2) return sin2_a_ / (p_.m1 + p_.m2 * sin2_a_);
    return p_.d / (p_.m1 * p_.m2);
  }

 private:
  MassOnCarParams p_;
  int r_ = 2;
  double cos_a_ = 1.0;
  double sin2_a_ = 0.0;
  double delta_ = 1.0;
};

static_assert(ControlAffinePlant<MassOnCar>);

}  // namespace fmpc
