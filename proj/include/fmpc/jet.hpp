#pragma once

// Truncated time-derivative jets (f, f', ..., f^(order)) with Leibniz-rule
// arithmetic. Used to carry exact derivatives of funnel boundaries, reference
// signals and the auxiliary error cascade.

#include <array>
#include <cassert>
#include <cstddef>

namespace fmpc {

inline constexpr int kJetCapacity = 6;

struct Jet {
  std::array<double, kJetCapacity> d{};
  int order = 0;

  Jet() = default;
  explicit Jet(int order_) : order(order_) { assert(order_ >= 0 && order_ < kJetCapacity); }

  static Jet constant(double value, int order_) {
    Jet j(order_);
    j.d[0] = value;
    return j;
  }

  double value() const noexcept { return d[0]; }
  double operator[](int i) const noexcept { return d[static_cast<std::size_t>(i)]; }
  double& operator[](int i) noexcept { return d[static_cast<std::size_t>(i)]; }
};

namespace detail {

inline constexpr std::array<std::array<double, kJetCapacity>, kJetCapacity> binomials = [] {
  std::array<std::array<double, kJetCapacity>, kJetCapacity> c{};
  for (int n = 0; n < kJetCapacity; ++n) {
    c[n][0] = 1.0;
    for (int k = 1; k <= n; ++k) c[n][k] = c[n - 1][k - 1] + (k < n ? c[n - 1][k] : 0.0);
  }
  return c;
}();

}  // namespace detail

inline Jet truncated(const Jet& a, int order) {
  assert(order <= a.order);
  Jet r(order);
  for (int i = 0; i <= order; ++i) r[i] = a[i];
  return r;
}

/// d/dt: drops one order.
inline Jet derivative(const Jet& a) {
  assert(a.order >= 1);
  Jet r(a.order - 1);
  for (int i = 0; i <= r.order; ++i) r[i] = a[i + 1];
  return r;
}

inline Jet operator+(const Jet& a, const Jet& b) {
  Jet r(a.order < b.order ? a.order : b.order);
  for (int i = 0; i <= r.order; ++i) r[i] = a[i] + b[i];
  return r;
}

inline Jet operator-(const Jet& a, const Jet& b) {
  Jet r(a.order < b.order ? a.order : b.order);
  for (int i = 0; i <= r.order; ++i) r[i] = a[i] - b[i];
  return r;
}

inline Jet operator*(double s, const Jet& a) {
  Jet r(a.order);
  for (int i = 0; i <= r.order; ++i) r[i] = s * a[i];
  return r;
}

inline Jet operator*(const Jet& a, const Jet& b) {
  Jet r(a.order < b.order ? a.order : b.order);
  for (int n = 0; n <= r.order; ++n) {
    double s = 0.0;
    for (int k = 0; k <= n; ++k) s += detail::binomials[n][k] * a[k] * b[n - k];
    r[n] = s;
  }
  return r;
}

/// Jet of 1/a; requires a.value() != 0.
inline Jet reciprocal(const Jet& a) {
  Jet r(a.order);
  r[0] = 1.0 / a[0];
  for (int n = 1; n <= r.order; ++n) {
    double s = 0.0;
    for (int k = 1; k <= n; ++k) s += detail::binomials[n][k] * a[k] * r[n - k];
    r[n] = -s * r[0];
  }
  return r;
}

}  // namespace fmpc
