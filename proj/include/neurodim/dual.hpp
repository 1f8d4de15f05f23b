#pragma once

// First-order dual numbers a + b*eps with eps^2 = 0, usable as an Eigen scalar.
// Propagating a seeded tangent through the templated evaluators gives exact
// directional derivatives of the forward maps.

#include <cmath>
#include <ostream>

#include <Eigen/Core>

namespace neurodim {

struct Dual {
  double val = 0.0;
  double eps = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double v) : val(v) {}  // NOLINT: implicit lift of constants
  constexpr Dual(double v, double e) : val(v), eps(e) {}

  constexpr Dual& operator+=(const Dual& o) {
    val += o.val;
    eps += o.eps;
    return *this;
  }
  constexpr Dual& operator-=(const Dual& o) {
    val -= o.val;
    eps -= o.eps;
    return *this;
  }
  constexpr Dual& operator*=(const Dual& o) {
    eps = eps * o.val + val * o.eps;
    val *= o.val;
    return *this;
  }
  constexpr Dual& operator/=(const Dual& o) {
    // (a/b)' = (a' - (a/b) b') / b, which avoids forming b^2.
    const double q = val / o.val;
    eps = (eps - q * o.eps) / o.val;
    val = q;
    return *this;
  }
};

constexpr Dual operator+(Dual a, const Dual& b) { return a += b; }
constexpr Dual operator-(Dual a, const Dual& b) { return a -= b; }
constexpr Dual operator*(Dual a, const Dual& b) { return a *= b; }
constexpr Dual operator/(Dual a, const Dual& b) { return a /= b; }
constexpr Dual operator-(const Dual& a) { return {-a.val, -a.eps}; }
constexpr Dual operator+(const Dual& a) { return a; }

// Comparisons look at the value part only.
constexpr bool operator==(const Dual& a, const Dual& b) { return a.val == b.val; }
constexpr bool operator!=(const Dual& a, const Dual& b) { return a.val != b.val; }
constexpr bool operator<(const Dual& a, const Dual& b) { return a.val < b.val; }
constexpr bool operator>(const Dual& a, const Dual& b) { return a.val > b.val; }
constexpr bool operator<=(const Dual& a, const Dual& b) { return a.val <= b.val; }
constexpr bool operator>=(const Dual& a, const Dual& b) { return a.val >= b.val; }

inline Dual exp(const Dual& a) {
  const double e = std::exp(a.val);
  return {e, e * a.eps};
}
inline Dual log(const Dual& a) { return {std::log(a.val), a.eps / a.val}; }
inline Dual sqrt(const Dual& a) {
  const double s = std::sqrt(a.val);
  return {s, a.eps / (2.0 * s)};
}
inline Dual abs(const Dual& a) { return a.val < 0 ? -a : a; }
inline Dual abs2(const Dual& a) { return a * a; }
inline Dual conj(const Dual& a) { return a; }
inline Dual real(const Dual& a) { return a; }
inline Dual imag(const Dual&) { return 0.0; }
inline bool isfinite(const Dual& a) { return std::isfinite(a.val) && std::isfinite(a.eps); }

inline std::ostream& operator<<(std::ostream& os, const Dual& a) {
  return os << a.val << (a.eps < 0 ? " - " : " + ") << std::abs(a.eps) << "e";
}

// Uniform accessors so templated kernels can inspect values of either scalar.
inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.val; }
inline double tangent_of(double) { return 0.0; }
inline double tangent_of(const Dual& x) { return x.eps; }

}  // namespace neurodim

namespace Eigen {

template <>
struct NumTraits<neurodim::Dual> : NumTraits<double> {
  using Real = neurodim::Dual;
  using NonInteger = neurodim::Dual;
  using Nested = neurodim::Dual;
  using Literal = neurodim::Dual;

  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 2,
    AddCost = 2,
    MulCost = 3
  };
};

}  // namespace Eigen
