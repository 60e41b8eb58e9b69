#pragma once

// Exact polynomial algebra on C^2 in the variables (z1, conj z1, z2, conj z2).
// Restricted to the unit sphere |z1|^2 + |z2|^2 = 1 these polynomials contain
// every band-limited field, so this little ring serves two purposes:
//   * assembling the frame-derivative operators exactly (no finite
//     differences anywhere), and
//   * providing brute-force oracles for the spectral tests.
// Performance is irrelevant here; only setup paths and tests run it.

#include <array>
#include <cmath>
#include <complex>
#include <map>

#include "tiltlab/common.hpp"
#include "tiltlab/jacobi.hpp"

namespace tiltlab {

struct Poly4 {
  using Exponents = std::array<int, 4>;  // (z1, conj z1, z2, conj z2)
  std::map<Exponents, std::complex<double>> terms;

  static Poly4 constant(std::complex<double> c) {
    Poly4 p;
    if (c != 0.0) p.terms[{0, 0, 0, 0}] = c;
    return p;
  }
  static Poly4 monomial(int a, int b, int c, int d,
                        std::complex<double> coeff = 1.0) {
    Poly4 p;
    if (coeff != 0.0) p.terms[{a, b, c, d}] = coeff;
    return p;
  }

  Poly4& operator+=(const Poly4& o) {
    for (const auto& [e, c] : o.terms) {
      auto& slot = terms[e];
      slot += c;
      if (slot == 0.0) terms.erase(e);
    }
    return *this;
  }
  friend Poly4 operator+(Poly4 a, const Poly4& b) { return a += b; }
  friend Poly4 operator-(const Poly4& a, const Poly4& b) {
    return a + b * std::complex<double>(-1.0);
  }
  friend Poly4 operator*(const Poly4& a, std::complex<double> s) {
    Poly4 out;
    if (s == 0.0) return out;
    for (const auto& [e, c] : a.terms) out.terms[e] = c * s;
    return out;
  }
  friend Poly4 operator*(const Poly4& a, double s) {
    return a * std::complex<double>(s);
  }
  friend Poly4 operator*(const Poly4& a, const Poly4& b) {
    Poly4 out;
    for (const auto& [ea, ca] : a.terms)
      for (const auto& [eb, cb] : b.terms) {
        Exponents e{ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2], ea[3] + eb[3]};
        auto& slot = out.terms[e];
        slot += ca * cb;
        if (slot == 0.0) out.terms.erase(e);
      }
    return out;
  }

  // Partial derivative with respect to variable v in {0,1,2,3}.
  Poly4 derivative(int v) const {
    Poly4 out;
    for (const auto& [e, c] : terms) {
      if (e[static_cast<std::size_t>(v)] == 0) continue;
      Exponents d = e;
      int n = d[static_cast<std::size_t>(v)]--;
      out.terms[d] += c * static_cast<double>(n);
    }
    return out;
  }

  // Complex conjugate of the polynomial as a function on C^2.
  Poly4 conjugated() const {
    Poly4 out;
    for (const auto& [e, c] : terms)
      out.terms[{e[1], e[0], e[3], e[2]}] = std::conj(c);
    return out;
  }

  std::complex<double> eval(std::complex<double> z1,
                            std::complex<double> z2) const {
    std::complex<double> total = 0.0;
    std::complex<double> w1 = std::conj(z1), w2 = std::conj(z2);
    for (const auto& [e, c] : terms) {
      std::complex<double> t = c;
      for (int i = 0; i < e[0]; ++i) t *= z1;
      for (int i = 0; i < e[1]; ++i) t *= w1;
      for (int i = 0; i < e[2]; ++i) t *= z2;
      for (int i = 0; i < e[3]; ++i) t *= w2;
      total += t;
    }
    return total;
  }
};

// The three Killing vector fields of the round 3-sphere, realized as
// first-order operators on the polynomial ring. They generate the quaternion
// left-translations; the index convention is fixed by the sign tests
// Y1 x1 = -x2, Y2 x1 = -x4, Y3 x1 = -x3 and the bracket [Y1,Y2] = 2 Y3.
inline Poly4 apply_killing(int axis, const Poly4& f) {
  const std::complex<double> I(0.0, 1.0);
  Poly4 d0 = f.derivative(0);  // d/dz1
  Poly4 d1 = f.derivative(1);  // d/d conj z1
  Poly4 d2 = f.derivative(2);  // d/dz2
  Poly4 d3 = f.derivative(3);  // d/d conj z2
  Poly4 z1 = Poly4::monomial(1, 0, 0, 0);
  Poly4 z1b = Poly4::monomial(0, 1, 0, 0);
  Poly4 z2 = Poly4::monomial(0, 0, 1, 0);
  Poly4 z2b = Poly4::monomial(0, 0, 0, 1);
  switch (axis) {
    case 0:  // Y1
      return (z1 * d0 - z1b * d1 + z2 * d2 - z2b * d3) * I;
    case 1:  // Y2
      return z2b * d0 * (-I) + z1b * d2 * I + z2 * d1 * I + z1 * d3 * (-I);
    case 2:  // Y3
      return z2b * d0 * (-1.0) + z1b * d2 + z2 * d1 * (-1.0) + z1 * d3;
    default:
      fail("apply_killing: axis must be 0, 1, or 2, got ", axis);
  }
}

// Ambient coordinate x_i restricted to the sphere, as a polynomial.
inline Poly4 ambient_coordinate(int i) {
  switch (i) {
    case 1:
      return (Poly4::monomial(1, 0, 0, 0) + Poly4::monomial(0, 1, 0, 0)) * 0.5;
    case 2:
      return (Poly4::monomial(1, 0, 0, 0) - Poly4::monomial(0, 1, 0, 0)) *
             std::complex<double>(0.0, -0.5);
    case 3:
      return (Poly4::monomial(0, 0, 1, 0) + Poly4::monomial(0, 0, 0, 1)) * 0.5;
    case 4:
      return (Poly4::monomial(0, 0, 1, 0) - Poly4::monomial(0, 0, 0, 1)) *
             std::complex<double>(0.0, -0.5);
    default:
      fail("ambient_coordinate: index must be 1..4, got ", i);
  }
}

}  // namespace tiltlab
