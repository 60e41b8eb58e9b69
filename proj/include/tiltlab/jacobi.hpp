#pragma once

// Classical orthogonal-polynomial kernels: Jacobi polynomial recurrences and
// Gauss-Legendre quadrature rules. These are the scalar building blocks for
// the sphere grid and basis; everything here is exact-recurrence arithmetic
// with no external dependencies.

#include <cmath>
#include <vector>

#include "tiltlab/common.hpp"

namespace tiltlab {

// Jacobi polynomial P_d^{(alpha,beta)}(x) by the standard three-term
// recurrence. Works for any scalar-like ring element x (double, long double,
// or a polynomial type supporting +, *, and scalar multiplication), which is
// how the sphere operators are assembled exactly.
template <class Ring>
Ring jacobi_poly(int d, int alpha, int beta, const Ring& x, const Ring& one) {
  require(d >= 0 && alpha >= 0 && beta >= 0, "jacobi_poly: bad labels d=", d,
          " alpha=", alpha, " beta=", beta);
  if (d == 0) return one;
  const double a = alpha, b = beta;
  Ring pm1 = one;
  Ring p = x * ((a + b + 2.0) / 2.0) + one * ((a - b) / 2.0);
  for (int n = 2; n <= d; ++n) {
    const double dn = n;
    const double c1 = 2.0 * dn * (dn + a + b) * (2.0 * dn + a + b - 2.0);
    const double c2 = (2.0 * dn + a + b - 1.0) * (a * a - b * b);
    const double c3 = (2.0 * dn + a + b - 2.0) * (2.0 * dn + a + b - 1.0) *
                      (2.0 * dn + a + b);
    const double c4 = 2.0 * (dn + a - 1.0) * (dn + b - 1.0) * (2.0 * dn + a + b);
    Ring next = (x * (c3 / c1) + one * (c2 / c1)) * p - pm1 * (c4 / c1);
    pm1 = p;
    p = next;
  }
  return p;
}

inline double jacobi_poly(int d, int alpha, int beta, double x) {
  return jacobi_poly<double>(d, alpha, beta, x, 1.0);
}

// Squared weighted L2 norm of P_d^{(alpha,beta)} over [-1,1] with weight
// (1-x)^alpha (1+x)^beta.
inline double jacobi_norm2(int d, int alpha, int beta) {
  const double a = alpha, b = beta;
  double lg = (a + b + 1.0) * std::log(2.0) + std::lgamma(d + a + 1.0) +
              std::lgamma(d + b + 1.0) - std::lgamma(d + a + b + 1.0) -
              std::lgamma(d + 1.0);
  return std::exp(lg) / (2.0 * d + a + b + 1.0);
}

struct QuadratureRule {
  std::vector<double> nodes;    // ascending in (-1,1)
  std::vector<double> weights;  // positive, sum to 2
};

// Gauss-Legendre rule with n nodes: integrates polynomials of degree
// <= 2n-1 exactly over [-1,1]. Newton iteration on the Legendre recurrence.
inline QuadratureRule gauss_legendre(int n) {
  require(n >= 1, "gauss_legendre: need at least one node, got ", n);
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    // Chebyshev-based initial guess for the i-th root (descending), then
    // Newton with the recurrence-evaluated Legendre pair (P_n, P_n').
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int j = 2; j <= n; ++j) {
        double p2 = ((2.0 * j - 1.0) * x * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      double pn = (n == 0) ? 1.0 : ((n == 1) ? x : p1);
      double pn1 = (n == 1) ? 1.0 : p0;
      dp = n * (x * pn - pn1) / (x * x - 1.0);
      double dx = pn / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) {
        // One clean-up iteration after convergence, then stop.
        if (it > 0) break;
      }
    }
    rule.nodes[static_cast<std::size_t>(n - 1 - i)] = x;
    rule.weights[static_cast<std::size_t>(n - 1 - i)] =
        2.0 / ((1.0 - x * x) * dp * dp);
  }
  if (n % 2 == 1) rule.nodes[static_cast<std::size_t>(n / 2)] = 0.0;
  return rule;
}

}  // namespace tiltlab
