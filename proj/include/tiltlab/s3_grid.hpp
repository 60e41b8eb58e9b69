#pragma once

// Collocation grid on the unit 3-sphere.
//
// Coordinates: the sphere |z1|^2 + |z2|^2 = 1 in C^2 with
//   z1 = x1 + i x2 = cos(eta) e^{i xi1},  z2 = x3 + i x4 = sin(eta) e^{i xi2},
// parametrized by s = cos(2 eta) in [-1,1] and the two angles. The volume
// element is (1/4) ds dxi1 dxi2, so a Gauss-Legendre rule in s crossed with
// uniform trapezoid rules in the angles integrates band-limited integrands
// exactly: for fields of harmonic degree <= L the rule below is exact for all
// products of two such fields (angular frequencies <= 2L < n_xi, radial
// polynomial degree <= L <= 2 n_s - 1).

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "tiltlab/common.hpp"
#include "tiltlab/jacobi.hpp"

namespace tiltlab {

inline constexpr int kDefaultMaxBandLimit = 32;

struct S3Grid {
  int L = 0;      // band limit the grid is sized for
  int n_s = 0;    // Gauss-Legendre nodes in s
  int n_xi = 0;   // uniform nodes in each angle

  std::vector<double> s;         // size n_s
  std::vector<double> s_weight;  // Gauss-Legendre weights, sum 2
  std::vector<double> cos_eta;   // sqrt((1+s)/2)
  std::vector<double> sin_eta;   // sqrt((1-s)/2)
  std::vector<double> xi;        // size n_xi, 2*pi*j/n_xi

  std::size_t size() const {
    return static_cast<std::size_t>(n_s) * n_xi * n_xi;
  }
  std::size_t index(int m, int j1, int j2) const {
    return (static_cast<std::size_t>(m) * n_xi + j1) * n_xi + j2;
  }
  // Quadrature weight of node (m, j1, j2); independent of the angles.
  double weight(int m) const {
    double dxi = 2.0 * kPi / n_xi;
    return 0.25 * s_weight[static_cast<std::size_t>(m)] * dxi * dxi;
  }
  std::array<double, 4> ambient(int m, int j1, int j2) const {
    const auto mu = static_cast<std::size_t>(m);
    double c = cos_eta[mu], sn = sin_eta[mu];
    double x1 = c * std::cos(xi[static_cast<std::size_t>(j1)]);
    double x2 = c * std::sin(xi[static_cast<std::size_t>(j1)]);
    double x3 = sn * std::cos(xi[static_cast<std::size_t>(j2)]);
    double x4 = sn * std::sin(xi[static_cast<std::size_t>(j2)]);
    return {x1, x2, x3, x4};
  }
  std::complex<double> z1(int m, int j1) const {
    double a = xi[static_cast<std::size_t>(j1)];
    return {cos_eta[static_cast<std::size_t>(m)] * std::cos(a),
            cos_eta[static_cast<std::size_t>(m)] * std::sin(a)};
  }
  std::complex<double> z2(int m, int j2) const {
    double a = xi[static_cast<std::size_t>(j2)];
    return {sin_eta[static_cast<std::size_t>(m)] * std::cos(a),
            sin_eta[static_cast<std::size_t>(m)] * std::sin(a)};
  }

  // Quadrature of real or complex grid values.
  template <class T>
  T integrate(const std::vector<T>& values) const {
    require(values.size() == size(), "S3Grid::integrate: expected ", size(),
            " values, got ", values.size());
    T total{};
    for (int m = 0; m < n_s; ++m) {
      T slab{};
      for (int j1 = 0; j1 < n_xi; ++j1)
        for (int j2 = 0; j2 < n_xi; ++j2) slab += values[index(m, j1, j2)];
      total += slab * weight(m);
    }
    return total;
  }
};

inline S3Grid build_grid(int L, int max_L = kDefaultMaxBandLimit) {
  require(L >= 0, "build_grid: band limit must be nonnegative, got ", L);
  require(L <= max_L, "build_grid: band limit ", L,
          " exceeds configured maximum ", max_L);
  S3Grid g;
  g.L = L;
  g.n_s = L + 1;
  g.n_xi = 2 * L + 1;
  auto rule = gauss_legendre(g.n_s);
  g.s = rule.nodes;
  g.s_weight = rule.weights;
  g.cos_eta.resize(static_cast<std::size_t>(g.n_s));
  g.sin_eta.resize(static_cast<std::size_t>(g.n_s));
  for (int m = 0; m < g.n_s; ++m) {
    const auto mu = static_cast<std::size_t>(m);
    g.cos_eta[mu] = std::sqrt(0.5 * (1.0 + g.s[mu]));
    g.sin_eta[mu] = std::sqrt(0.5 * (1.0 - g.s[mu]));
  }
  g.xi.resize(static_cast<std::size_t>(g.n_xi));
  for (int j = 0; j < g.n_xi; ++j)
    g.xi[static_cast<std::size_t>(j)] = 2.0 * kPi * j / g.n_xi;
  return g;
}

}  // namespace tiltlab
