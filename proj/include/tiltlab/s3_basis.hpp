#pragma once

// Orthonormal harmonic basis on the 3-sphere, indexed by (k, p, q):
//   k = harmonic degree (Laplacian eigenvalue -k(k+2)), 0 <= k <= L;
//   p, q = integer frequencies along the two torus angles, |p| + |q| <= k
//          with k - |p| - |q| even.
// The basis function is
//   Phi_{k,p,q} = N * e_p(z1) * f_q(z2) * P_d^{(|q|,|p|)}(s),
// where e_p(z1) = z1^p (p >= 0) or conj(z1)^{|p|} (p < 0), f_q likewise in
// z2, s = |z1|^2 - |z2|^2, d = (k - |p| - |q|)/2, and N makes the L2 norm
// over the sphere equal to one. There are (k+1)^2 functions per degree.
// Conjugation maps (k,p,q) -> (k,-p,-q), so real fields have coefficients
// with c_{k,-p,-q} = conj(c_{k,p,q}).

#include <complex>
#include <cstddef>
#include <vector>

#include "tiltlab/common.hpp"
#include "tiltlab/jacobi.hpp"
#include "tiltlab/poly4.hpp"
#include "tiltlab/s3_grid.hpp"

namespace tiltlab {

struct BasisIndex {
  int k = 0, p = 0, q = 0;
  int d() const { return (k - std::abs(p) - std::abs(q)) / 2; }
};

inline bool basis_index_valid(int k, int p, int q) {
  int a = std::abs(p), b = std::abs(q);
  return k >= 0 && a + b <= k && (k - a - b) % 2 == 0;
}

struct S3Basis {
  int L = 0;
  std::vector<BasisIndex> idx;             // ordered by (k, then p, then q)
  std::vector<double> norm;                // L2 normalization constants
  std::vector<std::size_t> degree_offset;  // size L+2

  std::size_t size() const { return idx.size(); }
  std::size_t degree_begin(int k) const {
    return degree_offset[static_cast<std::size_t>(k)];
  }
  std::size_t degree_end(int k) const {
    return degree_offset[static_cast<std::size_t>(k) + 1];
  }

  // Position of (k,p,q) in idx; the layout within a degree is contiguous.
  std::size_t position(int k, int p, int q) const {
    require(basis_index_valid(k, p, q) && k <= L,
            "S3Basis::position: invalid basis label (", k, ",", p, ",", q, ")");
    std::size_t at = degree_begin(k);
    // Entries with first label p' < p, each contributing k - |p'| + 1 values.
    for (int pp = -k; pp < p; ++pp) at += static_cast<std::size_t>(k - std::abs(pp) + 1);
    // Within fixed p, q runs from -(k-|p|) upward in steps of 2.
    at += static_cast<std::size_t>((q + (k - std::abs(p))) / 2);
    return at;
  }
};

// Total number of basis functions through degree L: sum (k+1)^2.
inline std::size_t basis_count(int L) {
  auto n = static_cast<std::size_t>(L + 1);
  return n * (n + 1) * (2 * n + 1) / 6;
}

inline S3Basis build_basis(int L, int max_L = kDefaultMaxBandLimit) {
  require(L >= 0, "build_basis: band limit must be nonnegative, got ", L);
  require(L <= max_L, "build_basis: band limit ", L,
          " exceeds configured maximum ", max_L);
  S3Basis basis;
  basis.L = L;
  basis.idx.reserve(basis_count(L));
  basis.degree_offset.assign(static_cast<std::size_t>(L) + 2, 0);
  for (int k = 0; k <= L; ++k) {
    basis.degree_offset[static_cast<std::size_t>(k)] = basis.idx.size();
    for (int p = -k; p <= k; ++p) {
      int r = k - std::abs(p);
      for (int q = -r; q <= r; q += 2) basis.idx.push_back({k, p, q});
    }
  }
  basis.degree_offset[static_cast<std::size_t>(L) + 1] = basis.idx.size();
  require(basis.idx.size() == basis_count(L),
          "build_basis: enumeration bug, got ", basis.idx.size(), " labels");

  basis.norm.resize(basis.idx.size());
  for (std::size_t n = 0; n < basis.idx.size(); ++n) {
    const auto& ix = basis.idx[n];
    int a = std::abs(ix.p), b = std::abs(ix.q);
    double norm2 =
        kPi * kPi * std::pow(0.5, a + b) * jacobi_norm2(ix.d(), b, a);
    basis.norm[n] = 1.0 / std::sqrt(norm2);
  }
  return basis;
}

// Radial profile of a basis entry at radial coordinate s:
//   N * cos(eta)^{|p|} * sin(eta)^{|q|} * P_d^{(|q|,|p|)}(s).
inline double radial_value(const BasisIndex& ix, double norm, double cos_eta,
                           double sin_eta, double s) {
  double v = norm * jacobi_poly(ix.d(), std::abs(ix.q), std::abs(ix.p), s);
  for (int i = 0; i < std::abs(ix.p); ++i) v *= cos_eta;
  for (int i = 0; i < std::abs(ix.q); ++i) v *= sin_eta;
  return v;
}

// Radial table: rows = basis entries, columns = s-nodes of a grid.
inline std::vector<double> build_radial_table(const S3Basis& basis,
                                              const S3Grid& grid) {
  std::vector<double> table(basis.size() * static_cast<std::size_t>(grid.n_s));
  for (std::size_t n = 0; n < basis.size(); ++n)
    for (int m = 0; m < grid.n_s; ++m) {
      const auto mu = static_cast<std::size_t>(m);
      table[n * static_cast<std::size_t>(grid.n_s) + mu] =
          radial_value(basis.idx[n], basis.norm[n], grid.cos_eta[mu],
                       grid.sin_eta[mu], grid.s[mu]);
    }
  return table;
}

// Basis entry as an exact polynomial on C^2 (used for operator assembly and
// as a brute-force oracle in tests).
inline Poly4 basis_poly(const BasisIndex& ix, double norm) {
  int a = std::abs(ix.p), b = std::abs(ix.q);
  Poly4 ep = (ix.p >= 0) ? Poly4::monomial(a, 0, 0, 0)
                         : Poly4::monomial(0, a, 0, 0);
  Poly4 fq = (ix.q >= 0) ? Poly4::monomial(0, 0, b, 0)
                         : Poly4::monomial(0, 0, 0, b);
  Poly4 s = Poly4::monomial(1, 1, 0, 0) - Poly4::monomial(0, 0, 1, 1);
  Poly4 pd = jacobi_poly<Poly4>(ix.d(), b, a, s, Poly4::constant(1.0));
  return ep * fq * pd * norm;
}

}  // namespace tiltlab
