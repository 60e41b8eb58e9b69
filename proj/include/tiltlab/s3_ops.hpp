#pragma once

// Frame-derivative operators and spectral utilities on the 3-sphere:
//   * FrameOps: the three Killing derivatives as exact block-diagonal
//     matrices in coefficient space (one dense block per harmonic degree,
//     assembled from the polynomial realization, no finite differences);
//   * L2 / iterated-derivative (Sobolev) norms;
//   * commutator / Casimir / skew-adjointness residuals used by the tests;
//   * high-order exponential damping of the top harmonic degrees;
//   * dealiased pointwise products (evaluate on a grid sized for 2L,
//     analyze, truncate back to L);
//   * conjugate-symmetric random fields for property tests.

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <random>
#include <vector>

#include "tiltlab/common.hpp"
#include "tiltlab/poly4.hpp"
#include "tiltlab/s3_basis.hpp"
#include "tiltlab/s3_grid.hpp"
#include "tiltlab/s3_transform.hpp"

namespace tiltlab {

struct FrameOps {
  int L = 0;
  // blocks[k][axis]: row-major (k+1)^2 x (k+1)^2 matrix acting on the
  // degree-k coefficient slice. Killing derivatives preserve degree.
  std::vector<std::array<std::vector<Complex>, 3>> blocks;

  void apply_in_place(int axis, const S3Basis& basis,
                      std::vector<Complex>& c) const {
    require(axis >= 0 && axis < 3, "FrameOps::apply: axis must be 0..2, got ",
            axis);
    require(c.size() == basis.size(), "FrameOps::apply: coefficient size ",
            c.size(), " does not match basis size ", basis.size());
    require(basis.L <= L, "FrameOps::apply: basis band exceeds operator band");
    std::vector<Complex> scratch;
    for (int k = 0; k <= basis.L; ++k) {
      const std::size_t b = basis.degree_begin(k), e = basis.degree_end(k);
      const std::size_t nk = e - b;
      const auto& M = blocks[static_cast<std::size_t>(k)]
                            [static_cast<std::size_t>(axis)];
      scratch.assign(nk, 0.0);
      for (std::size_t r = 0; r < nk; ++r) {
        Complex acc = 0.0;
        for (std::size_t col = 0; col < nk; ++col)
          acc += M[r * nk + col] * c[b + col];
        scratch[r] = acc;
      }
      std::copy(scratch.begin(), scratch.end(),
                c.begin() + static_cast<std::ptrdiff_t>(b));
    }
  }

  std::vector<Complex> apply(int axis, const S3Basis& basis,
                             std::vector<Complex> c) const {
    apply_in_place(axis, basis, c);
    return c;
  }
};

// Assemble the Killing-derivative matrices exactly: differentiate each basis
// entry in the polynomial ring, then project monomial-by-monomial with the
// radial Gauss rule (each monomial lands in a single frequency channel, and
// the radial integrand is a polynomial inside the rule's exactness range).
inline FrameOps build_frame_ops(const S3Basis& basis) {
  FrameOps ops;
  ops.L = basis.L;
  ops.blocks.resize(static_cast<std::size_t>(basis.L) + 1);

  const S3Grid grid = build_grid(basis.L, basis.L);
  const auto radial = build_radial_table(basis, grid);
  const int ns = grid.n_s;

  // Power tables cos(eta)^j, sin(eta)^j at the radial nodes.
  const int maxp = 2 * basis.L + 2;
  std::vector<double> cpow(static_cast<std::size_t>(maxp + 1) * ns),
      spow(static_cast<std::size_t>(maxp + 1) * ns);
  for (int m = 0; m < ns; ++m) {
    cpow[static_cast<std::size_t>(m)] = 1.0;
    spow[static_cast<std::size_t>(m)] = 1.0;
    for (int j = 1; j <= maxp; ++j) {
      cpow[static_cast<std::size_t>(j) * ns + m] =
          cpow[static_cast<std::size_t>(j - 1) * ns + m] *
          grid.cos_eta[static_cast<std::size_t>(m)];
      spow[static_cast<std::size_t>(j) * ns + m] =
          spow[static_cast<std::size_t>(j - 1) * ns + m] *
          grid.sin_eta[static_cast<std::size_t>(m)];
    }
  }

  for (int k = 0; k <= basis.L; ++k) {
    const std::size_t b = basis.degree_begin(k);
    const std::size_t nk = basis.degree_end(k) - b;
    for (auto& M : ops.blocks[static_cast<std::size_t>(k)])
      M.assign(nk * nk, 0.0);

    for (std::size_t col = 0; col < nk; ++col) {
      const Poly4 phi = basis_poly(basis.idx[b + col], basis.norm[b + col]);
      for (int axis = 0; axis < 3; ++axis) {
        const Poly4 dphi = apply_killing(axis, phi);
        auto& M = ops.blocks[static_cast<std::size_t>(k)]
                            [static_cast<std::size_t>(axis)];
        for (const auto& [e, coeff] : dphi.terms) {
          const int f1 = e[0] - e[1], f2 = e[2] - e[3];
          require(basis_index_valid(k, f1, f2),
                  "build_frame_ops: monomial outside the degree-", k,
                  " channel structure");
          const std::size_t row = basis.position(k, f1, f2) - b;
          // <monomial, Phi_row> over the sphere: angular integrals are exact
          // Kronecker deltas, the radial one is Gauss quadrature.
          double rint = 0.0;
          for (int m = 0; m < ns; ++m)
            rint += grid.s_weight[static_cast<std::size_t>(m)] *
                    cpow[static_cast<std::size_t>(e[0] + e[1]) * ns + m] *
                    spow[static_cast<std::size_t>(e[2] + e[3]) * ns + m] *
                    radial[(b + row) * static_cast<std::size_t>(ns) +
                           static_cast<std::size_t>(m)];
          M[row * nk + col] += coeff * (kPi * kPi * rint);
        }
      }
    }
  }
  return ops;
}

// ---------------------------------------------------------------------------
// Norms.

inline double l2_norm(const std::vector<Complex>& c) {
  double s = 0.0;
  for (const auto& z : c) s += std::norm(z);
  return std::sqrt(s);
}

// Iterated-derivative norm of order M:
//   ||f||_M^2 = sum over derivative strings of length <= M of ||Y^string f||^2.
// Killing derivatives preserve harmonic degree, and summing a length-m string
// over all axes telescopes to the m-th power of the degree eigenvalue k(k+2),
// so the norm is an exact degree-weighted coefficient sum.
inline double sobolev_norm(const std::vector<Complex>& c, const S3Basis& basis,
                           int M) {
  require(c.size() == basis.size(), "sobolev_norm: size mismatch");
  require(M >= 0, "sobolev_norm: order must be nonnegative, got ", M);
  require(M <= std::max(basis.L, 0) || basis.L == 0,
          "sobolev_norm: order ", M, " exceeds band limit ", basis.L);
  double total = 0.0;
  for (int k = 0; k <= basis.L; ++k) {
    double mu = static_cast<double>(k) * (k + 2);
    double w = 1.0, wsum = 1.0;
    for (int m = 1; m <= M; ++m) {
      w *= mu;
      wsum += w;
    }
    for (std::size_t n = basis.degree_begin(k); n < basis.degree_end(k); ++n)
      total += wsum * std::norm(c[n]);
  }
  return std::sqrt(total);
}

// ---------------------------------------------------------------------------
// Validation residuals (relative, scale-invariant).

inline constexpr int kLeviCivita[3][3][3] = {
    {{0, 0, 0}, {0, 0, 1}, {0, -1, 0}},
    {{0, 0, -1}, {0, 0, 0}, {1, 0, 0}},
    {{0, 1, 0}, {-1, 0, 0}, {0, 0, 0}}};

// ||([Y_i, Y_j] - 2 eps_{ij}^l Y_l) f|| / ||f||.
inline double commutator_residual(const FrameOps& ops, const S3Basis& basis,
                                  int i, int j,
                                  const std::vector<Complex>& f) {
  auto a = ops.apply(j, basis, f);
  ops.apply_in_place(i, basis, a);  // Y_i Y_j f
  auto bvec = ops.apply(i, basis, f);
  ops.apply_in_place(j, basis, bvec);  // Y_j Y_i f
  for (std::size_t n = 0; n < a.size(); ++n) a[n] -= bvec[n];
  for (int l = 0; l < 3; ++l) {
    int eps = kLeviCivita[i][j][l];
    if (eps == 0) continue;
    auto yl = ops.apply(l, basis, f);
    for (std::size_t n = 0; n < a.size(); ++n)
      a[n] -= 2.0 * static_cast<double>(eps) * yl[n];
  }
  double nf = l2_norm(f);
  require(nf > 0.0, "commutator_residual: zero field");
  return l2_norm(a) / nf;
}

// max over occupied degrees k of ||(sum_a Y_a Y_a + k(k+2)) f_k|| / ||f_k||.
inline double casimir_residual(const FrameOps& ops, const S3Basis& basis,
                               const std::vector<Complex>& f) {
  std::vector<Complex> lap(f.size(), 0.0);
  for (int axis = 0; axis < 3; ++axis) {
    auto d = ops.apply(axis, basis, f);
    ops.apply_in_place(axis, basis, d);
    for (std::size_t n = 0; n < f.size(); ++n) lap[n] += d[n];
  }
  double worst = 0.0;
  bool any = false;
  for (int k = 0; k <= basis.L; ++k) {
    double mu = static_cast<double>(k) * (k + 2);
    double num = 0.0, den = 0.0;
    for (std::size_t n = basis.degree_begin(k); n < basis.degree_end(k); ++n) {
      num += std::norm(lap[n] + mu * f[n]);
      den += std::norm(f[n]);
    }
    if (den > 0.0) {
      any = true;
      worst = std::max(worst, std::sqrt(num / den));
    }
  }
  require(any, "casimir_residual: zero field");
  return worst;
}

// Skew-adjointness in coefficient space: with an orthonormal basis the
// quadrature inner product is the coefficient inner product, so Y_a is
// skew-adjoint iff each degree block is anti-Hermitian. Returns the largest
// relative entry violation over all degrees and axes.
inline double skew_adjointness_residual(const FrameOps& ops,
                                        const S3Basis& basis) {
  double worst = 0.0;
  for (int k = 0; k <= basis.L; ++k) {
    const std::size_t nk = basis.degree_end(k) - basis.degree_begin(k);
    for (int axis = 0; axis < 3; ++axis) {
      const auto& M = ops.blocks[static_cast<std::size_t>(k)]
                                [static_cast<std::size_t>(axis)];
      double scale = 1e-300;
      for (const auto& z : M) scale = std::max(scale, std::abs(z));
      if (scale <= 1e-300) continue;
      for (std::size_t r = 0; r < nk; ++r)
        for (std::size_t c0 = 0; c0 < nk; ++c0) {
          double viol = std::abs(M[r * nk + c0] + std::conj(M[c0 * nk + r]));
          worst = std::max(worst, viol / scale);
        }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// High-order exponential damping of the top third of the spectrum. Degrees
// k <= cutoff pass through untouched; the damping strength at k = L is
// exp(-alpha).
inline void apply_spectral_filter(std::vector<Complex>& c, const S3Basis& basis,
                                  double alpha = 4.0, int order = 8,
                                  int cutoff = -1) {
  require(c.size() == basis.size(), "apply_spectral_filter: size mismatch");
  if (basis.L == 0) return;
  if (cutoff < 0) cutoff = (2 * basis.L) / 3;
  if (cutoff >= basis.L) return;
  for (int k = cutoff + 1; k <= basis.L; ++k) {
    double x = static_cast<double>(k - cutoff) / (basis.L - cutoff);
    double damp = std::exp(-alpha * std::pow(x, order));
    for (std::size_t n = basis.degree_begin(k); n < basis.degree_end(k); ++n)
      c[n] *= damp;
  }
}

// ---------------------------------------------------------------------------
// Random real band-limited field: independent unit normals per conjugate
// pair, scaled by `amplitude`, degrees restricted to [kmin, kmax].
inline std::vector<Complex> random_real_field(const S3Basis& basis,
                                              std::mt19937_64& rng,
                                              double amplitude, int kmin = 0,
                                              int kmax = -1) {
  if (kmax < 0) kmax = basis.L;
  require(kmin >= 0 && kmin <= kmax && kmax <= basis.L,
          "random_real_field: bad degree range [", kmin, ",", kmax, "]");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Complex> c(basis.size(), 0.0);
  for (std::size_t n = 0; n < basis.size(); ++n) {
    const auto& ix = basis.idx[n];
    if (ix.k < kmin || ix.k > kmax) continue;
    if (ix.p > 0 || (ix.p == 0 && ix.q > 0)) {
      Complex z(gauss(rng), gauss(rng));
      c[n] = amplitude * z;
      c[basis.position(ix.k, -ix.p, -ix.q)] = amplitude * std::conj(z);
    } else if (ix.p == 0 && ix.q == 0) {
      c[n] = amplitude * gauss(rng);
    }
  }
  return c;
}

// Largest imaginary part left by synthesizing a conjugate-symmetric vector —
// a direct check of the reality convention.
inline double reality_defect(const S3Transform& tf,
                             const std::vector<Complex>& c) {
  auto v = tf.synthesize(c);
  double worst = 0.0;
  for (const auto& z : v) worst = std::max(worst, std::abs(z.imag()));
  return worst;
}

// ---------------------------------------------------------------------------
// Dealiased pointwise algebra: band-L fields are synthesized on a grid sized
// for 2L, multiplied (or otherwise combined) there, and analyzed straight
// back to band L. Quadratic products are alias-free by construction.
struct DealiasedAlgebra {
  S3Transform wide;  // band-L basis on the double-size grid

  explicit DealiasedAlgebra(const S3Basis& basis)
      : wide(build_transform(basis, build_grid(2 * basis.L, 2 * basis.L))) {}

  std::vector<double> to_grid(const std::vector<Complex>& c) const {
    return wide.synthesize_real(c);
  }
  std::vector<Complex> to_coeffs(const std::vector<double>& v) const {
    return wide.analyze_real(v);
  }
  std::vector<Complex> product(const std::vector<Complex>& f,
                               const std::vector<Complex>& g) const {
    auto vf = to_grid(f);
    auto vg = to_grid(g);
    for (std::size_t i = 0; i < vf.size(); ++i) vf[i] *= vg[i];
    return to_coeffs(vf);
  }
};

}  // namespace tiltlab
