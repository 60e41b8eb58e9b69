#pragma once

// Forward and inverse spectral transforms between grid values and harmonic
// coefficients on the 3-sphere. The transform is semi-separable: direct DFTs
// over the two torus angles followed by a weighted radial contraction. All
// sums are plain O(N^2) loops in fixed order — exact quadrature, deterministic
// results, and fast enough at the band limits this project runs (L <= 32).
//
// Band-L coefficients are ordered with all degree-k entries contiguous and
// degrees ascending, so a band-L coefficient vector is a prefix of the
// band-L' vector for L' > L; truncation and zero-padding are array slices.

#include <complex>
#include <cstddef>
#include <vector>

#include "tiltlab/common.hpp"
#include "tiltlab/s3_basis.hpp"
#include "tiltlab/s3_grid.hpp"

namespace tiltlab {

using Complex = std::complex<double>;

struct S3Transform {
  S3Grid grid;
  S3Basis basis;
  std::vector<double> radial;    // basis.size() x grid.n_s
  std::vector<Complex> twiddle;  // exp(-2 pi i r / n_xi), r = 0..n_xi-1

  std::size_t coeff_size() const { return basis.size(); }
  std::size_t grid_size() const { return grid.size(); }

  const Complex& tw(long long f, long long j) const {
    long long r = (f * j) % grid.n_xi;
    if (r < 0) r += grid.n_xi;
    return twiddle[static_cast<std::size_t>(r)];
  }

  std::vector<Complex> analyze(const std::vector<Complex>& v) const {
    require(v.size() == grid_size(), "S3Transform::analyze: expected ",
            grid_size(), " grid values, got ", v.size());
    const int L = basis.L, ns = grid.n_s, nxi = grid.n_xi, nf = 2 * L + 1;
    // Stage 1: DFT over the first angle for every (s-node, second angle).
    std::vector<Complex> A(static_cast<std::size_t>(ns) * nf * nxi);
    for (int m = 0; m < ns; ++m)
      for (int fp = -L; fp <= L; ++fp)
        for (int j2 = 0; j2 < nxi; ++j2) {
          Complex acc = 0.0;
          for (int j1 = 0; j1 < nxi; ++j1)
            acc += v[grid.index(m, j1, j2)] * tw(fp, j1);
          A[(static_cast<std::size_t>(m) * nf + (fp + L)) * nxi + j2] = acc;
        }
    // Stage 2: DFT over the second angle.
    std::vector<Complex> B(static_cast<std::size_t>(ns) * nf * nf);
    for (int m = 0; m < ns; ++m)
      for (int fp = 0; fp < nf; ++fp)
        for (int fq = -L; fq <= L; ++fq) {
          Complex acc = 0.0;
          for (int j2 = 0; j2 < nxi; ++j2)
            acc += A[(static_cast<std::size_t>(m) * nf + fp) * nxi + j2] *
                   tw(fq, j2);
          B[(static_cast<std::size_t>(m) * nf + fp) * nf + (fq + L)] = acc;
        }
    // Radial contraction with the quadrature weights.
    const double dxi = 2.0 * kPi / nxi;
    std::vector<Complex> c(coeff_size());
    for (std::size_t n = 0; n < coeff_size(); ++n) {
      const auto& ix = basis.idx[n];
      Complex acc = 0.0;
      for (int m = 0; m < ns; ++m)
        acc += 0.25 * grid.s_weight[static_cast<std::size_t>(m)] *
               radial[n * static_cast<std::size_t>(ns) +
                      static_cast<std::size_t>(m)] *
               B[(static_cast<std::size_t>(m) * nf + (ix.p + L)) * nf +
                 (ix.q + L)];
      c[n] = acc * (dxi * dxi);
    }
    return c;
  }

  std::vector<Complex> synthesize(const std::vector<Complex>& c) const {
    require(c.size() == coeff_size(), "S3Transform::synthesize: expected ",
            coeff_size(), " coefficients, got ", c.size());
    const int L = basis.L, ns = grid.n_s, nxi = grid.n_xi, nf = 2 * L + 1;
    // Radial expansion into frequency channels.
    std::vector<Complex> V(static_cast<std::size_t>(ns) * nf * nf, 0.0);
    for (std::size_t n = 0; n < coeff_size(); ++n) {
      const auto& ix = basis.idx[n];
      for (int m = 0; m < ns; ++m)
        V[(static_cast<std::size_t>(m) * nf + (ix.p + L)) * nf + (ix.q + L)] +=
            c[n] * radial[n * static_cast<std::size_t>(ns) +
                          static_cast<std::size_t>(m)];
    }
    // Inverse DFT over the second angle, then the first.
    std::vector<Complex> W(static_cast<std::size_t>(ns) * nf * nxi);
    for (int m = 0; m < ns; ++m)
      for (int fp = 0; fp < nf; ++fp)
        for (int j2 = 0; j2 < nxi; ++j2) {
          Complex acc = 0.0;
          for (int fq = -L; fq <= L; ++fq)
            acc += V[(static_cast<std::size_t>(m) * nf + fp) * nf + (fq + L)] *
                   std::conj(tw(fq, j2));
          W[(static_cast<std::size_t>(m) * nf + fp) * nxi + j2] = acc;
        }
    std::vector<Complex> v(grid_size());
    for (int m = 0; m < ns; ++m)
      for (int j1 = 0; j1 < nxi; ++j1)
        for (int j2 = 0; j2 < nxi; ++j2) {
          Complex acc = 0.0;
          for (int fp = -L; fp <= L; ++fp)
            acc += W[(static_cast<std::size_t>(m) * nf + (fp + L)) * nxi + j2] *
                   std::conj(tw(fp, j1));
          v[grid.index(m, j1, j2)] = acc;
        }
    return v;
  }

  std::vector<Complex> analyze_real(const std::vector<double>& v) const {
    std::vector<Complex> vc(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) vc[i] = v[i];
    auto c = analyze(vc);
    // A real field has exactly conjugate-symmetric coefficients. Averaging
    // each mirror pair projects out the quadrature roundoff; left in, that
    // residue is invisible to real synthesis, so time steppers would carry
    // it forever as an undamped floor under decaying modes.
    for (std::size_t n = 0; n < c.size(); ++n) {
      const auto& ix = basis.idx[n];
      if (ix.p < 0 || (ix.p == 0 && ix.q < 0)) continue;
      if (ix.p == 0 && ix.q == 0) {
        c[n] = c[n].real();
        continue;
      }
      const auto m = basis.position(ix.k, -ix.p, -ix.q);
      const Complex avg = 0.5 * (c[n] + std::conj(c[m]));
      c[n] = avg;
      c[m] = std::conj(avg);
    }
    return c;
  }
  // Synthesis of a conjugate-symmetric coefficient vector; imaginary parts
  // are roundoff and dropped.
  std::vector<double> synthesize_real(const std::vector<Complex>& c) const {
    auto vc = synthesize(c);
    std::vector<double> v(vc.size());
    for (std::size_t i = 0; i < vc.size(); ++i) v[i] = vc[i].real();
    return v;
  }
};

inline S3Transform build_transform(const S3Basis& basis, const S3Grid& grid) {
  require(basis.L <= grid.L, "build_transform: basis band ", basis.L,
          " exceeds grid band ", grid.L);
  S3Transform t;
  t.grid = grid;
  t.basis = basis;
  t.radial = build_radial_table(basis, grid);
  t.twiddle.resize(static_cast<std::size_t>(grid.n_xi));
  for (int r = 0; r < grid.n_xi; ++r) {
    double ang = -2.0 * kPi * r / grid.n_xi;
    t.twiddle[static_cast<std::size_t>(r)] = {std::cos(ang), std::sin(ang)};
  }
  return t;
}

// Keep the first basis_count(L_to) coefficients (degrees <= L_to).
inline std::vector<Complex> truncate_coeffs(const std::vector<Complex>& c,
                                            int L_to) {
  std::size_t n = basis_count(L_to);
  require(c.size() >= n, "truncate_coeffs: vector too short");
  return {c.begin(), c.begin() + static_cast<std::ptrdiff_t>(n)};
}

// Zero-pad band-L coefficients up to band L_to >= L.
inline std::vector<Complex> embed_coeffs(const std::vector<Complex>& c,
                                         int L_to) {
  std::size_t n = basis_count(L_to);
  require(c.size() <= n, "embed_coeffs: target band too small");
  std::vector<Complex> out(n, 0.0);
  std::copy(c.begin(), c.end(), out.begin());
  return out;
}

}  // namespace tiltlab
