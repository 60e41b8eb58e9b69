#pragma once
//
// Coupled evolution of an orthonormal-frame description of an expanding
// spacetime with a tilted barotropic fluid, at low spherical band limit.
//
// Evolved variables, all band-limited fields on the unit three-sphere:
//
//   k_IJ    mean-curvature components in the frame (symmetric, 6 stored),
//   γ_IJB   frame connection coefficients (antisymmetric in the last two
//           indices, 9 stored),
//   e_I^i   components of the spatial frame along the three right-invariant
//           derivative directions Y_i (9 stored),
//   n       the lapse, determined dynamically by a heat-type equation that
//           preserves the algebraic slicing condition n = 1 + tr k̃ - tr k
//           against the homogeneous reference trajectory's mean curvature
//           tr k̃(t),
//   v_I     frame components of the renormalized fluid velocity,
//   R       the renormalized density power ρ^{2 r_s} (positive).
//
// The density itself is eliminated pointwise through ρ = R^{1/(2 r_s)} and
// ρ^{1-2 r_s} = R^{(1-2 r_s)/(2 r_s)}; the time component of the velocity is
// eliminated through v₀ = sqrt(v_C v_C + R).  Spatial derivatives act as
// e_I = e_I^i · Y_i: exact coefficient-space differentiation along the
// invariant directions, contracted with the frame pointwise on the
// double-band quadrature grid, so every nonlinear term is alias-free up to
// a single band projection per evaluated expression.  The second-derivative
// lapse term e_I e_J n reuses one shared band projection of the first
// gradient, and the same projected gradient feeds both the k equation and
// the lapse equation; this shared intermediate is what keeps the slicing
// residual n - 1 - tr k̃ + tr k exactly governed, semi-discretely, by
//
//   d/dt (slicing residual) = n·(scalar constraint residual)
//                             - n·(n - 1 - tr k̃)·(slicing residual),
//
// so on constraint-satisfying data the slicing condition is preserved to
// time-discretization order.
//
// The homogeneous reference trajectory (an anisotropic tilted attractor
// solution) supplies tr k̃(t) and its rate, and provides the injection and
// extraction maps between homogeneous states and constant fields here.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "tiltlab/background.hpp"
#include "tiltlab/common.hpp"
#include "tiltlab/euler_flrw.hpp"
#include "tiltlab/ode_rk.hpp"
#include "tiltlab/params.hpp"
#include "tiltlab/s3_basis.hpp"
#include "tiltlab/s3_ops.hpp"
#include "tiltlab/s3_transform.hpp"

namespace tiltlab {

// ---------------------------------------------------------------------------
// Storage layout
// ---------------------------------------------------------------------------

// Symmetric rank-2 storage: slot of component (I,J) in row-major
// upper-triangle order k11,k12,k13,k22,k23,k33.
inline constexpr int kSymSlot[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};
// Inverse map: the (I,J) with I <= J carried by each slot.
inline constexpr int kSymPair[6][2] = {{0, 0}, {0, 1}, {0, 2},
                                       {1, 1}, {1, 2}, {2, 2}};

// Antisymmetric-pair storage for the last two connection indices: slot of
// the unordered pair {J,B} (-1 on the diagonal) and the sign relating the
// requested order to the stored order (J,B) with J < B.
inline constexpr int kAntiSlot[3][3] = {{-1, 0, 1}, {0, -1, 2}, {1, 2, -1}};
inline constexpr double kAntiSign[3][3] = {{0.0, 1.0, 1.0},
                                           {-1.0, 0.0, 1.0},
                                           {-1.0, -1.0, 0.0}};
// The ordered pair (J,B), J < B, carried by each connection slot.
inline constexpr int kAntiPair[3][2] = {{0, 1}, {0, 2}, {1, 2}};

// Geometric part of the state: curvature, connection, frame, lapse.
// gamma[I][s] stores γ_{I,J,B} for (J,B) = kAntiPair[s]; components with
// swapped last indices are the stored value negated, diagonal ones vanish,
// so the antisymmetry γ_IJB = -γ_IBJ is enforced by construction.
struct GeometricFieldState {
  std::array<std::vector<Complex>, 6> k;
  std::array<std::array<std::vector<Complex>, 3>, 3> gamma;
  std::array<std::array<std::vector<Complex>, 3>, 3> e;  // e[I][i]
  std::vector<Complex> n;
};

// Full coupled state: geometry plus tilted fluid, tagged with its time.
// The fluid sub-state reuses the band-limited fluid container; its time
// tag is kept equal to t by every mutating operation here.
struct CoupledState {
  GeometricFieldState geom;
  FluidFieldState fluid;
  double t = 0.0;
};

// Fixed traversal order of the 29 scalar fields; the packing order of the
// flat step vector and of every per-field loop.
template <class State, class Fn>
void coupled_for_each_field(State& s, Fn&& fn) {
  for (auto& c : s.geom.k) fn(c);
  for (auto& row : s.geom.gamma)
    for (auto& c : row) fn(c);
  for (auto& row : s.geom.e)
    for (auto& c : row) fn(c);
  fn(s.geom.n);
  for (auto& c : s.fluid.v) fn(c);
  fn(s.fluid.R);
}

inline constexpr int kCoupledFieldCount = 29;

// ---------------------------------------------------------------------------
// Context
// ---------------------------------------------------------------------------

// Everything a right-hand-side evaluation needs, built once per run: the
// derived sound-speed constants, the homogeneous reference trajectory that
// supplies tr k̃(t), the harmonic basis, the exact derivative blocks, and
// the dealiasing transform.
struct CoupledContext {
  SoundSpeedParams p;
  BackgroundTrajectory traj;
  S3Basis basis;
  FrameOps ops;
  DealiasedAlgebra alg;
  double const_coeff;  // coefficient carried by the constant field 1

  CoupledContext(const SoundSpeedParams& params, int L,
                 BackgroundTrajectory trajectory)
      : p(params),
        traj(std::move(trajectory)),
        basis(build_basis(L)),
        ops(build_frame_ops(basis)),
        alg(basis),
        const_coeff(0.0) {
    require(std::abs(traj.parameters().cs2 - p.cs2) <=
                    1e-13 * (1.0 + std::abs(p.cs2)) &&
                std::abs(traj.parameters().Lambda - p.Lambda) <=
                    1e-13 * (1.0 + std::abs(p.Lambda)),
            "CoupledContext: trajectory was integrated with different "
            "parameters (cs2 ",
            traj.parameters().cs2, " vs ", p.cs2, ")");
    std::vector<double> ones(alg.wide.grid_size(), 1.0);
    const auto c = alg.to_coeffs(ones);
    require(std::abs(c[0].imag()) <= 1e-12 * std::abs(c[0].real()) &&
                c[0].real() > 0.0,
            "CoupledContext: constant-field coefficient came out non-real");
    const_coeff = c[0].real();
  }
};

inline void validate_coupled_state(const CoupledContext& ctx,
                                   const CoupledState& s) {
  const std::size_t nc = ctx.basis.size();
  int bad = 0;
  coupled_for_each_field(s, [&](const std::vector<Complex>& c) {
    if (c.size() != nc) ++bad;
  });
  require(bad == 0, "coupled state: ", bad, " of ", kCoupledFieldCount,
          " fields are not sized to the basis (", nc, " coefficients)");
}

// Spatial mean of a field (the degree-zero mode's function value).
inline double coupled_mean(const CoupledContext& ctx,
                           const std::vector<Complex>& c) {
  require(!c.empty(), "coupled_mean: empty coefficient vector");
  return c[0].real() / ctx.const_coeff;
}

// ---------------------------------------------------------------------------
// Homogeneous injection and extraction
// ---------------------------------------------------------------------------
//
// A homogeneous state populates the constant mode of exactly fourteen
// fields plus the lapse.  The nonzero connection components of the
// homogeneous family, in stored-slot terms:
//
//   γ_{1,(2,3)} = +g123     γ_{2,(1,2)} = -g221    γ_{2,(1,3)} = -g231
//   γ_{3,(1,2)} = +g312     γ_{3,(1,3)} = +g221
//
// (1-based physics labels; the last equality says γ_313 = g221, equivalently
// γ_331 = -g221).  The remaining four connection slots, the k and frame
// off-pattern components and v2, v3 vanish identically on the family.

inline CoupledState inject_background(const CoupledContext& ctx,
                                      const BackgroundState& b,
                                      double lapse_value, double t) {
  require(b.w > 0.0,
          "inject_background: the coupled fluid needs a strictly positive "
          "density power, got w = ",
          b.w);
  require(lapse_value > 0.0, "inject_background: lapse must be positive");
  const std::size_t nc = ctx.basis.size();
  CoupledState s;
  s.t = t;
  s.fluid.t = t;
  coupled_for_each_field(s,
                         [&](std::vector<Complex>& c) { c.assign(nc, 0.0); });
  const double cc = ctx.const_coeff;
  auto set = [&](std::vector<Complex>& c, double value) { c[0] = value * cc; };

  set(s.geom.k[kSymSlot[0][0]], b.k11);
  set(s.geom.k[kSymSlot[1][1]], b.k22);
  set(s.geom.k[kSymSlot[2][2]], b.k33);
  set(s.geom.k[kSymSlot[1][2]], b.k23);

  set(s.geom.gamma[0][kAntiSlot[1][2]], b.g123);
  set(s.geom.gamma[1][kAntiSlot[0][1]], -b.g221);
  set(s.geom.gamma[1][kAntiSlot[0][2]], -b.g231);
  set(s.geom.gamma[2][kAntiSlot[0][1]], b.g312);
  set(s.geom.gamma[2][kAntiSlot[0][2]], b.g221);

  set(s.geom.e[0][0], b.e11);
  set(s.geom.e[1][1], b.e22);
  set(s.geom.e[2][2], b.e33);
  set(s.geom.e[2][1], b.e32);

  set(s.geom.n, lapse_value);
  set(s.fluid.v[0], b.v1);
  const double R = std::pow(b.w, 2.0 * ctx.p.rs / ctx.p.one_minus_two_rs);
  set(s.fluid.R, R);
  return s;
}

// Injects the reference trajectory's state at time t with the exact slicing
// lapse n = 1 (the trajectory itself has tr k = tr k̃).
inline CoupledState inject_trajectory_point(const CoupledContext& ctx,
                                            double t) {
  return inject_background(ctx, ctx.traj.state_at(t), 1.0, t);
}

struct HomogeneousProjection {
  BackgroundState bg;
  double lapse = 1.0;
};

// Means of the fourteen family variables and the lapse.  Meaningful when
// the state is (close to) homogeneous and on-family; see family_defect.
inline HomogeneousProjection extract_homogeneous(const CoupledContext& ctx,
                                                 const CoupledState& s) {
  validate_coupled_state(ctx, s);
  HomogeneousProjection h;
  auto mean = [&](const std::vector<Complex>& c) {
    return coupled_mean(ctx, c);
  };
  h.bg.k11 = mean(s.geom.k[kSymSlot[0][0]]);
  h.bg.k22 = mean(s.geom.k[kSymSlot[1][1]]);
  h.bg.k33 = mean(s.geom.k[kSymSlot[2][2]]);
  h.bg.k23 = mean(s.geom.k[kSymSlot[1][2]]);
  h.bg.g123 = mean(s.geom.gamma[0][kAntiSlot[1][2]]);
  h.bg.g221 = -mean(s.geom.gamma[1][kAntiSlot[0][1]]);
  h.bg.g231 = -mean(s.geom.gamma[1][kAntiSlot[0][2]]);
  h.bg.g312 = mean(s.geom.gamma[2][kAntiSlot[0][1]]);
  h.bg.e11 = mean(s.geom.e[0][0]);
  h.bg.e22 = mean(s.geom.e[1][1]);
  h.bg.e33 = mean(s.geom.e[2][2]);
  h.bg.e32 = mean(s.geom.e[2][1]);
  h.bg.v1 = mean(s.fluid.v[0]);
  const double R = mean(s.fluid.R);
  require(R > 0.0, "extract_homogeneous: mean density power is not positive");
  h.bg.w = std::pow(R, ctx.p.one_minus_two_rs / (2.0 * ctx.p.rs));
  h.lapse = mean(s.geom.n);
  return h;
}

// Largest coefficient-space l2 norm over everything that vanishes on the
// homogeneous family: the thirteen identically-zero fields, the inhomogeneous
// parts of the populated fields, and the locked combination
// γ_{3,(1,3)} + γ_{2,(1,2)} (= g221 - g221).
inline double family_defect(const CoupledContext& ctx, const CoupledState& s) {
  validate_coupled_state(ctx, s);
  double worst = 0.0;
  auto zero_field = [&](const std::vector<Complex>& c) {
    worst = std::max(worst, l2_norm(c));
  };
  auto inhomogeneous_part = [&](const std::vector<Complex>& c) {
    std::vector<Complex> tail(c.begin() + 1, c.end());
    if (!tail.empty()) worst = std::max(worst, l2_norm(tail));
  };
  zero_field(s.geom.k[kSymSlot[0][1]]);
  zero_field(s.geom.k[kSymSlot[0][2]]);
  zero_field(s.geom.gamma[0][kAntiSlot[0][1]]);
  zero_field(s.geom.gamma[0][kAntiSlot[0][2]]);
  zero_field(s.geom.gamma[1][kAntiSlot[1][2]]);
  zero_field(s.geom.gamma[2][kAntiSlot[1][2]]);
  zero_field(s.geom.e[0][1]);
  zero_field(s.geom.e[0][2]);
  zero_field(s.geom.e[1][0]);
  zero_field(s.geom.e[1][2]);
  zero_field(s.geom.e[2][0]);
  zero_field(s.fluid.v[1]);
  zero_field(s.fluid.v[2]);
  {
    std::vector<Complex> lock = s.geom.gamma[2][kAntiSlot[0][2]];
    const auto& other = s.geom.gamma[1][kAntiSlot[0][1]];
    for (std::size_t i = 0; i < lock.size(); ++i) lock[i] += other[i];
    worst = std::max(worst, l2_norm(lock));
  }
  coupled_for_each_field(
      s, [&](const std::vector<Complex>& c) { inhomogeneous_part(c); });
  return worst;
}

// ---------------------------------------------------------------------------
// Grid evaluation: the single shared code path
// ---------------------------------------------------------------------------

namespace coupled_detail {

// Pointwise evaluation of the state, its frame derivatives, the derived
// density quantities, the time derivatives of all 29 fields, and the
// constraint and slicing residuals, on the dealiasing grid.  Shared by the
// projected right-hand side, the residual monitors, the formulation
// equivalence check and the diagnostics module.
struct RhsWork {
  std::size_t n = 0;              // grid size
  double t = 0.0;
  double trk_tilde = 0.0;         // reference mean curvature tr k̃(t)
  double dtrk_tilde = 0.0;        // its time derivative
  // Synthesized values (stored slots).
  std::array<std::vector<double>, 6> k;
  std::array<std::array<std::vector<double>, 3>, 3> g;
  std::array<std::array<std::vector<double>, 3>, 3> e;
  std::vector<double> lapse;
  std::array<std::vector<double>, 3> v;
  std::vector<double> R;
  // Invariant-direction derivatives of the fluid fields (axis-major),
  // retained for the formulation-equivalence residual.
  std::array<std::array<std::vector<double>, 3>, 3> dv;  // dv[a][i] = Y_a v_i
  std::array<std::vector<double>, 3> dR;
  // Derived pointwise quantities.
  std::vector<double> v0;
  std::vector<double> W;      // ρ^{1-2 r_s} = R^{(1-2 r_s)/(2 r_s)}
  std::vector<double> rho;    // ρ = R^{1/(2 r_s)}
  std::vector<double> det_e;  // frame determinant
  // Frame-projected lapse gradient e_I n (raw pointwise product).
  std::array<std::vector<double>, 3> en;
  // Time derivatives on the grid (k symmetrized, γ at stored slots).
  std::array<std::vector<double>, 6> kdot;
  std::array<std::array<std::vector<double>, 3>, 3> gdot;
  std::array<std::array<std::vector<double>, 3>, 3> edot;
  std::vector<double> ndot;
  std::array<std::vector<double>, 3> vdot;
  std::vector<double> Rdot;
  // Constraint residuals (value minus source) and their term-magnitude
  // scales, plus the slicing residual n - 1 - tr k̃ + tr k.
  std::vector<double> ham, ham_scale;
  std::array<std::vector<double>, 3> mom;
  std::array<std::vector<double>, 3> mom_scale;
  std::vector<double> gauge;
};

inline RhsWork evaluate(const CoupledContext& ctx, const CoupledState& s) {
  validate_coupled_state(ctx, s);
  const S3Basis& basis = ctx.basis;
  const auto& alg = ctx.alg;
  const SoundSpeedParams& p = ctx.p;

  RhsWork w;
  w.t = s.t;
  w.trk_tilde = ctx.traj.trace_k_at(s.t);
  w.dtrk_tilde = ctx.traj.trace_k_rate_at(s.t);

  const double lam = p.Lambda;
  const double cs2 = p.cs2;
  const double opc = 1.0 + cs2;           // 1 + c_s²
  const double omc = 1.0 - cs2;           // 1 - c_s²
  const double bprime = 0.5 * p.one_minus_two_rs / p.rs;
  const double w_exp = bprime;            // ρ^{1-2rs} = R^{bprime}
  const double rho_exp = 0.5 / p.rs;      // ρ = R^{1/(2rs)}

  // Values.
  for (int a = 0; a < 6; ++a) w.k[a] = alg.to_grid(s.geom.k[a]);
  for (int I = 0; I < 3; ++I)
    for (int sl = 0; sl < 3; ++sl)
      w.g[I][sl] = alg.to_grid(s.geom.gamma[I][sl]);
  for (int I = 0; I < 3; ++I)
    for (int i = 0; i < 3; ++i) w.e[I][i] = alg.to_grid(s.geom.e[I][i]);
  w.lapse = alg.to_grid(s.geom.n);
  for (int i = 0; i < 3; ++i) w.v[i] = alg.to_grid(s.fluid.v[i]);
  w.R = alg.to_grid(s.fluid.R);
  const std::size_t n = w.R.size();
  w.n = n;

  // Regime checks: positive density power and lapse, non-degenerate frame.
  {
    double min_R = w.R[0], min_lapse = w.lapse[0];
    for (std::size_t m = 0; m < n; ++m) {
      min_R = std::min(min_R, w.R[m]);
      min_lapse = std::min(min_lapse, w.lapse[m]);
    }
    if (!(min_R > 0.0))
      throw RegimeError(
          "coupled evaluate: density power lost positivity (min R = " +
          std::to_string(min_R) + ") at t = " + std::to_string(s.t));
    if (!(min_lapse > 0.0))
      throw RegimeError("coupled evaluate: lapse lost positivity (min n = " +
                        std::to_string(min_lapse) + ") at t = " +
                        std::to_string(s.t));
    w.det_e.resize(n);
    double min_det = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
      const double a00 = w.e[0][0][m], a01 = w.e[0][1][m], a02 = w.e[0][2][m];
      const double a10 = w.e[1][0][m], a11 = w.e[1][1][m], a12 = w.e[1][2][m];
      const double a20 = w.e[2][0][m], a21 = w.e[2][1][m], a22 = w.e[2][2][m];
      const double det = a00 * (a11 * a22 - a12 * a21) -
                         a01 * (a10 * a22 - a12 * a20) +
                         a02 * (a10 * a21 - a11 * a20);
      w.det_e[m] = det;
      min_det = (m == 0) ? det : std::min(min_det, det);
    }
    if (!(min_det > 0.0))
      throw RegimeError("coupled evaluate: frame degenerated (min det e = " +
                        std::to_string(min_det) + ") at t = " +
                        std::to_string(s.t));
  }

  // Invariant-direction derivatives.
  std::array<std::array<std::vector<double>, 6>, 3> dk;  // [a][slot]
  std::array<std::array<std::array<std::vector<double>, 3>, 3>, 3>
      dg;  // [a][I][slot]
  std::array<std::vector<double>, 3> dn;
  for (int a = 0; a < 3; ++a) {
    for (int sl = 0; sl < 6; ++sl)
      dk[a][sl] = alg.to_grid(ctx.ops.apply(a, basis, s.geom.k[sl]));
    for (int I = 0; I < 3; ++I)
      for (int sl = 0; sl < 3; ++sl)
        dg[a][I][sl] = alg.to_grid(ctx.ops.apply(a, basis, s.geom.gamma[I][sl]));
    dn[a] = alg.to_grid(ctx.ops.apply(a, basis, s.geom.n));
    for (int i = 0; i < 3; ++i)
      w.dv[a][i] = alg.to_grid(ctx.ops.apply(a, basis, s.fluid.v[i]));
    w.dR[a] = alg.to_grid(ctx.ops.apply(a, basis, s.fluid.R));
  }

  // Frame-projected lapse gradient, kept as the raw pointwise product: it
  // feeds the k and lapse equations directly and, once band-projected, the
  // second-derivative intermediate below.
  for (int I = 0; I < 3; ++I) {
    w.en[I].resize(n);
    for (std::size_t m = 0; m < n; ++m)
      w.en[I][m] = w.e[I][0][m] * dn[0][m] + w.e[I][1][m] * dn[1][m] +
                   w.e[I][2][m] * dn[2][m];
  }

  // Second-derivative intermediate: one band projection of each gradient
  // component, differentiated exactly, so that e_I e_J n and its trace in
  // the lapse equation are formed from identical grids.
  std::array<std::array<std::vector<double>, 3>, 3> dEn;  // [a][J]
  for (int J = 0; J < 3; ++J) {
    const auto cN = alg.to_coeffs(w.en[J]);
    for (int a = 0; a < 3; ++a)
      dEn[a][J] = alg.to_grid(ctx.ops.apply(a, basis, cN));
  }

  // Allocate outputs.
  auto zero_grid = [&]() { return std::vector<double>(n, 0.0); };
  for (int sl = 0; sl < 6; ++sl) w.kdot[sl] = zero_grid();
  for (int I = 0; I < 3; ++I)
    for (int sl = 0; sl < 3; ++sl) w.gdot[I][sl] = zero_grid();
  for (int I = 0; I < 3; ++I)
    for (int i = 0; i < 3; ++i) w.edot[I][i] = zero_grid();
  w.ndot = zero_grid();
  for (int i = 0; i < 3; ++i) w.vdot[i] = zero_grid();
  w.Rdot = zero_grid();
  w.v0 = zero_grid();
  w.W = zero_grid();
  w.rho = zero_grid();
  w.ham = zero_grid();
  w.ham_scale = zero_grid();
  for (int i = 0; i < 3; ++i) {
    w.mom[i] = zero_grid();
    w.mom_scale[i] = zero_grid();
  }
  w.gauge = zero_grid();

  // Main pointwise pass.
  for (std::size_t m = 0; m < n; ++m) {
    double kk[3][3], ee[3][3], gg[3][3][3];
    for (int I = 0; I < 3; ++I)
      for (int J = 0; J < 3; ++J) kk[I][J] = w.k[kSymSlot[I][J]][m];
    for (int I = 0; I < 3; ++I)
      for (int i = 0; i < 3; ++i) ee[I][i] = w.e[I][i][m];
    for (int I = 0; I < 3; ++I)
      for (int J = 0; J < 3; ++J)
        for (int B = 0; B < 3; ++B)
          gg[I][J][B] =
              (J == B) ? 0.0 : kAntiSign[J][B] * w.g[I][kAntiSlot[J][B]][m];
    const double nn = w.lapse[m];
    const double vv[3] = {w.v[0][m], w.v[1][m], w.v[2][m]};
    const double RR = w.R[m];

    double dkg[3][3][3];  // [a][I][J]
    for (int a = 0; a < 3; ++a)
      for (int I = 0; I < 3; ++I)
        for (int J = 0; J < 3; ++J) dkg[a][I][J] = dk[a][kSymSlot[I][J]][m];
    double dgg[3][3][3][3];  // [a][I][J][B]
    for (int a = 0; a < 3; ++a)
      for (int I = 0; I < 3; ++I)
        for (int J = 0; J < 3; ++J)
          for (int B = 0; B < 3; ++B)
            dgg[a][I][J][B] = (J == B) ? 0.0
                                       : kAntiSign[J][B] *
                                             dg[a][I][kAntiSlot[J][B]][m];
    const double dng[3] = {dn[0][m], dn[1][m], dn[2][m]};
    double dvg[3][3];
    for (int a = 0; a < 3; ++a)
      for (int i = 0; i < 3; ++i) dvg[a][i] = w.dv[a][i][m];
    const double dRg[3] = {w.dR[0][m], w.dR[1][m], w.dR[2][m]};
    const double enI[3] = {w.en[0][m], w.en[1][m], w.en[2][m]};
    (void)dng;

    // Frame derivatives.
    double ek[3][3][3];  // ek[C][I][J] = e_C k_IJ
    for (int C = 0; C < 3; ++C)
      for (int I = 0; I < 3; ++I)
        for (int J = 0; J < 3; ++J)
          ek[C][I][J] = ee[C][0] * dkg[0][I][J] + ee[C][1] * dkg[1][I][J] +
                        ee[C][2] * dkg[2][I][J];
    double egam[3][3][3][3];  // egam[C][I][J][B] = e_C γ_IJB
    for (int C = 0; C < 3; ++C)
      for (int I = 0; I < 3; ++I)
        for (int J = 0; J < 3; ++J)
          for (int B = 0; B < 3; ++B)
            egam[C][I][J][B] = ee[C][0] * dgg[0][I][J][B] +
                               ee[C][1] * dgg[1][I][J][B] +
                               ee[C][2] * dgg[2][I][J][B];
    double ev[3][3];  // ev[C][i] = e_C v_i
    for (int C = 0; C < 3; ++C)
      for (int i = 0; i < 3; ++i)
        ev[C][i] = ee[C][0] * dvg[0][i] + ee[C][1] * dvg[1][i] +
                   ee[C][2] * dvg[2][i];
    double eRf[3];  // e_C R
    for (int C = 0; C < 3; ++C)
      eRf[C] = ee[C][0] * dRg[0] + ee[C][1] * dRg[1] + ee[C][2] * dRg[2];
    double d2n[3][3];  // e_I e_J n through the shared projected gradient
    for (int I = 0; I < 3; ++I)
      for (int J = 0; J < 3; ++J)
        d2n[I][J] = ee[I][0] * dEn[0][J][m] + ee[I][1] * dEn[1][J][m] +
                    ee[I][2] * dEn[2][J][m];

    // Scalars.
    const double trk = kk[0][0] + kk[1][1] + kk[2][2];
    const double q = nn - 1.0 - w.trk_tilde;
    const double v0sq = vv[0] * vv[0] + vv[1] * vv[1] + vv[2] * vv[2] + RR;
    const double v0 = std::sqrt(v0sq);
    const double Wp = std::pow(RR, w_exp);
    const double rho = std::pow(RR, rho_exp);
    w.v0[m] = v0;
    w.W[m] = Wp;
    w.rho[m] = rho;

    double gtr1[3], gtr2[3];  // γ_CDC and γ_CCD
    for (int D = 0; D < 3; ++D) {
      gtr1[D] = gg[0][D][0] + gg[1][D][1] + gg[2][D][2];
      gtr2[D] = gg[0][0][D] + gg[1][1][D] + gg[2][2][D];
    }
    double kquad = 0.0;
    for (int C = 0; C < 3; ++C)
      for (int D = 0; D < 3; ++D) kquad += kk[C][D] * kk[C][D];
    double egdiv = 0.0;  // e_C γ_DDC
    for (int C = 0; C < 3; ++C)
      for (int D = 0; D < 3; ++D) egdiv += egam[C][D][D][C];
    double gq[3];  // γ_CDI v_C v_D
    for (int I = 0; I < 3; ++I) {
      double acc = 0.0;
      for (int C = 0; C < 3; ++C)
        for (int D = 0; D < 3; ++D) acc += gg[C][D][I] * vv[C] * vv[D];
      gq[I] = acc;
    }

    // Curvature equation, symmetrized.
    double F[3][3];
    for (int I = 0; I < 3; ++I)
      for (int J = 0; J < 3; ++J) {
        double eg_IJ = 0.0;   // e_C γ_IJC
        double eIg = 0.0;     // e_I γ_CJC
        double gq_n = 0.0;    // γ_IJC e_C n
        double quad1 = 0.0;   // γ_CID γ_DJC
        double quad2 = 0.0;   // γ_IJD γ_CCD
        for (int C = 0; C < 3; ++C) {
          eg_IJ += egam[C][I][J][C];
          eIg += egam[I][C][J][C];
          gq_n += gg[I][J][C] * enI[C];
          quad2 += gg[I][J][C] * gtr2[C];
          for (int D = 0; D < 3; ++D) quad1 += gg[C][I][D] * gg[D][J][C];
        }
        double val = -nn * q * kk[I][J] - d2n[I][J] + nn * (eg_IJ - eIg) +
                     gq_n - nn * (quad1 + quad2) -
                     nn * opc * Wp * vv[I] * vv[J];
        if (I == J) val -= nn * (lam + 0.5 * omc * rho);
        F[I][J] = val;
      }
    for (int sl = 0; sl < 6; ++sl) {
      const int I = kSymPair[sl][0], J = kSymPair[sl][1];
      w.kdot[sl][m] = 0.5 * (F[I][J] + F[J][I]);
    }

    // Connection equation at the stored slots (J < B); the right-hand side
    // is exactly antisymmetric in (J,B) for symmetric k, so the stored
    // components carry the full content.
    for (int I = 0; I < 3; ++I)
      for (int sl = 0; sl < 3; ++sl) {
        const int J = kAntiPair[sl][0], B = kAntiPair[sl][1];
        double t1 = 0.0, t3 = 0.0, t4 = 0.0, t5 = 0.0, t6 = 0.0;
        for (int C = 0; C < 3; ++C) {
          t1 += kk[I][C] * gg[C][J][B];
          t3 += kk[I][C] * gg[B][J][C];
          t4 += kk[C][J] * gg[B][I][C];
          t5 += kk[I][C] * gg[J][B][C];
          t6 += kk[B][C] * gg[J][I][C];
        }
        const double t2 = ek[B][I][J] - ek[J][B][I];
        w.gdot[I][sl][m] = nn * (t1 + t2 - t3 - t4 + t5 + t6) +
                           enI[B] * kk[J][I] - enI[J] * kk[B][I];
      }

    // Frame transport.
    for (int I = 0; I < 3; ++I)
      for (int i = 0; i < 3; ++i)
        w.edot[I][i][m] = nn * (kk[I][0] * ee[0][i] + kk[I][1] * ee[1][i] +
                                kk[I][2] * ee[2][i]);

    // Lapse equation.  The fluid sources carry the scalar-constraint
    // substitution that closes the slicing condition: with them, the
    // semi-discrete slicing residual obeys
    // d/dt G = n·(scalar residual) - n·(n-1-tr k̃)·G exactly.
    {
      const double lap = d2n[0][0] + d2n[1][1] + d2n[2][2];
      const double gden =
          gtr2[0] * enI[0] + gtr2[1] * enI[1] + gtr2[2] * enI[2];
      w.ndot[m] = lap - gden - nn * kquad + nn * lam + w.dtrk_tilde -
                  opc * nn * Wp * v0sq + 0.5 * omc * nn * rho;
    }

    // Fluid velocity.
    for (int I = 0; I < 3; ++I) {
      double adv = 0.0, kcv = 0.0;
      for (int C = 0; C < 3; ++C) {
        adv += vv[C] * ev[C][I];
        kcv += kk[C][I] * vv[C];
      }
      w.vdot[I][m] =
          (nn / v0) * (adv + 0.5 * eRf[I] + gq[I]) + nn * kcv + enI[I] * v0;
    }

    // Density power, with v0 eliminated through the normalization.
    {
      double advR = 0.0, divv = 0.0, flux = 0.0, vgq = 0.0, gv1 = 0.0,
             vvk = 0.0;
      for (int C = 0; C < 3; ++C) {
        advR += vv[C] * eRf[C];
        divv += ev[C][C];
        gv1 += gtr1[C] * vv[C];
        vgq += vv[C] * gq[C];
        for (int I = 0; I < 3; ++I) {
          flux += vv[I] * vv[C] * ev[C][I];
          vvk += vv[C] * vv[I] * kk[C][I];
        }
      }
      const double den = bprime + 0.5 * RR / v0sq;
      const double big = (bprime - 0.5 * RR / v0sq) * advR / v0 -
                         (RR / v0sq) * flux / v0 + (RR / v0) * divv -
                         (RR / (v0sq * v0)) * vgq + (RR / v0) * gv1 +
                         RR * trk - RR * vvk / v0sq;
      w.Rdot[m] = nn * big / den;
    }

    // Constraint residuals (value minus source) and their scales.
    {
      double gquad1 = 0.0;  // γ_CDE γ_EDC
      for (int C = 0; C < 3; ++C)
        for (int D = 0; D < 3; ++D)
          for (int E = 0; E < 3; ++E) gquad1 += gg[C][D][E] * gg[E][D][C];
      const double gquad2 =
          gtr2[0] * gtr2[0] + gtr2[1] * gtr2[1] + gtr2[2] * gtr2[2];
      const double fluid_h = 2.0 * opc * Wp * v0sq;
      w.ham[m] = 2.0 * egdiv - gquad1 - gquad2 - kquad + q * q - 2.0 * lam -
                 fluid_h + 2.0 * cs2 * rho;
      w.ham_scale[m] = 2.0 * std::abs(egdiv) + std::abs(gquad1) +
                       std::abs(gquad2) + kquad + q * q + 2.0 * lam + fluid_h +
                       2.0 * cs2 * rho;
      for (int I = 0; I < 3; ++I) {
        double dk_div = 0.0, kg1 = 0.0, kg2 = 0.0;
        for (int C = 0; C < 3; ++C) {
          dk_div += ek[C][C][I];
          kg1 += kk[I][C] * gtr1[C];
          for (int D = 0; D < 3; ++D) kg2 += kk[C][D] * gg[C][I][D];
        }
        const double fluid_m = opc * Wp * v0 * vv[I];
        w.mom[I][m] = dk_div + enI[I] + kg1 - kg2 + fluid_m;
        w.mom_scale[I][m] = std::abs(dk_div) + std::abs(enI[I]) +
                            std::abs(kg1) + std::abs(kg2) + std::abs(fluid_m);
      }
      w.gauge[m] = q + trk;
    }
  }
  return w;
}

}  // namespace coupled_detail

// ---------------------------------------------------------------------------
// Right-hand side and residual monitors
// ---------------------------------------------------------------------------

// Band projection of the pointwise time derivatives of all 29 fields.
// The returned object carries the derivative in each field slot and the
// evaluation time in t.
inline CoupledState rhs_coupled(const CoupledContext& ctx,
                                const CoupledState& s) {
  const auto w = coupled_detail::evaluate(ctx, s);
  CoupledState d;
  d.t = s.t;
  d.fluid.t = s.t;
  for (int sl = 0; sl < 6; ++sl) d.geom.k[sl] = ctx.alg.to_coeffs(w.kdot[sl]);
  for (int I = 0; I < 3; ++I)
    for (int sl = 0; sl < 3; ++sl)
      d.geom.gamma[I][sl] = ctx.alg.to_coeffs(w.gdot[I][sl]);
  for (int I = 0; I < 3; ++I)
    for (int i = 0; i < 3; ++i)
      d.geom.e[I][i] = ctx.alg.to_coeffs(w.edot[I][i]);
  d.geom.n = ctx.alg.to_coeffs(w.ndot);
  for (int i = 0; i < 3; ++i) d.fluid.v[i] = ctx.alg.to_coeffs(w.vdot[i]);
  d.fluid.R = ctx.alg.to_coeffs(w.Rdot);
  return d;
}

// Scalar and vector constraint residuals as band-limited fields plus
// summary numbers: coefficient-space l2 norms, grid sup norms, and the sup
// of the pointwise term-magnitude scales for relative measures.
struct ConstraintResiduals {
  std::vector<Complex> ham;
  std::array<std::vector<Complex>, 3> mom;
  double ham_l2 = 0.0, mom_l2 = 0.0;
  double ham_sup = 0.0, mom_sup = 0.0;
  double ham_scale_sup = 0.0, mom_scale_sup = 0.0;
};

inline ConstraintResiduals constraint_residuals(const CoupledContext& ctx,
                                                const CoupledState& s) {
  const auto w = coupled_detail::evaluate(ctx, s);
  ConstraintResiduals r;
  r.ham = ctx.alg.to_coeffs(w.ham);
  r.ham_l2 = l2_norm(r.ham);
  for (int I = 0; I < 3; ++I) {
    r.mom[I] = ctx.alg.to_coeffs(w.mom[I]);
    r.mom_l2 = std::max(r.mom_l2, l2_norm(r.mom[I]));
  }
  for (std::size_t m = 0; m < w.n; ++m) {
    r.ham_sup = std::max(r.ham_sup, std::abs(w.ham[m]));
    r.ham_scale_sup = std::max(r.ham_scale_sup, w.ham_scale[m]);
    for (int I = 0; I < 3; ++I) {
      r.mom_sup = std::max(r.mom_sup, std::abs(w.mom[I][m]));
      r.mom_scale_sup = std::max(r.mom_scale_sup, w.mom_scale[I][m]);
    }
  }
  return r;
}

// Slicing residual n - 1 - tr k̃(t) + tr k as a band-limited field.  This is
// linear in the state, so it is formed exactly in coefficient space.
struct GaugeResidual {
  std::vector<Complex> field;
  double l2 = 0.0;
  double sup = 0.0;
};

inline GaugeResidual gauge_residual(const CoupledContext& ctx,
                                    const CoupledState& s) {
  validate_coupled_state(ctx, s);
  GaugeResidual g;
  g.field = s.geom.n;
  const auto& k00 = s.geom.k[kSymSlot[0][0]];
  const auto& k11 = s.geom.k[kSymSlot[1][1]];
  const auto& k22 = s.geom.k[kSymSlot[2][2]];
  for (std::size_t i = 0; i < g.field.size(); ++i)
    g.field[i] += k00[i] + k11[i] + k22[i];
  g.field[0] -= (1.0 + ctx.traj.trace_k_at(s.t)) * ctx.const_coeff;
  g.l2 = l2_norm(g.field);
  const auto grid = ctx.alg.to_grid(g.field);
  for (double x : grid) g.sup = std::max(g.sup, std::abs(x));
  return g;
}

// Residual of the redundant first-order equation for the eliminated time
// component v0 = sqrt(v_C v_C + R), evaluated pointwise with the raw grid
// time derivatives and normalized per node by the sum of term magnitudes.
// Zero (to roundoff) certifies that the eliminated-density formulation and
// the direct v0 transport equation agree on this state.
inline double direct_v0_equation_residual(const CoupledContext& ctx,
                                          const CoupledState& s) {
  const auto w = coupled_detail::evaluate(ctx, s);
  double worst = 0.0;
  for (std::size_t m = 0; m < w.n; ++m) {
    double kk[3][3], ee[3][3];
    for (int I = 0; I < 3; ++I)
      for (int J = 0; J < 3; ++J) kk[I][J] = w.k[kSymSlot[I][J]][m];
    for (int I = 0; I < 3; ++I)
      for (int i = 0; i < 3; ++i) ee[I][i] = w.e[I][i][m];
    const double vv[3] = {w.v[0][m], w.v[1][m], w.v[2][m]};
    const double nn = w.lapse[m];
    const double v0 = w.v0[m];
    double ev[3][3], eRf[3];
    for (int C = 0; C < 3; ++C) {
      eRf[C] = ee[C][0] * w.dR[0][m] + ee[C][1] * w.dR[1][m] +
               ee[C][2] * w.dR[2][m];
      for (int i = 0; i < 3; ++i)
        ev[C][i] = ee[C][0] * w.dv[0][i][m] + ee[C][1] * w.dv[1][i][m] +
                   ee[C][2] * w.dv[2][i][m];
    }
    const double vdots[3] = {w.vdot[0][m], w.vdot[1][m], w.vdot[2][m]};
    const double v0dot =
        (vv[0] * vdots[0] + vv[1] * vdots[1] + vv[2] * vdots[2] +
         0.5 * w.Rdot[m]) /
        v0;
    double t2 = 0.0, t3 = 0.0, t5 = 0.0;
    for (int C = 0; C < 3; ++C) {
      const double ev0_C =
          (vv[0] * ev[C][0] + vv[1] * ev[C][1] + vv[2] * ev[C][2] +
           0.5 * eRf[C]) /
          v0;
      t2 += vv[C] * ev0_C;
      t5 += w.en[C][m] * vv[C];
      for (int D = 0; D < 3; ++D) t3 += kk[C][D] * vv[C] * vv[D];
    }
    const double t1 = -v0 * v0dot / nn;
    const double t4 = 0.5 * w.Rdot[m] / nn;
    t5 *= v0 / nn;
    const double res = t1 + t2 + t3 + t4 + t5;
    const double scale = std::abs(t1) + std::abs(t2) + std::abs(t3) +
                         std::abs(t4) + std::abs(t5);
    if (scale > 0.0) worst = std::max(worst, std::abs(res) / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Time stepping
// ---------------------------------------------------------------------------

// Interleaved flat packing of all 29 coefficient fields.
inline void pack_coupled(const CoupledState& s, std::vector<double>& y) {
  std::size_t total = 0;
  coupled_for_each_field(
      s, [&](const std::vector<Complex>& c) { total += 2 * c.size(); });
  y.resize(total);
  std::size_t at = 0;
  coupled_for_each_field(s, [&](const std::vector<Complex>& c) {
    for (const Complex& z : c) {
      y[at++] = z.real();
      y[at++] = z.imag();
    }
  });
}

inline void unpack_coupled(const std::vector<double>& y, CoupledState& s) {
  std::size_t at = 0;
  coupled_for_each_field(s, [&](std::vector<Complex>& c) {
    for (Complex& z : c) {
      z = Complex(y[at], y[at + 1]);
      at += 2;
    }
  });
}

inline bool coupled_state_is_finite(const CoupledState& s) {
  bool ok = true;
  coupled_for_each_field(s, [&](const std::vector<Complex>& c) {
    for (const Complex& z : c)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) ok = false;
  });
  return ok;
}

// Largest coefficient-space field norm; the blow-up monitor's yardstick.
inline double max_field_norm(const CoupledState& s) {
  double worst = 0.0;
  coupled_for_each_field(s, [&](const std::vector<Complex>& c) {
    worst = std::max(worst, l2_norm(c));
  });
  return worst;
}

// Explicit-step stability rates estimated from the current state: the
// heat-operator rate of the lapse equation (quadratic in the band limit)
// and a light-cone transport rate (linear in the band limit).  An explicit
// fourth-order step must keep dt * total() inside its stability region.
struct StabilityRates {
  double parabolic = 0.0;
  double advective = 0.0;
  double total() const { return parabolic + advective; }
};

inline StabilityRates stability_rates(const CoupledContext& ctx,
                                      const CoupledState& s) {
  validate_coupled_state(ctx, s);
  const int L = ctx.basis.L;
  double frame_sq_max = 0.0;  // max over nodes of sum_{C,i} (e_C^i)^2
  double row_max = 0.0;       // max over nodes and C of |e_C|
  double lapse_max = 0.0;
  std::array<std::array<std::vector<double>, 3>, 3> eg;
  for (int I = 0; I < 3; ++I)
    for (int i = 0; i < 3; ++i) eg[I][i] = ctx.alg.to_grid(s.geom.e[I][i]);
  const auto ng = ctx.alg.to_grid(s.geom.n);
  const std::size_t n = ng.size();
  for (std::size_t m = 0; m < n; ++m) {
    double total_sq = 0.0;
    for (int I = 0; I < 3; ++I) {
      double row_sq = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double x = eg[I][i][m];
        row_sq += x * x;
      }
      total_sq += row_sq;
      row_max = std::max(row_max, std::sqrt(row_sq));
    }
    frame_sq_max = std::max(frame_sq_max, total_sq);
    lapse_max = std::max(lapse_max, std::abs(ng[m]));
  }
  StabilityRates r;
  const double band_sq = static_cast<double>(L * (L + 2));
  r.parabolic = band_sq * frame_sq_max * std::max(lapse_max, 1.0);
  r.advective = 3.0 * std::sqrt(band_sq) * row_max * std::max(lapse_max, 1.0);
  return r;
}

struct CoupledStepConfig {
  double dt = 0.0;
  bool filter = false;
  double filter_alpha = 4.0;
  int filter_order = 8;
  double stability_limit = 2.5;  // bound on dt * estimated stiffness rate
};

// One explicit fourth-order step of the full coupled system.
inline void step_coupled(const CoupledContext& ctx, CoupledState& s,
                         const CoupledStepConfig& cfg) {
  require(cfg.dt > 0.0, "step_coupled: dt must be positive, got ", cfg.dt);
  const StabilityRates rates = stability_rates(ctx, s);
  require(cfg.dt * rates.total() <= cfg.stability_limit,
          "step_coupled: dt = ", cfg.dt,
          " exceeds the explicit stability bound: dt * rate = ",
          cfg.dt * rates.total(), " (parabolic rate ", rates.parabolic,
          ", transport rate ", rates.advective, ", limit ",
          cfg.stability_limit, ")");

  std::vector<double> y;
  pack_coupled(s, y);
  CoupledState scratch = s;
  auto rhs = [&](double t, const std::vector<double>& yy,
                 std::vector<double>& dy) {
    unpack_coupled(yy, scratch);
    scratch.t = t;
    scratch.fluid.t = t;
    const CoupledState d = rhs_coupled(ctx, scratch);
    pack_coupled(d, dy);
  };
  integrate_rk4<double>(rhs, y, s.t, s.t + cfg.dt, 1);
  unpack_coupled(y, s);
  s.t += cfg.dt;
  s.fluid.t = s.t;
  if (cfg.filter && ctx.basis.L > 0) {
    coupled_for_each_field(s, [&](std::vector<Complex>& c) {
      apply_spectral_filter(c, ctx.basis, cfg.filter_alpha, cfg.filter_order);
    });
  }
}

// ---------------------------------------------------------------------------
// Supervised evolution
// ---------------------------------------------------------------------------

enum class CoupledRunStatus {
  completed,     // reached t_end
  regime_exit,   // density, lapse, or frame left the admissible regime
  nan_detected,  // non-finite value appeared
  blow_up        // a field norm exceeded the blow-up factor times the
                 // initial largest field norm
};

struct CoupledEvolveConfig {
  double t_end = 0.0;
  double dt = 0.0;
  long output_every = 1;  // callback cadence in accepted steps
  bool filter = false;
  double filter_alpha = 4.0;
  int filter_order = 8;
  double stability_limit = 2.5;
  double blow_up_factor = 1e3;
};

struct CoupledEvolveResult {
  CoupledState state;
  CoupledRunStatus status = CoupledRunStatus::completed;
  long n_steps = 0;
};

// Steps the state to cfg.t_end with a uniform dt chosen as close to cfg.dt
// as an integer number of steps allows, watching for regime exits, NaNs and
// norm blow-up; on any abnormal exit the last good state is returned.  The
// callback observes the initial state, every output_every-th step, and the
// final state.
inline CoupledEvolveResult evolve_coupled(
    const CoupledContext& ctx, CoupledState s, const CoupledEvolveConfig& cfg,
    const std::function<void(const CoupledState&)>& callback = {}) {
  require(cfg.t_end > s.t, "evolve_coupled: t_end = ", cfg.t_end,
          " is not ahead of the state time ", s.t);
  require(cfg.dt > 0.0, "evolve_coupled: dt must be positive");
  require(cfg.output_every > 0, "evolve_coupled: output cadence must be >= 1");

  const double span = cfg.t_end - s.t;
  const double raw = span / cfg.dt;
  long n_steps = std::lround(raw);
  if (n_steps < 1 || std::abs(n_steps - raw) > 1e-9 * std::max(1.0, raw))
    n_steps = static_cast<long>(std::ceil(raw - 1e-12));
  const double t0 = s.t;
  const double dt_eff = span / static_cast<double>(n_steps);

  CoupledStepConfig step_cfg;
  step_cfg.dt = dt_eff;
  step_cfg.filter = cfg.filter;
  step_cfg.filter_alpha = cfg.filter_alpha;
  step_cfg.filter_order = cfg.filter_order;
  step_cfg.stability_limit = cfg.stability_limit;

  const double reference_norm = std::max(max_field_norm(s), 1e-12);

  CoupledEvolveResult out;
  out.state = s;
  if (callback) callback(s);
  for (long k = 0; k < n_steps; ++k) {
    try {
      step_coupled(ctx, s, step_cfg);
    } catch (const RegimeError&) {
      out.status = CoupledRunStatus::regime_exit;
      return out;
    }
    s.t = t0 + static_cast<double>(k + 1) * dt_eff;
    s.fluid.t = s.t;
    if (!coupled_state_is_finite(s)) {
      out.status = CoupledRunStatus::nan_detected;
      return out;
    }
    if (max_field_norm(s) > cfg.blow_up_factor * reference_norm) {
      out.status = CoupledRunStatus::blow_up;
      return out;
    }
    out.state = s;
    out.n_steps = k + 1;
    if (callback && ((k + 1) % cfg.output_every == 0 || k + 1 == n_steps))
      callback(s);
  }
  out.status = CoupledRunStatus::completed;
  return out;
}

// ---------------------------------------------------------------------------
// Initial data
// ---------------------------------------------------------------------------

enum class CoupledDataKind {
  // Perturb the fourteen homogeneous variables multiplicatively, restore
  // the homogeneous constraints by the Newton projection, set the lapse
  // from the slicing condition.  Constraints hold to solver tolerance.
  homogeneous_constraint_solved,
  // Add band-limited random fields (degrees >= 1) to every variable with
  // per-field magnitudes tied to the background, and perturb the lapse as
  // well.  Constraints are violated at the perturbation amplitude; they are
  // measured and reported, not solved.
  inhomogeneous_free
};

struct CoupledInitialData {
  CoupledState state;
  CoupledDataKind kind = CoupledDataKind::homogeneous_constraint_solved;
  double amplitude = 0.0;
  std::uint64_t seed = 0;
  bool constraint_solved = false;
  // Homogeneous kind: residuals and iteration count of the Newton solve.
  double c0 = 0.0, c1 = 0.0;
  int newton_iterations = 0;
  // Both kinds: measured field residuals of the constructed state.
  double ham_sup = 0.0, mom_sup = 0.0, gauge_sup = 0.0;
};

inline CoupledInitialData build_initial_data(const CoupledContext& ctx,
                                             CoupledDataKind kind, double T,
                                             double amplitude,
                                             std::uint64_t seed) {
  require(amplitude >= 0.0 && amplitude <= 0.5,
          "build_initial_data: amplitude must lie in [0, 0.5], got ",
          amplitude);
  CoupledInitialData out;
  out.kind = kind;
  out.amplitude = amplitude;
  out.seed = seed;

  const BackgroundState base = ctx.traj.state_at(T);
  std::mt19937_64 rng(seed);

  if (kind == CoupledDataKind::homogeneous_constraint_solved) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto a = base.to_array();
    for (double& x : a) x *= 1.0 + amplitude * u(rng);
    const auto sol =
        solve_constraints_at(BackgroundState::from_array(a), ctx.p);
    const double trk = sol.state.k11 + sol.state.k22 + sol.state.k33;
    const double lapse = 1.0 + ctx.traj.trace_k_at(T) - trk;
    out.state = inject_background(ctx, sol.state, lapse, T);
    out.constraint_solved = true;
    out.c0 = sol.c0;
    out.c1 = sol.c1;
    out.newton_iterations = sol.iterations;
  } else {
    require(ctx.basis.L >= 1,
            "build_initial_data: inhomogeneous data needs band limit >= 1");
    out.state = inject_trajectory_point(ctx, T);
    const double H = ctx.p.H;
    const double scale_k =
        std::max({std::abs(base.k11), std::abs(base.k22), std::abs(base.k33),
                  std::abs(base.k23), H});
    const double scale_e = std::max({std::abs(base.e11), std::abs(base.e22),
                                     std::abs(base.e33), std::abs(base.e32)});
    const double scale_g =
        std::max({std::abs(base.g221), std::abs(base.g123),
                  std::abs(base.g231), std::abs(base.g312), 0.5 * scale_e});
    const double R_base =
        std::pow(base.w, 2.0 * ctx.p.rs / ctx.p.one_minus_two_rs);
    const double scale_v = std::max(std::abs(base.v1), std::sqrt(R_base));
    // Fixed draw order = field traversal order; scales per field family.
    int idx = 0;
    coupled_for_each_field(out.state, [&](std::vector<Complex>& c) {
      double scale = 1.0;
      if (idx < 6)
        scale = scale_k;  // curvature
      else if (idx < 15)
        scale = scale_g;  // connection
      else if (idx < 24)
        scale = scale_e;  // frame
      else if (idx < 25)
        scale = 1.0;  // lapse
      else if (idx < 28)
        scale = scale_v;  // velocity
      else
        scale = R_base;  // density power
      const auto bump =
          random_real_field(ctx.basis, rng, amplitude * scale, /*kmin=*/1);
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += bump[i];
      ++idx;
    });
    // The added fields must not push the density or lapse out of regime.
    const auto Rg = ctx.alg.to_grid(out.state.fluid.R);
    const auto ng = ctx.alg.to_grid(out.state.geom.n);
    double min_R = Rg[0], min_n = ng[0];
    for (double x : Rg) min_R = std::min(min_R, x);
    for (double x : ng) min_n = std::min(min_n, x);
    if (!(min_R > 0.0) || !(min_n > 0.0))
      throw RegimeError(
          "build_initial_data: perturbation amplitude " +
          std::to_string(amplitude) +
          " drove the density power or lapse non-positive (min R = " +
          std::to_string(min_R) + ", min n = " + std::to_string(min_n) + ")");
    out.constraint_solved = false;
  }

  const auto res = constraint_residuals(ctx, out.state);
  out.ham_sup = res.ham_sup;
  out.mom_sup = res.mom_sup;
  out.gauge_sup = gauge_residual(ctx, out.state).sup;
  return out;
}

}  // namespace tiltlab
