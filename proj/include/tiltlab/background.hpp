#pragma once

// Homogeneous anisotropic cosmological backgrounds on S^3 slices carrying a
// tilted perfect fluid with linear equation of state p = cs2 * rho, together
// with the exact closed-slicing exponentially expanding background and the
// closed-form homogeneous fluid on it.
//
// The reduced first-order system evolves
//   * mean-curvature components      k11, k22, k33, k23          [1/time]
//   * connection coefficients        g221, g123, g231, g312      [1/time]
//     (the fifth nonzero coefficient g331 equals -g221 and is implicit)
//   * frame components               e11, e22, e33, e32          [dimensionless]
//   * renormalized tilt velocity     v1
//   * density power                  w = rho^(1-2*rs)
// Data is prescribed at a late time t_start, where every variable is
// exponentially close to its leading asymptote, and integrated backwards.
// Backward integration amplifies the two constraint residuals at rates of
// up to e^{6 H (t_start - t)}, so the span is capped, the state is projected
// back onto the constraint set after every accepted step, and all internal
// arithmetic runs in long double.

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tiltlab/common.hpp"
#include "tiltlab/ode_rk.hpp"
#include "tiltlab/params.hpp"

namespace tiltlab {

// ---------------------------------------------------------------------------
// State and asymptotic data
// ---------------------------------------------------------------------------

struct BackgroundState {
  double k11 = 0, k22 = 0, k33 = 0, k23 = 0;
  double g221 = 0, g123 = 0, g231 = 0, g312 = 0;
  double e11 = 0, e22 = 0, e33 = 0, e32 = 0;
  double v1 = 0;
  double w = 0;

  static constexpr int kSize = 14;

  std::array<double, kSize> to_array() const {
    return {k11, k22, k33, k23, g221, g123, g231, g312,
            e11, e22, e33, e32, v1,  w};
  }
  static BackgroundState from_array(const std::array<double, kSize>& a) {
    BackgroundState s;
    s.k11 = a[0];
    s.k22 = a[1];
    s.k33 = a[2];
    s.k23 = a[3];
    s.g221 = a[4];
    s.g123 = a[5];
    s.g231 = a[6];
    s.g312 = a[7];
    s.e11 = a[8];
    s.e22 = a[9];
    s.e33 = a[10];
    s.e32 = a[11];
    s.v1 = a[12];
    s.w = a[13];
    return s;
  }
};

// Coefficients of the leading late-time behavior that parametrize a
// background solution: the e^{-3Ht} mean-curvature corrections, the
// diagonal metric scales G_I of the e^{Ht} growth, the e^{-Ht} tilt
// velocity coefficient and the e^{-2Ht} density-power coefficient.
struct AsymptoticData {
  std::array<double, 3> k_diag_inf3 = {0.0, 0.0, 0.0};
  double k23_inf3 = 0.0;
  std::array<double, 3> G_inf = {1.0, 1.0, 1.0};
  double v1_inf1 = 0.0;
  double w_inf2 = 0.0;  // >= 0; zero selects the vacuum limit
};

namespace bg_detail {

enum StateIndex : int {
  iK11 = 0,
  iK22,
  iK33,
  iK23,
  iG221,
  iG123,
  iG231,
  iG312,
  iE11,
  iE22,
  iE33,
  iE32,
  iV1,
  iW,
  kStateSize
};

template <class S>
struct Eos {
  S cs2;   // squared sound speed
  S rs;    // cs2 / (1 + cs2)
  S omtr;  // 1 - 2*rs = (1 - cs2)/(1 + cs2), evaluated without cancellation
  S lam;   // cosmological constant
  S hub;   // sqrt(lam / 3)
};

template <class S>
Eos<S> eos_scalars(const SoundSpeedParams& p) {
  const S c = static_cast<S>(p.cs2);
  const S one = S(1);
  Eos<S> e;
  e.cs2 = c;
  e.rs = c / (one + c);
  e.omtr = (one - c) / (one + c);
  e.lam = static_cast<S>(p.Lambda);
  e.hub = std::sqrt(e.lam / S(3));
  return e;
}

// Density-dependent quantities and the explicit density-power rate obtained
// by eliminating the v0 time derivative through v0^2 = v1^2 + rho^{2 rs}.
template <class S>
struct FluidRates {
  S rho = S(0);      // energy density
  S R = S(0);        // rho^{2 rs}
  S v0sq = S(0);     // v1^2 + R
  S dlogrho = S(0);  // d/dt log rho
  S dw = S(0);       // d/dt of the density power w
};

template <class S>
FluidRates<S> fluid_rates(S v1, S w, S k11, S trk, const Eos<S>& c) {
  FluidRates<S> f;
  f.v0sq = v1 * v1;
  if (w == S(0)) return f;  // exact vacuum: the fluid sector stays zero
  require(w > S(0), "background fluid left the physical regime: w = ",
          static_cast<double>(w));
  f.rho = std::pow(w, S(1) / c.omtr);
  f.R = std::pow(w, S(2) * c.rs / c.omtr);
  f.v0sq = v1 * v1 + f.R;
  // The rate coefficient omtr + rs*R/v0sq lies in [omtr, 1 - rs], hence is
  // bounded away from zero for every admissible sound speed.
  f.dlogrho = (trk - k11 * v1 * v1 / f.v0sq) / (c.omtr + c.rs * f.R / f.v0sq);
  f.dw = c.omtr * w * f.dlogrho;
  return f;
}

template <class S>
void rhs_core(const S* y, S* dy, const Eos<S>& c) {
  const S k11 = y[iK11], k22 = y[iK22], k33 = y[iK33], k23 = y[iK23];
  const S g221 = y[iG221], g123 = y[iG123], g231 = y[iG231], g312 = y[iG312];
  const S trk = k11 + k22 + k33;
  const auto f = fluid_rates<S>(y[iV1], y[iW], k11, trk, c);
  const S iso = S(0.5) * (S(1) - c.cs2) * f.rho;
  const S tilt = (S(1) + c.cs2) * y[iW] * y[iV1] * y[iV1];

  dy[iK11] = trk * k11 - S(2) * g221 * g221 + S(2) * g231 * g312 - c.lam -
             tilt - iso;
  dy[iK22] = trk * k22 + S(2) * g123 * g312 - c.lam - iso;
  dy[iK33] = trk * k33 + S(2) * g231 * g123 - c.lam - iso;
  dy[iK23] = trk * k23 + S(2) * g123 * g221;

  dy[iG221] = k11 * g221 - S(2) * k23 * g123 - k23 * g231 - k23 * g312;
  dy[iG123] = k11 * g123 + (k11 - k22) * g312 + (k11 - k33) * g231 -
              S(2) * k23 * g221;
  dy[iG231] = k22 * g231 + (k22 - k33) * g123 + (k22 - k11) * g312;
  dy[iG312] = k33 * g312 + (k33 - k11) * g231 + (k33 - k22) * g123;

  dy[iE11] = k11 * y[iE11];
  dy[iE22] = k22 * y[iE22] + k23 * y[iE32];
  dy[iE33] = k33 * y[iE33];
  dy[iE32] = k33 * y[iE32] + k23 * y[iE22];

  dy[iV1] = k11 * y[iV1];
  dy[iW] = f.dw;
}

// Constraint residuals c0 (Hamiltonian-type) and c1 (momentum-type), plus
// the sums of absolute values of their terms, which set the roundoff scale.
template <class S>
void constraints_core(const S* y, const Eos<S>& c, S& c0, S& c1, S& x0,
                      S& x1) {
  const S k11 = y[iK11], k22 = y[iK22], k33 = y[iK33], k23 = y[iK23];
  const S g221 = y[iG221], g123 = y[iG123], g231 = y[iG231], g312 = y[iG312];
  const S v1 = y[iV1], w = y[iW];
  const S trk = k11 + k22 + k33;

  S rho = S(0), R = S(0);
  S v0sq = v1 * v1;
  if (w != S(0)) {
    require(w > S(0), "background fluid left the physical regime: w = ",
            static_cast<double>(w));
    rho = std::pow(w, S(1) / c.omtr);
    R = std::pow(w, S(2) * c.rs / c.omtr);
    v0sq = v1 * v1 + R;
  }
  const S v0 = std::sqrt(v0sq);
  const S opc = S(1) + c.cs2;

  const S quad = k11 * k11 + k22 * k22 + k33 * k33 + S(2) * k23 * k23;
  const S gcross = g231 * g123 + g123 * g312 + g312 * g231;
  c0 = quad - trk * trk + S(2) * c.lam + S(2) * opc * w * v0sq -
       S(2) * c.cs2 * rho - S(2) * gcross + S(2) * g221 * g221;
  x0 = quad + trk * trk + S(2) * c.lam + S(2) * opc * w * v0sq +
       S(2) * c.cs2 * rho +
       S(2) * (std::abs(g231 * g123) + std::abs(g123 * g312) +
               std::abs(g312 * g231)) +
       S(2) * g221 * g221;

  c1 = (k22 - k33) * g221 - k23 * (g312 - g231) + opc * w * v0 * v1;
  x1 = std::abs((k22 - k33) * g221) + std::abs(k23) * (std::abs(g312) +
                                                       std::abs(g231)) +
       opc * w * v0 * std::abs(v1);
}

// Restores c0 = c1 = 0 by adjusting exactly two components: k23 (which
// enters c1 linearly) and a uniform shift of the diagonal mean-curvature
// components (in which c0 is exactly quadratic). Each update is an exact
// solve of its one-dimensional subproblem, so the alternation converges in
// one or two passes; the loop re-checks the residuals after every pass and
// aborts if they ever grow. Returns the iteration count.
template <class S>
int project_core(S* y, const Eos<S>& c, S rel_tol, int max_iter, S& c0_out,
                 S& c1_out, S& trace_shift, S& k23_shift) {
  trace_shift = S(0);
  k23_shift = S(0);
  const S eps = std::numeric_limits<S>::epsilon();
  S c0, c1, x0, x1;
  S prev_norm = std::numeric_limits<S>::max();
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    constraints_core<S>(y, c, c0, c1, x0, x1);
    const S tol0 = rel_tol * x0;
    const S tol1 = rel_tol * x1;
    const S norm = std::abs(c0) / std::max(x0, eps) +
                   std::abs(c1) / std::max(x1, eps);
    if (std::abs(c0) <= tol0 && std::abs(c1) <= tol1) break;
    require(norm <= prev_norm * S(4) + rel_tol,
            "constraint solve diverged: residuals c0=",
            static_cast<double>(c0), " c1=", static_cast<double>(c1));
    prev_norm = norm;

    if (std::abs(c1) > tol1) {
      const S denom = y[iG312] - y[iG231];
      require(std::abs(denom) >
                  eps * (std::abs(y[iG312]) + std::abs(y[iG231])),
              "constraint solve: momentum residual c1=",
              static_cast<double>(c1),
              " cannot be absorbed (g312 - g231 is degenerate)");
      S v0sq = y[iV1] * y[iV1];
      if (y[iW] > S(0)) v0sq += std::pow(y[iW], S(2) * c.rs / c.omtr);
      const S v0 = std::sqrt(v0sq);
      const S k23_new = ((y[iK22] - y[iK33]) * y[iG221] +
                         (S(1) + c.cs2) * y[iW] * v0 * y[iV1]) /
                        denom;
      k23_shift += k23_new - y[iK23];
      y[iK23] = k23_new;
      constraints_core<S>(y, c, c0, c1, x0, x1);
    }

    if (std::abs(c0) > rel_tol * x0) {
      // c0(d) = c0 - 4*trk*d - 6*d^2 for a uniform diagonal shift d.
      const S trk = y[iK11] + y[iK22] + y[iK33];
      const S b = S(4) * trk;
      const S disc = b * b + S(24) * c0;
      if (disc < S(0)) {
        // No real shift reaches zero; only possible at roundoff level near
        // a vanishing mean-curvature trace. Accept the tiny residual.
        require(std::abs(c0) <= S(1024) * eps * x0,
                "constraint solve: trace shift cannot absorb c0=",
                static_cast<double>(c0), " (negative discriminant)");
        break;
      }
      const S sq = std::sqrt(disc);
      S d;
      if (b == S(0)) {
        d = sq / S(12);
      } else {
        // Stable small-magnitude root of 6 d^2 + b d - c0 = 0.
        const S q = -(b + (b > S(0) ? sq : -sq)) / S(2);
        const S r1 = q / S(6);
        const S r2 = -c0 / q;
        d = (std::abs(r1) < std::abs(r2)) ? r1 : r2;
      }
      y[iK11] += d;
      y[iK22] += d;
      y[iK33] += d;
      trace_shift += d;
    }
  }
  constraints_core<S>(y, c, c0, c1, x0, x1);
  require(std::abs(c0) <= std::max(rel_tol, S(1024) * eps) * x0 &&
              std::abs(c1) <= std::max(rel_tol, S(1024) * eps) * x1,
          "constraint solve did not converge after ", max_iter,
          " iterations: c0=", static_cast<double>(c0),
          " c1=", static_cast<double>(c1));
  c0_out = c0;
  c1_out = c1;
  return iter;
}

template <class S>
std::vector<S> to_scalar_vector(const BackgroundState& s) {
  const auto a = s.to_array();
  std::vector<S> y(BackgroundState::kSize);
  for (int i = 0; i < BackgroundState::kSize; ++i) y[i] = static_cast<S>(a[i]);
  return y;
}

template <class S>
BackgroundState to_state(const std::vector<S>& y) {
  std::array<double, BackgroundState::kSize> a;
  for (int i = 0; i < BackgroundState::kSize; ++i)
    a[i] = static_cast<double>(y[i]);
  return BackgroundState::from_array(a);
}

}  // namespace bg_detail

// ---------------------------------------------------------------------------
// Pointwise operations
// ---------------------------------------------------------------------------

// Truncated late-time expansion at t_start: leading order of every variable
// plus the e^{-3Ht} mean-curvature coefficients. The two variables whose
// asymptotic data is trivial (g221 and e32) start at zero.
inline BackgroundState build_initial_state(const AsymptoticData& data,
                                           const SoundSpeedParams& p,
                                           double t_start,
                                           double tail_threshold = 1e-4) {
  for (double G : data.G_inf)
    require(G > 0.0, "build_initial_state: metric scale coefficients must be "
                     "positive, got ",
            G);
  require(data.w_inf2 >= 0.0,
          "build_initial_state: density coefficient must be nonnegative, "
          "got ",
          data.w_inf2);
  const double tail = std::exp(-2.0 * p.H * t_start);
  require(tail < tail_threshold,
          "build_initial_state: t_start too small; e^{-2 H t_start} = ", tail,
          " is not below ", tail_threshold);

  const double E = std::exp(-p.H * t_start);
  const double G1 = data.G_inf[0], G2 = data.G_inf[1], G3 = data.G_inf[2];
  const double inv = 1.0 / (G1 * G2 * G3);

  BackgroundState s;
  s.k11 = -p.H + data.k_diag_inf3[0] * E * E * E;
  s.k22 = -p.H + data.k_diag_inf3[1] * E * E * E;
  s.k33 = -p.H + data.k_diag_inf3[2] * E * E * E;
  s.k23 = data.k23_inf3 * E * E * E;
  s.g221 = 0.0;
  s.g123 = inv * (G3 * G3 - G1 * G1 + G2 * G2) * E;
  s.g231 = inv * (G3 * G3 - G2 * G2 + G1 * G1) * E;
  s.g312 = inv * (G1 * G1 - G3 * G3 + G2 * G2) * E;
  s.e11 = E / G1;
  s.e22 = E / G2;
  s.e33 = E / G3;
  s.e32 = 0.0;
  s.v1 = data.v1_inf1 * E;
  s.w = data.w_inf2 * E * E;
  return s;
}

struct ConstraintPair {
  double c0 = 0, c1 = 0;      // constraint residuals
  double scale0 = 0, scale1 = 0;  // sums of absolute values of their terms
};

inline ConstraintPair constraint_monitor(const BackgroundState& s,
                                         const SoundSpeedParams& p) {
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const auto y = bg_detail::to_scalar_vector<long double>(s);
  long double c0, c1, x0, x1;
  bg_detail::constraints_core<long double>(y.data(), eos, c0, c1, x0, x1);
  return {static_cast<double>(c0), static_cast<double>(c1),
          static_cast<double>(x0), static_cast<double>(x1)};
}

struct ConstraintSolveOptions {
  double rel_tol = 1e-16;  // relative to the constraint term-magnitude sums
  int max_iterations = 24;
};

struct ConstraintSolveResult {
  BackgroundState state;
  double c0 = 0, c1 = 0;
  double trace_shift = 0;  // amount added to each diagonal mean-curvature entry
  double k23_shift = 0;
  int iterations = 0;
};

// Exact two-parameter constraint restoration; every other component of the
// state is returned unchanged.
inline ConstraintSolveResult solve_constraints_at(
    const BackgroundState& s, const SoundSpeedParams& p,
    const ConstraintSolveOptions& opt = {}) {
  const auto eos = bg_detail::eos_scalars<long double>(p);
  auto y = bg_detail::to_scalar_vector<long double>(s);
  long double c0, c1, dtr, dk23;
  ConstraintSolveResult r;
  r.iterations = bg_detail::project_core<long double>(
      y.data(), eos, static_cast<long double>(opt.rel_tol),
      opt.max_iterations, c0, c1, dtr, dk23);
  r.state = bg_detail::to_state<long double>(y);
  r.c0 = static_cast<double>(c0);
  r.c1 = static_cast<double>(c1);
  r.trace_shift = static_cast<double>(dtr);
  r.k23_shift = static_cast<double>(dk23);
  return r;
}

inline BackgroundState rhs_background(const BackgroundState& s,
                                      const SoundSpeedParams& p) {
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const auto y = bg_detail::to_scalar_vector<long double>(s);
  std::vector<long double> dy(BackgroundState::kSize);
  bg_detail::rhs_core<long double>(y.data(), dy.data(), eos);
  return bg_detail::to_state<long double>(dy);
}

// The two-variable tilted-fluid subsystem (v1, w) with a prescribed
// mean-curvature environment; shared with rhs_background, exposed so the
// fluid can be driven by an externally fixed geometry.
inline std::array<double, 2> tilted_fluid_rhs(double v1, double w, double k11,
                                              double trk,
                                              const SoundSpeedParams& p) {
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const auto f = bg_detail::fluid_rates<long double>(
      static_cast<long double>(v1), static_cast<long double>(w),
      static_cast<long double>(k11), static_cast<long double>(trk), eos);
  return {static_cast<double>(static_cast<long double>(k11) * v1),
          static_cast<double>(f.dw)};
}

inline double log_density_rate(const BackgroundState& s,
                               const SoundSpeedParams& p) {
  require(s.w > 0.0, "log_density_rate: needs a positive density power");
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const auto f = bg_detail::fluid_rates<long double>(
      static_cast<long double>(s.v1), static_cast<long double>(s.w),
      static_cast<long double>(s.k11),
      static_cast<long double>(s.k11 + s.k22 + s.k33), eos);
  return static_cast<double>(f.dlogrho);
}

// ---------------------------------------------------------------------------
// Metric reconstruction and tilt diagnostics
// ---------------------------------------------------------------------------

struct MetricReconstruction {
  double G1 = 0, G2 = 0, G3 = 0;  // diagonal metric scale functions
  double G_sq = 0;  // signed off-diagonal metric coefficient ("G squared")
  double G = 0;     // signed square root of G_sq, for reporting
  double theta = 0;  // tilt rapidity
  double u0 = 1, u1 = 0;  // unit fluid velocity components
  double rho = 0;         // energy density
};

inline MetricReconstruction reconstruct_metric(const BackgroundState& s,
                                               const SoundSpeedParams& p) {
  require(s.e11 > 0.0 && s.e22 > 0.0 && s.e33 > 0.0,
          "reconstruct_metric: degenerate frame (e11, e22, e33 must be "
          "positive)");
  MetricReconstruction m;
  m.G1 = 1.0 / s.e11;
  m.G2 = 1.0 / s.e22;
  m.G_sq = -s.e32 * m.G2 * m.G2 / s.e33;
  m.G3 = std::sqrt(1.0 / (s.e33 * s.e33) + m.G_sq * m.G_sq / (m.G2 * m.G2));
  m.G = (m.G_sq >= 0.0 ? 1.0 : -1.0) * std::sqrt(std::abs(m.G_sq));
  if (s.w > 0.0) {
    const auto eos = bg_detail::eos_scalars<long double>(p);
    const long double w = static_cast<long double>(s.w);
    const long double rho = std::pow(w, 1.0L / eos.omtr);
    const long double u1 =
        static_cast<long double>(s.v1) * std::pow(w, -eos.rs / eos.omtr);
    m.rho = static_cast<double>(rho);
    m.u1 = static_cast<double>(u1);
    m.u0 = static_cast<double>(std::sqrt(1.0L + u1 * u1));
    m.theta = static_cast<double>(std::asinh(u1));
  } else {
    require(s.w == 0.0, "reconstruct_metric: negative density power");
    m.rho = 0.0;  // vacuum: report a comoving unit velocity
    m.u0 = 1.0;
    m.u1 = 0.0;
    m.theta = 0.0;
  }
  return m;
}

inline double tilt_angle(const BackgroundState& s, const SoundSpeedParams& p) {
  require(s.w > 0.0, "tilt_angle: needs a positive density power");
  return reconstruct_metric(s, p).theta;
}

// d(theta)/dt = u1 * (k11 - rs * dlog(rho)) / u0.
inline double tilt_angle_rate(const BackgroundState& s,
                              const SoundSpeedParams& p) {
  require(s.w > 0.0, "tilt_angle_rate: needs a positive density power");
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const auto f = bg_detail::fluid_rates<long double>(
      static_cast<long double>(s.v1), static_cast<long double>(s.w),
      static_cast<long double>(s.k11),
      static_cast<long double>(s.k11 + s.k22 + s.k33), eos);
  const long double u1 =
      static_cast<long double>(s.v1) *
      std::pow(static_cast<long double>(s.w), -eos.rs / eos.omtr);
  const long double u0 = std::sqrt(1.0L + u1 * u1);
  return static_cast<double>(u1 * (static_cast<long double>(s.k11) -
                                   eos.rs * f.dlogrho) /
                             u0);
}

// ---------------------------------------------------------------------------
// Exact exponentially expanding background and the homogeneous fluid on it
// ---------------------------------------------------------------------------

enum class FlrwKind { closed_de_sitter };

struct FlrwBackground {
  double H = 1.0;
  double a(double t) const { return std::cosh(H * t) / H; }
  double a_dot(double t) const { return std::sinh(H * t); }
  double hubble(double t) const { return H * std::tanh(H * t); }
};

inline FlrwBackground flrw(const SoundSpeedParams& p, FlrwKind kind) {
  require(kind == FlrwKind::closed_de_sitter,
          "flrw: unsupported background kind");
  return FlrwBackground{p.H};
}

struct HomogeneousEulerPoint {
  double v1 = 0;  // renormalized tilt velocity
  double v0 = 0;  // renormalized time component, positive
  double rho = 0;
  double w = 0;  // rho^(1-2*rs)
};

// Closed-form homogeneous fluid on the fixed expanding background: v1 = c1/a
// and rho solves rho^{1-2 rs} * a^3 * sqrt(c1^2/a^2 + rho^{2 rs}) = c2.
// Solved as a safeguarded Newton iteration in log rho; the residual is
// strictly increasing in log rho, so the root is unique.
inline HomogeneousEulerPoint homogeneous_euler_exact(double c1, double c2,
                                                     const SoundSpeedParams& p,
                                                     const FlrwBackground& bg,
                                                     double t) {
  require(c2 > 0.0, "homogeneous_euler_exact: c2 must be positive, got ", c2);
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const long double a = std::cosh(static_cast<long double>(bg.H) * t) / bg.H;
  const long double v1 = static_cast<long double>(c1) / a;
  const long double target =
      std::log(static_cast<long double>(c2)) - 3.0L * std::log(a);

  long double x;  // log rho
  if (v1 == 0.0L) {
    x = target / (1.0L - eos.rs);
  } else {
    const long double guess_tilt =
        (target - std::log(std::abs(v1))) / eos.omtr;
    const long double guess_orth = target / (1.0L - eos.rs);
    x = std::min(guess_tilt, guess_orth);
    const auto residual = [&](long double xx) {
      const long double R = std::exp(2.0L * eos.rs * xx);
      return eos.omtr * xx + 0.5L * std::log(v1 * v1 + R) - target;
    };
    // Expand a bracket around the monotone residual, then Newton + bisection.
    long double lo = x, hi = x;
    long double flo = residual(lo);
    long double step = std::max(1.0L, std::abs(x) * 0.1L);
    int guard = 0;
    while (flo > 0.0L) {
      lo -= step;
      step *= 2.0L;
      flo = residual(lo);
      require(++guard < 200, "homogeneous_euler_exact: bracket failure (low)");
    }
    step = std::max(1.0L, std::abs(x) * 0.1L);
    long double fhi = residual(hi);
    guard = 0;
    while (fhi < 0.0L) {
      hi += step;
      step *= 2.0L;
      fhi = residual(hi);
      require(++guard < 200, "homogeneous_euler_exact: bracket failure (high)");
    }
    x = 0.5L * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      const long double R = std::exp(2.0L * eos.rs * x);
      const long double f = eos.omtr * x + 0.5L * std::log(v1 * v1 + R) -
                            target;
      const long double fp = eos.omtr + eos.rs * R / (v1 * v1 + R);
      if (f > 0.0L)
        hi = x;
      else
        lo = x;
      long double xn = x - f / fp;
      if (!(xn > lo && xn < hi)) xn = 0.5L * (lo + hi);
      const long double dx = std::abs(xn - x);
      x = xn;
      if (dx <= 1e-17L * (1.0L + std::abs(x))) break;
    }
  }

  HomogeneousEulerPoint out;
  const long double R = std::exp(2.0L * eos.rs * x);
  out.v1 = static_cast<double>(v1);
  out.rho = static_cast<double>(std::exp(x));
  out.w = static_cast<double>(std::exp(eos.omtr * x));
  out.v0 = static_cast<double>(std::sqrt(v1 * v1 + R));
  return out;
}

// ---------------------------------------------------------------------------
// Trajectory integration
// ---------------------------------------------------------------------------

struct BackgroundOptions {
  double rtol = 1e-10;   // local tolerance of the adaptive integrator
  double atol = 1e-24;   // small absolute floor: effectively per-component
                         // relative control (internals run in long double)
  double dt_max = 0.0;
  long max_steps = 2000000;
  bool project = true;  // per-accepted-step constraint projection
  double projection_rel_tol =
      64.0 * static_cast<double>(std::numeric_limits<long double>::epsilon());
  int max_projection_iterations = 24;
  double tail_threshold = 1e-4;   // bound on e^{-2 H t_start}
  double backward_span_cap = 8.0;  // maximum H*(t_start - T) when T < t_start
};

struct MonitorSample {
  double t = 0;
  double c0 = 0, c1 = 0;
  double scale0 = 0, scale1 = 0;
};

class BackgroundTrajectory {
 public:
  BackgroundTrajectory(const SoundSpeedParams& p,
                       DenseSolution<long double> dense,
                       std::vector<MonitorSample> monitors, double t_data)
      : params_(p),
        dense_(std::move(dense)),
        monitors_(std::move(monitors)),
        t_data_(t_data) {}

  const SoundSpeedParams& parameters() const { return params_; }
  double t_data() const { return t_data_; }
  double t_lo() const {
    return static_cast<double>(std::min(dense_.t_begin, dense_.t_end));
  }
  double t_hi() const {
    return static_cast<double>(std::max(dense_.t_begin, dense_.t_end));
  }

  BackgroundState state_at(double t) const {
    std::vector<long double> y;
    dense_.eval(static_cast<long double>(t), y);
    return bg_detail::to_state<long double>(y);
  }

  BackgroundState rhs_at(double t) const {
    const auto eos = bg_detail::eos_scalars<long double>(params_);
    std::vector<long double> y, dy(BackgroundState::kSize);
    dense_.eval(static_cast<long double>(t), y);
    bg_detail::rhs_core<long double>(y.data(), dy.data(), eos);
    return bg_detail::to_state<long double>(dy);
  }

  double trace_k_at(double t) const {
    const auto s = state_at(t);
    return s.k11 + s.k22 + s.k33;
  }

  double trace_k_rate_at(double t) const {
    const auto d = rhs_at(t);
    return d.k11 + d.k22 + d.k33;
  }

  const std::vector<MonitorSample>& monitors() const { return monitors_; }
  long n_accepted() const { return dense_.n_accepted; }
  long n_rejected() const { return dense_.n_rejected; }
  long n_rhs() const { return dense_.n_rhs; }

 private:
  SoundSpeedParams params_;
  DenseSolution<long double> dense_;
  std::vector<MonitorSample> monitors_;
  double t_data_;
};

// Builds the truncated data at t_start, restores the constraints exactly,
// and integrates to T (backwards when T < t_start; a forward span is also
// supported for providing the background beyond its data time). Constraint
// residuals are recorded at every accepted node, after projection when
// projection is enabled.
inline BackgroundTrajectory integrate_background(
    const AsymptoticData& data, const SoundSpeedParams& p, double T,
    double t_start, const BackgroundOptions& opt = {}) {
  require(T != t_start, "integrate_background: empty time span");
  if (T < t_start) {
    require(p.H * (t_start - T) <= opt.backward_span_cap + 1e-12,
            "integrate_background: backward span H*(t_start-T) = ",
            p.H * (t_start - T), " exceeds the amplification cap ",
            opt.backward_span_cap);
  }
  const auto eos = bg_detail::eos_scalars<long double>(p);
  const BackgroundState s0 =
      build_initial_state(data, p, t_start, opt.tail_threshold);
  auto y = bg_detail::to_scalar_vector<long double>(s0);
  {
    long double c0, c1, dtr, dk23;
    bg_detail::project_core<long double>(
        y.data(), eos, static_cast<long double>(opt.projection_rel_tol),
        opt.max_projection_iterations, c0, c1, dtr, dk23);
  }

  std::vector<MonitorSample> monitors;
  auto record = [&](long double t, const std::vector<long double>& state) {
    long double c0, c1, x0, x1;
    bg_detail::constraints_core<long double>(state.data(), eos, c0, c1, x0,
                                             x1);
    monitors.push_back({static_cast<double>(t), static_cast<double>(c0),
                        static_cast<double>(c1), static_cast<double>(x0),
                        static_cast<double>(x1)});
  };
  record(static_cast<long double>(t_start), y);

  AdaptiveOptions<long double> aopt;
  aopt.rtol = static_cast<long double>(opt.rtol);
  aopt.atol = static_cast<long double>(opt.atol);
  aopt.dt_max = static_cast<long double>(opt.dt_max);
  aopt.max_steps = opt.max_steps;
  aopt.store_dense = true;

  auto rhs = [&eos](long double, const std::vector<long double>& yy,
                    std::vector<long double>& dy) {
    bg_detail::rhs_core<long double>(yy.data(), dy.data(), eos);
  };
  auto hook = [&](long double t, std::vector<long double>& yy) -> bool {
    bool moved = false;
    if (opt.project) {
      long double c0, c1, dtr, dk23;
      bg_detail::project_core<long double>(
          yy.data(), eos, static_cast<long double>(opt.projection_rel_tol),
          opt.max_projection_iterations, c0, c1, dtr, dk23);
      moved = (dtr != 0.0L) || (dk23 != 0.0L);
    }
    record(t, yy);
    return moved;
  };

  auto dense = integrate_dopri5<long double>(
      rhs, std::move(y), static_cast<long double>(t_start),
      static_cast<long double>(T), aopt, hook);
  return BackgroundTrajectory(p, std::move(dense), std::move(monitors),
                              t_start);
}

// One exported row of a background trajectory: the full state, constraint
// residuals, and the reconstructed metric/tilt quantities.
struct BackgroundSample {
  double t = 0;
  BackgroundState state;
  double c0 = 0, c1 = 0;
  MetricReconstruction metric;
};

inline BackgroundSample background_sample(const BackgroundTrajectory& traj,
                                          double t) {
  BackgroundSample row;
  row.t = t;
  row.state = traj.state_at(t);
  const auto mon = constraint_monitor(row.state, traj.parameters());
  row.c0 = mon.c0;
  row.c1 = mon.c1;
  row.metric = reconstruct_metric(row.state, traj.parameters());
  return row;
}

}  // namespace tiltlab
