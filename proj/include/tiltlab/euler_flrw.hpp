#pragma once

// Method-of-lines solver for the relativistic Euler equations of a
// barotropic fluid (pressure = cs^2 * density) on the fixed expanding
// closed background, discretized in space by the band-limited harmonic
// calculus and stepped in time with classical RK4.
//
// Evolved unknowns are the renormalized spatial velocity components v_I in
// the frame e_I = a^{-1} Y_I and the renormalized density R = rho^{2 rs};
// the time component v0 = sqrt(v_C v_C + R) is derived pointwise, so the
// velocity normalization holds exactly by construction instead of being a
// separately evolved constraint.
//
// With the lapse fixed to one, k_{IJ} = -(a'/a) delta_{IJ}, and every
// frame-connection term vanishing (the Y_I are Killing fields of the round
// metric and their connection coefficients are totally antisymmetric), the
// system reads
//
//   dt v_I = -(a'/a) v_I + (v_C/v0) e_C v_I + (1/(2 v0)) e_I R,
//
//   [B + R/(2 v0^2)] dt R = -(a'/a) (2 + R/v0^2) R
//                           - (R/v0^2) (v_I v_C / v0) e_C v_I
//                           + (R/v0)  e_C v_C
//                           + [B - R/(2 v0^2)] (v_C/v0) e_C R,
//
// with B = (1-2 rs)/(2 rs). The density equation is the result of
// eliminating dt v0 between the energy equation and the chain rule of the
// derived v0; its two sanity anchors are exact: at v = 0 it collapses to
// d log R / dt = -6 cs^2 (a'/a), i.e. rho proportional to a^{-3(1+cs^2)},
// and on spatially constant tilted data it preserves the two first
// integrals  a v_1  and  rho^{1-2rs} a^3 v0.
//
// Spatial discretization: all fields are band-limited harmonic coefficient
// vectors; frame derivatives act exactly in coefficient space; every
// pointwise product or quotient is formed on the double-band quadrature
// grid and projected straight back to the band, so quadratic products are
// alias-free and the rational factors incur only the projection error of
// smooth well-resolved fields.

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "tiltlab/background.hpp"
#include "tiltlab/common.hpp"
#include "tiltlab/ode_rk.hpp"
#include "tiltlab/params.hpp"
#include "tiltlab/s3_basis.hpp"
#include "tiltlab/s3_ops.hpp"
#include "tiltlab/s3_transform.hpp"

namespace tiltlab {

// Thrown when the fluid leaves the admissible regime: the renormalized
// density must stay positive at every quadrature node, both because the
// barotropic power laws need it and because the equations divide by v0.
class RegimeError : public Error {
 public:
  using Error::Error;
};

// Band-limited fluid state: conjugate-symmetric harmonic coefficients of
// the three frame velocity components and of the renormalized density
// R = rho^{2 rs}, tagged with the coordinate time they belong to.
struct FluidFieldState {
  std::array<std::vector<Complex>, 3> v;
  std::vector<Complex> R;
  double t = 0.0;
};

// Everything a right-hand-side evaluation needs, built once per run:
// derived sound-speed constants, the expanding background, the harmonic
// basis, the exact frame-derivative blocks, and the dealiasing transform.
struct EulerContext {
  SoundSpeedParams p;
  FlrwBackground bg;
  S3Basis basis;
  FrameOps ops;
  DealiasedAlgebra alg;
  double const_coeff;  // coefficient carried by the constant field 1

  EulerContext(const SoundSpeedParams& params, int L,
               FlrwKind kind = FlrwKind::closed_de_sitter)
      : p(params),
        bg(flrw(params, kind)),
        basis(build_basis(L)),
        ops(build_frame_ops(basis)),
        alg(basis),
        const_coeff(0.0) {
    std::vector<double> ones(alg.wide.grid_size(), 1.0);
    const auto c = alg.to_coeffs(ones);
    require(std::abs(c[0].imag()) <= 1e-12 * std::abs(c[0].real()) &&
                c[0].real() > 0.0,
            "EulerContext: constant-field coefficient came out non-real");
    const_coeff = c[0].real();
  }
};

// Exact band-limited representation of spatially constant fields: the
// constant occupies the single degree-zero coefficient.
inline FluidFieldState make_homogeneous_state(const EulerContext& ctx,
                                              double v1, double R, double t) {
  require(R > 0.0, "make_homogeneous_state: R must be positive, got ", R);
  FluidFieldState s;
  s.t = t;
  const std::size_t n = ctx.basis.size();
  for (auto& c : s.v) c.assign(n, 0.0);
  s.R.assign(n, 0.0);
  s.v[0][0] = v1 * ctx.const_coeff;
  s.R[0] = R * ctx.const_coeff;
  return s;
}

// Spatial mean of a field (the degree-zero mode's function value).
inline double homogeneous_value(const EulerContext& ctx,
                                const std::vector<Complex>& c) {
  require(!c.empty(), "homogeneous_value: empty coefficient vector");
  return c[0].real() / ctx.const_coeff;
}

namespace euler_detail {

// Pointwise evaluation of the state, its frame derivatives, the derived
// v0, and the time derivatives of the evolved fields on the dealiasing
// grid. This is the single code path shared by the projected right-hand
// side and by the formulation-equivalence residual.
struct GridWork {
  std::size_t n = 0;
  std::array<std::vector<double>, 3> v;                 // v_I(x)
  std::vector<double> R;                                // R(x)
  std::array<std::array<std::vector<double>, 3>, 3> dv; // dv[a][i] = Y_a v_i
  std::array<std::vector<double>, 3> dR;                // Y_a R
  std::vector<double> v0;                               // derived v0(x)
  std::array<std::vector<double>, 3> vdot;              // dt v_I (x)
  std::vector<double> Rdot;                             // dt R (x)
};

inline GridWork evaluate_on_grid(const EulerContext& ctx,
                                 const FluidFieldState& s) {
  GridWork w;
  w.n = ctx.alg.wide.grid_size();
  for (int i = 0; i < 3; ++i) {
    w.v[static_cast<std::size_t>(i)] =
        ctx.alg.to_grid(s.v[static_cast<std::size_t>(i)]);
    for (int a = 0; a < 3; ++a)
      w.dv[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] =
          ctx.alg.to_grid(
              ctx.ops.apply(a, ctx.basis, s.v[static_cast<std::size_t>(i)]));
  }
  w.R = ctx.alg.to_grid(s.R);
  for (int a = 0; a < 3; ++a)
    w.dR[static_cast<std::size_t>(a)] =
        ctx.alg.to_grid(ctx.ops.apply(a, ctx.basis, s.R));

  const double A = ctx.bg.hubble(s.t);
  const double ainv = 1.0 / ctx.bg.a(s.t);
  const double B = 0.5 * ctx.p.one_minus_two_rs / ctx.p.rs;

  w.v0.resize(w.n);
  for (auto& g : w.vdot) g.resize(w.n);
  w.Rdot.resize(w.n);

  for (std::size_t m = 0; m < w.n; ++m) {
    const double R = w.R[m];
    if (!(R > 0.0))
      throw RegimeError("fluid regime exit: rho^{2rs} reached " +
                        std::to_string(R) + " at a quadrature node, t = " +
                        std::to_string(s.t));
    const double v1 = w.v[0][m], v2 = w.v[1][m], v3 = w.v[2][m];
    const double v0sq = v1 * v1 + v2 * v2 + v3 * v3 + R;
    const double v0 = std::sqrt(v0sq);
    w.v0[m] = v0;

    // dt v_I = -A v_I + (v_C/v0) e_C v_I + (1/(2 v0)) e_I R.
    for (int i = 0; i < 3; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      double adv = 0.0;
      for (int c = 0; c < 3; ++c)
        adv += w.v[static_cast<std::size_t>(c)][m] *
               w.dv[static_cast<std::size_t>(c)][ii][m];
      w.vdot[ii][m] = -A * w.v[ii][m] +
                      ainv * (adv / v0 + 0.5 * w.dR[ii][m] / v0);
    }

    // Density equation as in the header comment.
    const double half_ratio = 0.5 * R / v0sq;
    double flux = 0.0;    // v_I v_C e_C v_I
    double div = 0.0;     // e_C v_C
    double advR = 0.0;    // v_C e_C R
    for (int c = 0; c < 3; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      div += w.dv[cc][cc][m];
      advR += w.v[cc][m] * w.dR[cc][m];
      for (int i = 0; i < 3; ++i)
        flux += w.v[static_cast<std::size_t>(i)][m] * w.v[cc][m] *
                w.dv[cc][static_cast<std::size_t>(i)][m];
    }
    const double num = -A * (2.0 + R / v0sq) * R +
                       ainv * (-(R / v0sq) * flux / v0 + (R / v0) * div +
                               (B - half_ratio) * advR / v0);
    w.Rdot[m] = num / (B + half_ratio);
  }
  return w;
}

}  // namespace euler_detail

// Pointwise derived v0 = sqrt(v_C v_C + R) on the dealiasing grid.
inline std::vector<double> derived_v0_grid(const EulerContext& ctx,
                                           const FluidFieldState& s) {
  const auto v1 = ctx.alg.to_grid(s.v[0]);
  const auto v2 = ctx.alg.to_grid(s.v[1]);
  const auto v3 = ctx.alg.to_grid(s.v[2]);
  const auto R = ctx.alg.to_grid(s.R);
  std::vector<double> out(R.size());
  for (std::size_t m = 0; m < R.size(); ++m) {
    if (!(R[m] > 0.0))
      throw RegimeError("derived_v0_grid: rho^{2rs} reached " +
                        std::to_string(R[m]) + " at a quadrature node");
    out[m] = std::sqrt(v1[m] * v1[m] + v2[m] * v2[m] + v3[m] * v3[m] + R[m]);
  }
  return out;
}

// Time derivative of the state: pointwise evaluation on the dealiasing
// grid followed by projection back to the band.
inline FluidFieldState rhs_euler(const EulerContext& ctx,
                                 const FluidFieldState& s) {
  const auto w = euler_detail::evaluate_on_grid(ctx, s);
  FluidFieldState d;
  d.t = s.t;
  for (int i = 0; i < 3; ++i)
    d.v[static_cast<std::size_t>(i)] =
        ctx.alg.to_coeffs(w.vdot[static_cast<std::size_t>(i)]);
  d.R = ctx.alg.to_coeffs(w.Rdot);
  return d;
}

// Residual of the redundant time-component equation,
//   dt v0 + (a'/a) v0 - (v_C/v0) e_C v0
//     = (1/(2 v0)) dt R + (a'/a) R / v0,
// evaluated pointwise with the derived v0 (chain rule for its
// derivatives) and the computed dt v_I, dt R. The eliminated formulation
// satisfies it identically, so the returned maximum relative residual is
// pure roundoff; it quantifies the equivalence of the two formulations.
inline double redundant_equation_residual(const EulerContext& ctx,
                                          const FluidFieldState& s) {
  const auto w = euler_detail::evaluate_on_grid(ctx, s);
  const double A = ctx.bg.hubble(s.t);
  const double ainv = 1.0 / ctx.bg.a(s.t);
  double worst = 0.0;
  for (std::size_t m = 0; m < w.n; ++m) {
    const double v0 = w.v0[m];
    double v0dot = 0.5 * w.Rdot[m];
    for (int c = 0; c < 3; ++c)
      v0dot += w.v[static_cast<std::size_t>(c)][m] *
               w.vdot[static_cast<std::size_t>(c)][m];
    v0dot /= v0;
    double adv = 0.0;  // v_C e_C v0, via the chain rule on the grid
    for (int c = 0; c < 3; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      double dcv0 = 0.5 * w.dR[cc][m];
      for (int i = 0; i < 3; ++i)
        dcv0 += w.v[static_cast<std::size_t>(i)][m] *
                w.dv[cc][static_cast<std::size_t>(i)][m];
      adv += w.v[cc][m] * dcv0 / v0;
    }
    const double lhs1 = v0dot;
    const double lhs2 = A * v0;
    const double lhs3 = -ainv * adv / v0;
    const double rhs1 = 0.5 * w.Rdot[m] / v0;
    const double rhs2 = A * w.R[m] / v0;
    const double res = lhs1 + lhs2 + lhs3 - rhs1 - rhs2;
    const double scale = std::abs(lhs1) + std::abs(lhs2) + std::abs(lhs3) +
                         std::abs(rhs1) + std::abs(rhs2);
    if (scale > 0.0) worst = std::max(worst, std::abs(res) / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Time stepping.

struct StepperConfig {
  double dt = 0.0;      // fixed step; 0 selects the advective bound
  double cfl = 0.5;     // fraction of the advective limit when dt == 0
  double t_end = 0.0;
  bool filter = false;  // optional post-step damping of the top degrees
  double filter_alpha = 4.0;
  int filter_order = 8;
  long output_every = 1;  // snapshot cadence, in accepted steps
};

inline std::vector<double> pack_state(const FluidFieldState& s) {
  std::vector<double> y;
  y.reserve(8 * s.R.size());
  for (const auto& c : s.v)
    for (const auto& z : c) {
      y.push_back(z.real());
      y.push_back(z.imag());
    }
  for (const auto& z : s.R) {
    y.push_back(z.real());
    y.push_back(z.imag());
  }
  return y;
}

inline FluidFieldState unpack_state(const EulerContext& ctx,
                                    const std::vector<double>& y, double t) {
  const std::size_t n = ctx.basis.size();
  require(y.size() == 8 * n, "unpack_state: expected ", 8 * n,
          " packed doubles, got ", y.size());
  FluidFieldState s;
  s.t = t;
  std::size_t at = 0;
  for (auto& c : s.v) {
    c.resize(n);
    for (auto& z : c) {
      z = Complex(y[at], y[at + 1]);
      at += 2;
    }
  }
  s.R.resize(n);
  for (auto& z : s.R) {
    z = Complex(y[at], y[at + 1]);
    at += 2;
  }
  return s;
}

// Conservative advective step bound: signal speeds are below one in frame
// units and a band-L derivative amplifies by at most L+1, so dt is a
// fraction of a(t)/(L+1).
inline double advective_dt(const EulerContext& ctx, double t, double cfl) {
  return cfl * ctx.bg.a(t) / (ctx.basis.L + 1.0);
}

// One classical RK4 step of size dt, with the optional spectral filter
// applied to every field afterwards.
inline void euler_step(const EulerContext& ctx, FluidFieldState& s, double dt,
                       const StepperConfig& cfg) {
  require(dt > 0.0, "euler_step: dt must be positive, got ", dt);
  auto y = pack_state(s);
  const double t0 = s.t;
  auto rhs = [&](double t, const std::vector<double>& yy,
                 std::vector<double>& dy) {
    dy = pack_state(rhs_euler(ctx, unpack_state(ctx, yy, t)));
  };
  integrate_rk4<double>(rhs, y, t0, t0 + dt, 1);
  s = unpack_state(ctx, y, t0 + dt);
  if (cfg.filter) {
    for (auto& c : s.v)
      apply_spectral_filter(c, ctx.basis, cfg.filter_alpha, cfg.filter_order);
    apply_spectral_filter(s.R, ctx.basis, cfg.filter_alpha, cfg.filter_order);
  }
}

enum class EvolveStatus { completed, regime_exit, nan_detected };

struct EvolveResult {
  FluidFieldState state;  // last state that evaluated cleanly
  EvolveStatus status = EvolveStatus::completed;
  long n_steps = 0;
};

inline bool state_is_finite(const FluidFieldState& s) {
  for (const auto& c : s.v)
    for (const auto& z : c)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  for (const auto& z : s.R)
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  return true;
}

using SnapshotCallback = std::function<void(const FluidFieldState&)>;

// March the state to cfg.t_end. Snapshots go to the callback at the
// configured cadence (always including the initial and final states). On a
// regime exit or a non-finite state the run aborts and the result carries
// the last good state and the failure kind.
inline EvolveResult evolve(const EulerContext& ctx, FluidFieldState s,
                           const StepperConfig& cfg,
                           const SnapshotCallback& cb = {}) {
  require(cfg.t_end > s.t, "evolve: t_end ", cfg.t_end,
          " must exceed the initial time ", s.t);
  require(cfg.dt > 0.0 || (cfg.cfl > 0.0 && cfg.cfl <= 1.0),
          "evolve: need dt > 0 or a CFL fraction in (0, 1]");
  require(cfg.output_every > 0, "evolve: output cadence must be positive");
  EvolveResult res;
  res.state = s;
  if (!state_is_finite(s)) {
    res.status = EvolveStatus::nan_detected;
    return res;
  }
  if (cb) cb(s);
  const double horizon = cfg.t_end;
  const double tiny = 1e-12 * std::max(1.0, std::abs(horizon));
  while (horizon - s.t > tiny) {
    double dt = cfg.dt > 0.0 ? cfg.dt : advective_dt(ctx, s.t, cfg.cfl);
    dt = std::min(dt, horizon - s.t);
    try {
      euler_step(ctx, s, dt, cfg);
    } catch (const RegimeError&) {
      res.status = EvolveStatus::regime_exit;
      return res;
    }
    if (!state_is_finite(s)) {
      res.status = EvolveStatus::nan_detected;
      return res;
    }
    ++res.n_steps;
    res.state = s;
    const bool last = horizon - s.t <= tiny;
    if (cb && (last || res.n_steps % cfg.output_every == 0)) cb(s);
  }
  res.status = EvolveStatus::completed;
  return res;
}

// ---------------------------------------------------------------------------
// Initial data.

struct PerturbationSpec {
  double amplitude = 1e-3;  // relative to the background field scales
  int kmin = 1;             // harmonic degree band of the perturbation
  int kmax = -1;            // -1 selects the basis band limit
  bool on_velocity = true;
  bool on_density = true;
  std::uint64_t seed = 1;
  // Deterministic single harmonics (field 0..2 = v_I, 3 = R) override the
  // random band when non-empty; amplitudes are absolute coefficients.
  struct Harmonic {
    int field = 3;
    int k = 2, p = 0, q = 0;
    Complex amp = 0.0;
  };
  std::vector<Harmonic> harmonics;
};

// Homogeneous state plus a band-limited perturbation. The homogeneous part
// is the exact tilted solution at time T; the perturbation is either the
// given deterministic harmonics or a seeded random real field per selected
// component, scaled relative to the background v0 and R. Positivity of R
// is re-checked on the quadrature grid.
inline FluidFieldState perturb_background(const EulerContext& ctx,
                                          const HomogeneousEulerPoint& pt,
                                          double T,
                                          const PerturbationSpec& spec) {
  require(spec.amplitude >= 0.0, "perturb_background: amplitude must be >= 0");
  // v0^2 - v1^2 would cancel once the tilt dominates; rho is always exact.
  const double R0 = std::pow(pt.rho, 2.0 * ctx.p.rs);
  require(R0 > 0.0, "perturb_background: background state has no interior");
  FluidFieldState s = make_homogeneous_state(ctx, pt.v1, R0, T);

  auto add_pair = [&](std::vector<Complex>& c, int k, int p, int q,
                      Complex amp) {
    if (p == 0 && q == 0) {
      require(std::abs(amp.imag()) == 0.0,
              "perturb_background: a (p,q) = (0,0) harmonic must be real");
      c[ctx.basis.position(k, 0, 0)] += amp;
      return;
    }
    c[ctx.basis.position(k, p, q)] += amp;
    c[ctx.basis.position(k, -p, -q)] += std::conj(amp);
  };

  if (!spec.harmonics.empty()) {
    for (const auto& h : spec.harmonics) {
      require(h.field >= 0 && h.field <= 3,
              "perturb_background: harmonic field index must be 0..3");
      auto& c = h.field == 3 ? s.R : s.v[static_cast<std::size_t>(h.field)];
      add_pair(c, h.k, h.p, h.q, h.amp);
    }
  } else if (spec.amplitude > 0.0) {
    std::mt19937_64 rng(spec.seed);
    const int kmax = spec.kmax < 0 ? ctx.basis.L : spec.kmax;
    if (spec.on_velocity) {
      const double scale = spec.amplitude * pt.v0;
      for (auto& c : s.v) {
        const auto f = random_real_field(ctx.basis, rng, scale, spec.kmin,
                                         kmax);
        for (std::size_t n = 0; n < c.size(); ++n) c[n] += f[n];
      }
    }
    if (spec.on_density) {
      const auto f = random_real_field(ctx.basis, rng, spec.amplitude * R0,
                                       spec.kmin, kmax);
      for (std::size_t n = 0; n < s.R.size(); ++n) s.R[n] += f[n];
    }
  }

  const auto Rg = ctx.alg.to_grid(s.R);
  double rmin = Rg.empty() ? 0.0 : Rg[0];
  for (double r : Rg) rmin = std::min(rmin, r);
  require(rmin > 0.0,
          "perturb_background: requested amplitude drives rho^{2rs} to ",
          rmin, " at a quadrature node");
  return s;
}

// Background-subtracted ("hatted") coefficients at the state's own time:
// the reference homogeneous solution occupies the degree-zero mode only.
inline FluidFieldState hatted_state(const EulerContext& ctx,
                                    const FluidFieldState& s,
                                    const HomogeneousEulerPoint& ref) {
  const double R0 = std::pow(ref.rho, 2.0 * ctx.p.rs);
  FluidFieldState h = s;
  h.v[0][0] -= ref.v1 * ctx.const_coeff;
  h.R[0] -= R0 * ctx.const_coeff;
  return h;
}

// First integrals of the spatially constant flow: a v_1 and
// rho^{1-2rs} a^3 v0 (the latter written through R^B with
// B = (1-2rs)/(2rs)). Exposed for drift tests against exact conservation.
inline std::array<double, 2> homogeneous_invariants(const EulerContext& ctx,
                                                    const FluidFieldState& s) {
  const double R = homogeneous_value(ctx, s.R);
  require(R > 0.0, "homogeneous_invariants: R must be positive, got ", R);
  double vsq = 0.0;
  for (const auto& c : s.v) {
    const double vi = homogeneous_value(ctx, c);
    vsq += vi * vi;
  }
  const double v0 = std::sqrt(vsq + R);
  const double B = 0.5 * ctx.p.one_minus_two_rs / ctx.p.rs;
  const double a = ctx.bg.a(s.t);
  return {a * homogeneous_value(ctx, s.v[0]), std::pow(R, B) * a * a * a * v0};
}

}  // namespace tiltlab
