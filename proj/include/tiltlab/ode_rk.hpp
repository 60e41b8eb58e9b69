#pragma once

// Runge-Kutta integrators over flat state vectors, templated on the scalar
// type (double for field evolutions, long double where the extra mantissa
// matters, e.g. strongly expanding homogeneous flows):
//   * integrate_dopri5: adaptive 5(4) pair with PI step-size control and
//     quartic dense output, supporting forward and backward spans and an
//     accepted-step hook that may modify the state (constraint projection);
//   * integrate_rk4: classical fixed-step scheme for method-of-lines PDE
//     evolution, with a per-step hook (spectral filtering).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "tiltlab/common.hpp"

namespace tiltlab {

template <class Scalar>
struct AdaptiveOptions {
  Scalar rtol = Scalar(1e-10);
  Scalar atol = Scalar(1e-12);
  Scalar dt_init = Scalar(0);  // 0: pick from the span
  Scalar dt_max = Scalar(0);   // 0: unbounded
  long max_steps = 2000000;
  bool store_dense = true;
};

// One accepted step's dense-output polynomial (quartic in the step fraction).
template <class Scalar>
struct DenseSegment {
  Scalar t0 = 0, h = 0;
  std::array<std::vector<Scalar>, 5> rcont;
};

template <class Scalar>
struct DenseSolution {
  std::vector<DenseSegment<Scalar>> segments;
  Scalar t_begin = 0, t_end = 0;
  std::vector<Scalar> y_end;
  long n_accepted = 0, n_rejected = 0, n_rhs = 0;

  bool forward() const { return t_end >= t_begin; }

  // State at time t (clamped to the covered span's endpoints' tolerance).
  void eval(Scalar t, std::vector<Scalar>& out) const {
    require(!segments.empty(), "DenseSolution::eval: empty solution");
    const bool fwd = forward();
    Scalar lo = fwd ? t_begin : t_end, hi = fwd ? t_end : t_begin;
    require(t >= lo - Scalar(1e-9) && t <= hi + Scalar(1e-9),
            "DenseSolution::eval: time outside covered span");
    // Binary search for the segment containing t.
    std::size_t a = 0, b = segments.size() - 1;
    while (a < b) {
      std::size_t mid = (a + b) / 2;
      Scalar seg_end = segments[mid].t0 + segments[mid].h;
      bool before = fwd ? (t <= seg_end) : (t >= seg_end);
      if (before)
        b = mid;
      else
        a = mid + 1;
    }
    const auto& seg = segments[a];
    Scalar th = (t - seg.t0) / seg.h;
    th = std::min(Scalar(1), std::max(Scalar(0), th));
    const Scalar th1 = Scalar(1) - th;
    const std::size_t n = seg.rcont[0].size();
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = seg.rcont[0][i] +
               th * (seg.rcont[1][i] +
                     th1 * (seg.rcont[2][i] +
                            th * (seg.rcont[3][i] + th1 * seg.rcont[4][i])));
    }
  }

  std::vector<Scalar> at(Scalar t) const {
    std::vector<Scalar> out;
    eval(t, out);
    return out;
  }
};

namespace detail {
template <class Scalar>
inline Scalar rat(long long n, long long d) {
  return Scalar(static_cast<double>(n)) / Scalar(static_cast<double>(d));
}
}  // namespace detail

// Dormand-Prince 5(4) with FSAL and Hairer's quartic dense output.
// `rhs(t, y, dydt)`; `on_accept(t, y)` runs after each accepted step and may
// modify y (return true if it did, which re-primes the FSAL derivative).
template <class Scalar, class RHS>
DenseSolution<Scalar> integrate_dopri5(
    RHS&& rhs, std::vector<Scalar> y, Scalar t0, Scalar t1,
    const AdaptiveOptions<Scalar>& opt = {},
    const std::function<bool(Scalar, std::vector<Scalar>&)>& on_accept = {}) {
  using detail::rat;
  const std::size_t n = y.size();
  require(n > 0, "integrate_dopri5: empty state");
  require(t1 != t0, "integrate_dopri5: empty time span");
  const Scalar dir = (t1 > t0) ? Scalar(1) : Scalar(-1);

  static const Scalar c2 = rat<Scalar>(1, 5), c3 = rat<Scalar>(3, 10),
                      c4 = rat<Scalar>(4, 5), c5 = rat<Scalar>(8, 9);
  static const Scalar a21 = rat<Scalar>(1, 5);
  static const Scalar a31 = rat<Scalar>(3, 40), a32 = rat<Scalar>(9, 40);
  static const Scalar a41 = rat<Scalar>(44, 45), a42 = rat<Scalar>(-56, 15),
                      a43 = rat<Scalar>(32, 9);
  static const Scalar a51 = rat<Scalar>(19372, 6561),
                      a52 = rat<Scalar>(-25360, 2187),
                      a53 = rat<Scalar>(64448, 6561),
                      a54 = rat<Scalar>(-212, 729);
  static const Scalar a61 = rat<Scalar>(9017, 3168),
                      a62 = rat<Scalar>(-355, 33),
                      a63 = rat<Scalar>(46732, 5247),
                      a64 = rat<Scalar>(49, 176),
                      a65 = rat<Scalar>(-5103, 18656);
  static const Scalar a71 = rat<Scalar>(35, 384), a73 = rat<Scalar>(500, 1113),
                      a74 = rat<Scalar>(125, 192),
                      a75 = rat<Scalar>(-2187, 6784),
                      a76 = rat<Scalar>(11, 84);
  // b5 - b4 (error coefficients).
  static const Scalar e1 = rat<Scalar>(71, 57600), e3 = rat<Scalar>(-71, 16695),
                      e4 = rat<Scalar>(71, 1920),
                      e5 = rat<Scalar>(-17253, 339200),
                      e6 = rat<Scalar>(22, 525), e7 = rat<Scalar>(-1, 40);
  // Dense-output weights.
  static const Scalar d1 = rat<Scalar>(-12715105075LL, 11282082432LL),
                      d3 = rat<Scalar>(87487479700LL, 32700410799LL),
                      d4 = rat<Scalar>(-10690763975LL, 1880347072LL),
                      d5 = rat<Scalar>(701980252875LL, 199316789632LL),
                      d6 = rat<Scalar>(-1453857185LL, 822651844LL),
                      d7 = rat<Scalar>(69997945LL, 29380423LL);

  DenseSolution<Scalar> sol;
  sol.t_begin = t0;
  sol.t_end = t1;

  std::vector<Scalar> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), ytmp(n),
      ynew(n);
  rhs(t0, y, k1);
  sol.n_rhs++;

  Scalar span = std::abs(t1 - t0);
  Scalar h = (opt.dt_init > Scalar(0)) ? opt.dt_init : span / Scalar(100);
  if (opt.dt_max > Scalar(0)) h = std::min(h, opt.dt_max);
  h = std::min(h, span);
  h *= dir;

  Scalar t = t0;
  bool last_rejected = false;
  for (long step = 0; step < opt.max_steps; ++step) {
    if (dir * (t - t1) >= Scalar(0)) break;
    if (dir * (t + h - t1) > Scalar(0)) h = t1 - t;
    require(std::abs(h) > std::abs(t) * Scalar(1e-18) + Scalar(1e-300),
            "integrate_dopri5: step size underflow at t=", static_cast<double>(t));

    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * a21 * k1[i];
    rhs(t + c2 * h, ytmp, k2);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
    rhs(t + c3 * h, ytmp, k3);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
    rhs(t + c4 * h, ytmp, k4);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] =
          y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
    rhs(t + c5 * h, ytmp, k5);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] +
                            a64 * k4[i] + a65 * k5[i]);
    rhs(t + h, ytmp, k6);
    for (std::size_t i = 0; i < n; ++i)
      ynew[i] = y[i] + h * (a71 * k1[i] + a73 * k3[i] + a74 * k4[i] +
                            a75 * k5[i] + a76 * k6[i]);
    rhs(t + h, ynew, k7);
    sol.n_rhs += 6;

    // Scaled RMS error estimate.
    Scalar err = Scalar(0);
    for (std::size_t i = 0; i < n; ++i) {
      Scalar ei = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] +
                       e6 * k6[i] + e7 * k7[i]);
      Scalar sc =
          opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      err += (ei / sc) * (ei / sc);
    }
    err = std::sqrt(err / Scalar(static_cast<double>(n)));

    if (err <= Scalar(1)) {
      if (opt.store_dense) {
        DenseSegment<Scalar> seg;
        seg.t0 = t;
        seg.h = h;
        for (auto& r : seg.rcont) r.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          Scalar ydiff = ynew[i] - y[i];
          Scalar bspl = h * k1[i] - ydiff;
          seg.rcont[0][i] = y[i];
          seg.rcont[1][i] = ydiff;
          seg.rcont[2][i] = bspl;
          seg.rcont[3][i] = ydiff - h * k7[i] - bspl;
          seg.rcont[4][i] = h * (d1 * k1[i] + d3 * k3[i] + d4 * k4[i] +
                                 d5 * k5[i] + d6 * k6[i] + d7 * k7[i]);
        }
        sol.segments.push_back(std::move(seg));
      }
      t += h;
      y.swap(ynew);
      std::swap(k1, k7);  // FSAL
      sol.n_accepted++;
      if (on_accept) {
        if (on_accept(t, y)) {
          rhs(t, y, k1);  // state was modified; re-prime the derivative
          sol.n_rhs++;
        }
      }
      Scalar fac = Scalar(0.9) *
                   std::pow(std::max(err, Scalar(1e-30)), Scalar(-0.2));
      fac = std::min(last_rejected ? Scalar(1) : Scalar(10),
                     std::max(Scalar(0.2), fac));
      h *= fac;
      if (opt.dt_max > Scalar(0) && std::abs(h) > opt.dt_max)
        h = dir * opt.dt_max;
      last_rejected = false;
    } else {
      Scalar fac = std::max(Scalar(0.1),
                            Scalar(0.9) * std::pow(err, Scalar(-0.2)));
      h *= fac;
      sol.n_rejected++;
      last_rejected = true;
    }
    if (dir * (t - t1) >= Scalar(0)) break;
  }
  require(dir * (t - t1) >= Scalar(0),
          "integrate_dopri5: exceeded max_steps=", opt.max_steps,
          " before reaching the end of the span");
  sol.y_end = y;
  return sol;
}

// Classical fixed-step RK4. `hook(step_index, t_after, y)` runs after every
// step and may modify y in place.
template <class Scalar, class RHS>
void integrate_rk4(
    RHS&& rhs, std::vector<Scalar>& y, Scalar t0, Scalar t1, long n_steps,
    const std::function<void(long, Scalar, std::vector<Scalar>&)>& hook = {}) {
  require(n_steps > 0, "integrate_rk4: need a positive step count");
  const std::size_t n = y.size();
  const Scalar h = (t1 - t0) / Scalar(static_cast<double>(n_steps));
  std::vector<Scalar> k1(n), k2(n), k3(n), k4(n), ytmp(n);
  Scalar t = t0;
  for (long s = 0; s < n_steps; ++s) {
    rhs(t, y, k1);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + Scalar(0.5) * h * k1[i];
    rhs(t + Scalar(0.5) * h, ytmp, k2);
    for (std::size_t i = 0; i < n; ++i)
      ytmp[i] = y[i] + Scalar(0.5) * h * k2[i];
    rhs(t + Scalar(0.5) * h, ytmp, k3);
    for (std::size_t i = 0; i < n; ++i) ytmp[i] = y[i] + h * k3[i];
    rhs(t + h, ytmp, k4);
    for (std::size_t i = 0; i < n; ++i)
      y[i] += h / Scalar(6) * (k1[i] + Scalar(2) * k2[i] + Scalar(2) * k3[i] +
                               k4[i]);
    t = t0 + Scalar(static_cast<double>(s + 1)) * h;
    if (hook) hook(s, t, y);
  }
}

}  // namespace tiltlab
