#pragma once

// Parameter algebra for a relativistic fluid with linear equation of state
// p = cs2 * rho evolving in a universe with positive cosmological constant.
// Everything downstream (background flows, field evolutions, diagnostics)
// reads cs2, the derived exponents rs and As, and the expansion rate H from
// here, so there is exactly one source of truth for them.

#include <cmath>
#include <map>
#include <string>

#include "tiltlab/common.hpp"

namespace tiltlab {

// Late-time phenomenology classes for the fluid, ordered by cs2.
enum class Regime {
  orthogonal,                // cs2 < 1/3: velocity realigns with the expansion
  radiation,                 // cs2 = 1/3: marginal case, tilt neither grows nor decays
  extreme_tilt_restricted,   // 1/3 < cs2 < 3/7: tilt grows; restricted parameter window
  extreme_tilt_beyond,       // 3/7 <= cs2 < 1: tilt grows; beyond the restricted window
};

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::orthogonal: return "orthogonal";
    case Regime::radiation: return "radiation";
    case Regime::extreme_tilt_restricted: return "extreme_tilt_restricted";
    case Regime::extreme_tilt_beyond: return "extreme_tilt_beyond";
  }
  return "unknown";
}

struct SoundSpeedParams {
  double cs2 = 0.0;        // squared sound speed, in (0,1)
  double rs = 0.0;         // cs2/(1+cs2), the density-renormalization weight
  double As = 0.0;         // (3*cs2-1)/(1-cs2), the tilt growth coefficient
  double Lambda = 0.0;     // cosmological constant, > 0
  double H = 0.0;          // expansion rate, H^2 = Lambda/3
  // 1 - 2*rs evaluated as (1-cs2)/(1+cs2). The textbook subtraction 1 - 2*rs
  // is catastrophically ill-conditioned as cs2 -> 1 (rs -> 1/2); every
  // downstream division by 1-2*rs goes through this field instead.
  double one_minus_two_rs = 0.0;
};

inline SoundSpeedParams derive_params(double cs2, double Lambda) {
  require(cs2 > 0.0 && cs2 < 1.0,
          "derive_params: cs2 must lie strictly inside (0,1), got ", cs2);
  require(Lambda > 0.0, "derive_params: Lambda must be positive, got ", Lambda);
  SoundSpeedParams p;
  p.cs2 = cs2;
  p.rs = cs2 / (1.0 + cs2);
  p.As = (3.0 * cs2 - 1.0) / (1.0 - cs2);
  p.Lambda = Lambda;
  p.H = std::sqrt(Lambda / 3.0);
  p.one_minus_two_rs = (1.0 - cs2) / (1.0 + cs2);
  return p;
}

// Boundaries of the regime classification (exact binary64 representatives).
inline constexpr double kRegimeRadiationCs2 = 1.0 / 3.0;
inline constexpr double kRegimeRestrictedUpperCs2 = 3.0 / 7.0;

inline Regime classify_regime(double cs2) {
  require(cs2 > 0.0 && cs2 < 1.0,
          "classify_regime: cs2 must lie strictly inside (0,1), got ", cs2);
  if (cs2 < kRegimeRadiationCs2) return Regime::orthogonal;
  if (cs2 == kRegimeRadiationCs2) return Regime::radiation;
  if (cs2 < kRegimeRestrictedUpperCs2) return Regime::extreme_tilt_restricted;
  return Regime::extreme_tilt_beyond;
}

// Predicted late-time exponential rates. Each entry is the dimensionless
// coefficient nu in the law  quantity ~ exp(nu * H * t); the coefficients are
// rational functions of cs2 and are evaluated on demand from the stored
// parameters, so fitted rates in tests are compared against closed forms
// rather than against cached floats.
class RateTable {
 public:
  explicit RateTable(const SoundSpeedParams& p) : p_(p) {}

  // Perturbation (hatted-variable) decay coefficients.
  double v_hat() const { return -1.0; }                       // spatial velocity components
  double rho_hat_2rs() const {                                // density perturbation, rho^{2rs} form
    return -4.0 * p_.cs2 / (1.0 - p_.cs2);                    //   4*rs/(1-2*rs) = 4*cs2/(1-cs2)
  }
  double k_hat() const { return -2.0; }                       // curvature perturbation
  double n_hat() const { return -2.0; }                       // lapse perturbation
  double e_hat() const { return -1.0; }                       // frame perturbation

  // Homogeneous background coefficients.
  double rho_tilde_bg() const {                               // background renormalized density
    return -2.0 * (1.0 + p_.cs2) / (1.0 - p_.cs2);
  }
  double v_tilde_bg() const { return -1.0; }                  // background renormalized tilt
  double G_off() const { return -0.5; }                       // metric-scale offset from pure expansion
  double tilt_slope() const { return p_.As; }                 // growth of cosh(theta) for the tilt angle
  double u_null() const { return p_.As; }                     // approach rate of u toward the null cone

  const SoundSpeedParams& params() const { return p_; }

  // Exponent in inverse-time units for a named entry: coefficient * H.
  double exponent(const std::string& name) const {
    auto m = as_map();
    auto it = m.find(name);
    require(it != m.end(), "RateTable: unknown entry '", name, "'");
    return it->second * p_.H;
  }

  std::map<std::string, double> as_map() const {
    return {
        {"v_hat", v_hat()},
        {"rho_hat_2rs", rho_hat_2rs()},
        {"k_hat", k_hat()},
        {"n_hat", n_hat()},
        {"e_hat", e_hat()},
        {"rho_tilde_bg", rho_tilde_bg()},
        {"v_tilde_bg", v_tilde_bg()},
        {"G_off", G_off()},
        {"tilt_slope", tilt_slope()},
        {"u_null", u_null()},
    };
  }

 private:
  SoundSpeedParams p_;
};

inline RateTable rate_table(const SoundSpeedParams& p) { return RateTable(p); }

}  // namespace tiltlab
