#pragma once

#include <cmath>
#include <string>

#include "z2/schedule.hpp"
#include "z2/types.hpp"

namespace z2 {

inline constexpr double kDualityTolerance = 1e-12;

/// Affine step coefficients for the transition t -> t-1.
///
/// Forward:  x_{t-1} = A x_t + B pred
/// Inverse:  x_t     = A^{-1} x_{t-1} + C pred
struct SolverCoefficients {
  double A = 1.0;
  double B = 0.0;
  double C = 0.0;
  int step = 0;
};

struct LatentState {
  Vector x;
  int t = 0;
};

/// Residuals of the two duality identities; both vanish for a consistent triple.
struct DualityResiduals {
  double inverse_form = 0.0;  ///< A^{-1} B + C
  double forward_form = 0.0;  ///< A C + B

  double worst() const { return std::max(std::abs(inverse_form), std::abs(forward_form)); }
  bool holds(double tol = kDualityTolerance) const { return worst() <= tol; }
};

inline DualityResiduals check_duality(const SolverCoefficients& c) {
  return {c.B / c.A + c.C, c.A * c.C + c.B};
}

namespace detail {

inline SolverCoefficients finish(SolverCoefficients c) {
  if (!std::isfinite(c.A) || !std::isfinite(c.B) || !std::isfinite(c.C) || c.A == 0.0)
    throw InvalidArgument("degenerate solver coefficients at step " + std::to_string(c.step));
  const auto r = check_duality(c);
  if (!r.holds())
    throw DualityViolation("inversion formula disagrees with forward step at step " +
                           std::to_string(c.step) + " (residual " + std::to_string(r.worst()) + ")");
  return c;
}

}  // namespace detail

/// DDIM step between cumulative signal fractions. C comes from the time-swapped inversion.
inline SolverCoefficients vp_coefficients(double alpha_t, double alpha_prev, int step) {
  SolverCoefficients c;
  c.step = step;
  c.A = std::sqrt(alpha_prev / alpha_t);
  c.B = std::sqrt(1.0 - alpha_prev) - c.A * std::sqrt(1.0 - alpha_t);
  const double inv_a = std::sqrt(alpha_t / alpha_prev);
  c.C = std::sqrt(1.0 - alpha_t) - inv_a * std::sqrt(1.0 - alpha_prev);
  return detail::finish(c);
}

/// Euler step on a velocity field; inversion runs the same step in reverse.
inline SolverCoefficients flow_coefficients(double sigma_t, double sigma_prev, int step) {
  SolverCoefficients c;
  c.step = step;
  c.A = 1.0;
  c.B = sigma_prev - sigma_t;
  c.C = sigma_t - sigma_prev;
  return detail::finish(c);
}

/// Rotation by `delta_theta` = theta_{t-1} - theta_t; inversion rotates back.
inline SolverCoefficients spherical_coefficients(double delta_theta, int step) {
  SolverCoefficients c;
  c.step = step;
  c.A = std::cos(delta_theta);
  c.B = std::sin(delta_theta);
  c.C = -std::sin(delta_theta) / std::cos(delta_theta);
  return detail::finish(c);
}

inline SolverCoefficients coefficients(const Schedule& s, int t) {
  if (t < 1 || t > s.steps())
    throw InvalidArgument("coefficient step " + std::to_string(t) + " outside 1.." + std::to_string(s.steps()));
  const double cur = s.value(t);
  const double prev = s.value(t - 1);
  switch (s.kind()) {
    case ScheduleKind::VP: return vp_coefficients(cur, prev, t);
    case ScheduleKind::Flow: return flow_coefficients(cur, prev, t);
    case ScheduleKind::Spherical: return spherical_coefficients(prev - cur, t);
  }
  throw InvalidArgument("unknown schedule kind");
}

namespace detail {

inline void check_operands(const Vector& x, const Vector& pred) {
  if (x.size() != pred.size())
    throw InvalidArgument("dimension mismatch: state has " + std::to_string(x.size()) +
                          " components, prediction has " + std::to_string(pred.size()));
  if (!x.allFinite() || !pred.allFinite()) throw InvalidArgument("non-finite solver input");
}

}  // namespace detail

/// Phi: x_{t-1} = A x_t + B pred.
inline LatentState forward_step(const SolverCoefficients& c, const LatentState& x, const Vector& pred) {
  if (x.t != c.step)
    throw ContractViolation("forward step " + std::to_string(c.step) + " applied to state at t=" +
                            std::to_string(x.t));
  detail::check_operands(x.x, pred);
  return {c.A * x.x + c.B * pred, x.t - 1};
}

/// Psi: x_t = A^{-1} x_{t-1} + C pred.
inline LatentState inverse_step(const SolverCoefficients& c, const LatentState& x, const Vector& pred) {
  if (x.t != c.step - 1)
    throw ContractViolation("inverse step " + std::to_string(c.step) + " applied to state at t=" +
                            std::to_string(x.t));
  if (c.A == 0.0) throw InvalidArgument("inverse step requires A != 0");
  detail::check_operands(x.x, pred);
  return {x.x / c.A + c.C * pred, x.t + 1};
}

/// Difference between inverting with a prediction taken at the moved point and with one
/// taken at the anchor. Identical arguments give an exactly zero vector.
inline Vector inversion_mismatch(const SolverCoefficients& c, const LatentState& moved, const Vector& pred_moved,
                                 const Vector& pred_anchor) {
  return inverse_step(c, moved, pred_moved).x - inverse_step(c, moved, pred_anchor).x;
}

}  // namespace z2
