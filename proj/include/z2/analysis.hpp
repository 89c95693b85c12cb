#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "z2/parallel.hpp"
#include "z2/samplers.hpp"
#include "z2/schedule.hpp"
#include "z2/scorefield.hpp"
#include "z2/solver.hpp"
#include "z2/types.hpp"

namespace z2 {

inline constexpr double kMinFitRSquared = 0.95;
inline constexpr int kMinFitPoints = 4;

/// Least-squares fit of log(error) against log(h).
struct OrderFit {
  std::vector<double> step_sizes;
  std::vector<double> errors;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  double r_squared = std::numeric_limits<double>::quiet_NaN();
  int dropped_points = 0;  ///< largest-h points excluded as pre-asymptotic
  bool degenerate = false; ///< errors at machine noise; slope is meaningless
  std::string note;

  bool well_conditioned(double min_r2 = kMinFitRSquared) const { return !degenerate && r_squared >= min_r2; }
  bool slope_within(double lo, double hi) const { return well_conditioned() && slope >= lo && slope <= hi; }
};

namespace detail {

inline void least_squares(const std::vector<double>& h, const std::vector<double>& e, std::size_t first, OrderFit& fit) {
  const auto n = static_cast<double>(h.size() - first);
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = first; i < h.size(); ++i) {
    const double x = std::log(h[i]);
    const double y = std::log(e[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
  }
  const double cov = sxy - sx * sy / n;
  const double var_x = sxx - sx * sx / n;
  const double var_y = syy - sy * sy / n;
  fit.slope = cov / var_x;
  fit.intercept = (sy - fit.slope * sx) / n;
  fit.r_squared = var_y > 0 ? std::clamp(cov * cov / (var_x * var_y), 0.0, 1.0) : 1.0;
}

}  // namespace detail

/// Fits the convergence order. Points are ordered by decreasing h. Errors at or below
/// `noise_floor` mark the fit degenerate. When the full fit has r^2 below the threshold and
/// at least four points would remain, the two largest-h points are dropped and the fit is redone.
inline OrderFit fit_order(std::vector<double> h, std::vector<double> errors, bool allow_drop = true,
                          double noise_floor = 1e-14) {
  require(h.size() == errors.size(), "step sizes and errors differ in length");
  require(static_cast<int>(h.size()) >= kMinFitPoints, "an order fit needs at least 4 step sizes");
  std::vector<std::size_t> order(h.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return h[a] > h[b]; });
  OrderFit fit;
  for (auto i : order) {
    require(h[i] > 0 && std::isfinite(h[i]), "step sizes must be positive");
    fit.step_sizes.push_back(h[i]);
    fit.errors.push_back(errors[i]);
  }
  for (std::size_t i = 1; i < fit.step_sizes.size(); ++i)
    require(fit.step_sizes[i] < fit.step_sizes[i - 1], "step sizes must be distinct");
  for (double e : fit.errors) {
    if (!std::isfinite(e) || e <= noise_floor) {
      fit.degenerate = true;
      fit.note = "errors at machine noise; fit rejected as degenerate";
      return fit;
    }
  }
  detail::least_squares(fit.step_sizes, fit.errors, 0, fit);
  if (allow_drop && fit.r_squared < kMinFitRSquared && static_cast<int>(fit.step_sizes.size()) - 2 >= kMinFitPoints) {
    OrderFit trimmed = fit;
    detail::least_squares(fit.step_sizes, fit.errors, 2, trimmed);
    trimmed.dropped_points = 2;
    trimmed.note = "two largest step sizes dropped as pre-asymptotic";
    fit = std::move(trimmed);
  }
  if (fit.r_squared < kMinFitRSquared && fit.note.empty()) fit.note = "ill-conditioned fit (r^2 below 0.95)";
  return fit;
}

/// Spatial drift of one explicit zigzag from x_t: inversion with the prediction taken at
/// the moved point x_{t-1}, minus inversion with the prediction taken at the anchor x_t.
template <PredictionField Field>
Vector measure_tau(const Field& field, const Schedule& s, const LatentState& x, double gamma1, double gamma2) {
  require(x.t >= 1 && x.t <= s.steps(), "tau is defined for 1 <= t <= T");
  const auto c = coefficients(s, x.t);
  const auto level = s.level(x.t);
  const auto anchor = field.predict(level, x.x, gamma1);
  const auto moved = forward_step(c, x, anchor.guided);
  const auto at_moved = field.predict(level, moved.x, gamma2);
  return inversion_mismatch(c, moved, at_moved.guided, anchor.at_scale(gamma2));
}

/// Leading-order drift -h^2 J_uncond v(x, gamma1), in the Euler form where h = C = -B.
template <DifferentiableField Field>
Vector leading_order_tau(const Field& field, const Schedule& s, const LatentState& x, double gamma1) {
  const auto c = coefficients(s, x.t);
  const auto level = s.level(x.t);
  const double h = c.C;
  return -h * h * (field.jacobian_uncond(level, x.x) * field.predict(level, x.x, gamma1).guided);
}

/// ||delta^t(x_t) - delta^{t+1}(x~_{t+1})||: the surrogate's discrepancy at step t.
template <PredictionField Field>
double measure_e_tss(const Field& field, const Schedule& s, const LatentState& x_t, const LatentState& x_tilde_prev) {
  if (x_tilde_prev.t != x_t.t + 1) throw ContractViolation("surrogate source must be the immediately preceding step");
  require(x_t.t >= 1 && x_tilde_prev.t <= s.steps(), "surrogate steps outside 1..T");
  const Vector now = field.predict(s.level(x_t.t), x_t.x, 0.0).delta_eps;
  const Vector cached = field.predict(s.level(x_tilde_prev.t), x_tilde_prev.x, 0.0).delta_eps;
  return (now - cached).norm();
}

/// Per-h medians of the surrogate error and of the local truncation error it induces.
struct SurrogateSweep {
  OrderFit e_tss;
  OrderFit lte;
};

struct SweepSpan {
  ScheduleKind kind = ScheduleKind::Flow;
  double lo = 0.2;
  double hi = 0.8;
};

namespace detail {

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty sample");
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

inline int steps_for(const SweepSpan& span, double h) {
  require(h > 0, "step sizes must be positive");
  return std::max(2, static_cast<int>(std::lround((span.hi - span.lo) / h)));
}

}  // namespace detail

/// Runs the cached sampler across the span for every h. At each zigzag step it measures
/// E_TSS and the one-step deviation from the same step fed the exact delta at x_t.
/// With `exact_surrogate` the trajectory itself uses the exact delta, so both vanish.
template <PredictionField Field>
SurrogateSweep surrogate_order_sweep(double gamma1, const Field& field, const SweepSpan& span,
                                     const std::vector<double>& h_list, const Vector& x_start,
                                     bool exact_surrogate = false) {
  require(static_cast<int>(h_list.size()) >= kMinFitPoints, "an order sweep needs at least 4 step sizes");
  std::vector<double> hs(h_list.size()), e_med(h_list.size()), lte_med(h_list.size());
  parallel_for(h_list.size(), [&](std::size_t k) {
    const int T = detail::steps_for(span, h_list[k]);
    const Schedule s = make_uniform_schedule(span.kind, T, span.lo, span.hi);
    const SamplerConfig cfg{Variant::ZSquared, gamma1, 0.0, 1, T - 1};
    const Sampler<Field> sampler(field, s, cfg);
    LatentState x{x_start, T};
    auto first = sampler.z2_step(x, {}, Phase::Warmup);
    SurrogateCache cache = std::move(first.cache);
    x = std::move(first.next);
    std::vector<double> errs, ltes;
    for (int t = T - 1; t >= 1; --t) {
      const SurrogateCache exact{field.predict(s.level(t), x.x, 0.0).delta_eps, t + 1};
      auto with_exact = sampler.z2_step(x, exact, Phase::Zigzag);
      auto with_cache = sampler.z2_step(x, exact_surrogate ? exact : cache, Phase::Zigzag);
      errs.push_back(*with_cache.diag.e_tss);
      ltes.push_back((with_cache.next.x - with_exact.next.x).norm());
      cache = std::move(with_cache.cache);
      x = std::move(with_cache.next);
    }
    hs[k] = (span.hi - span.lo) / T;
    e_med[k] = detail::median(errs);
    lte_med[k] = detail::median(ltes);
  });
  return {fit_order(hs, e_med), fit_order(hs, lte_med)};
}

template <PredictionField Field>
OrderFit lte_order_sweep(double gamma1, const Field& field, const SweepSpan& span, const std::vector<double>& h_list,
                         const Vector& x_start, bool exact_surrogate = false) {
  return surrogate_order_sweep(gamma1, field, span, h_list, x_start, exact_surrogate).lte;
}

/// Modified vector field v_uc + 2 g dv - h g J_v dv, with J_v = J_uc + g J_delta.
template <DifferentiableField Field>
Vector effective_field(const Field& field, const NoiseLevel& level, const Vector& x, double gamma1, double h) {
  const auto pred = field.predict(level, x, gamma1);
  const Matrix jv = field.jacobian_uncond(level, x) + gamma1 * field.jacobian_delta(level, x);
  return pred.eps_uncond + 2.0 * gamma1 * pred.delta_eps - h * gamma1 * (jv * pred.delta_eps);
}

template <DifferentiableField Field>
Vector effective_field(const Field& field, const Schedule& s, const Vector& x, int t, double gamma1, double h) {
  require(t >= 1 && t <= s.steps(), "evaluation step outside 1..T");
  return effective_field(field, s.level(t), x, gamma1, h);
}

struct BeaReport {
  OrderFit global;       ///< endpoint deviation from the fine flow of the effective field
  OrderFit step_defect;  ///< one-step deviation from an Euler step of the effective field
  double max_step_defect = 0.0;
};

/// Compares the cached sampler with an exact surrogate (Euler/Flow geometry) against the
/// effective field: globally via an RK4 flow at h/100 across the span, and locally via one
/// Euler step of the effective field from `x_start` at the span midpoint.
template <DifferentiableField Field>
BeaReport bea_agreement(double gamma1, const Field& field, const SweepSpan& span, const std::vector<double>& h_list,
                        const Vector& x_start) {
  require(span.kind == ScheduleKind::Flow, "backward error analysis is checked on the Euler/Flow geometry");
  require(static_cast<int>(h_list.size()) >= kMinFitPoints, "an order sweep needs at least 4 step sizes");
  std::vector<double> hs(h_list.size()), global(h_list.size()), local(h_list.size());
  parallel_for(h_list.size(), [&](std::size_t k) {
    const int T = detail::steps_for(span, h_list[k]);
    const double h = (span.hi - span.lo) / T;
    const Schedule s = make_uniform_flow(T, span.lo, span.hi);
    const Sampler<Field> sampler(field, s, {Variant::ImplicitZ, gamma1, 0.0, 0, T});
    LatentState x{x_start, T};
    for (int t = T; t >= 1; --t) x = sampler.implicit_zigzag_step(x).next;

    const auto rhs = [&](const Vector& y, double sigma) {
      return effective_field(field, NoiseLevel{ScheduleKind::Flow, sigma}, y, gamma1, h);
    };
    const int fine = 100 * T;
    const double dt = -(span.hi - span.lo) / fine;
    Vector y = x_start;
    for (int n = 0; n < fine; ++n) {
      const double sigma = span.hi + n * dt;
      const Vector k1 = rhs(y, sigma);
      const Vector k2 = rhs(y + 0.5 * dt * k1, sigma + 0.5 * dt);
      const Vector k3 = rhs(y + 0.5 * dt * k2, sigma + 0.5 * dt);
      const Vector k4 = rhs(y + dt * k3, sigma + dt);
      y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }

    const double mid = 0.5 * (span.lo + span.hi);
    const Schedule one = make_uniform_flow(1, mid - h, mid);
    const Sampler<Field> single(field, one, {Variant::ImplicitZ, gamma1, 0.0, 0, 1});
    const Vector stepped = single.implicit_zigzag_step({x_start, 1}).next.x;
    const Vector euler = x_start - h * effective_field(field, one.level(1), x_start, gamma1, h);

    hs[k] = h;
    global[k] = (x.x - y).norm();
    local[k] = (stepped - euler).norm();
  });
  BeaReport report{fit_order(hs, global), fit_order(hs, local), 0.0};
  report.max_step_defect = *std::max_element(local.begin(), local.end());
  return report;
}

/// cos(delta_t, delta_{t+1}) for every consecutive pair of steps, in step order.
/// Pairs involving a zero vector have no defined angle and come back empty.
inline std::vector<std::optional<double>> cosine_similarity_track(const TrajectoryRecord& record) {
  std::vector<std::optional<double>> out;
  for (std::size_t i = 1; i < record.per_step.size(); ++i) {
    const Vector& prev = record.per_step[i - 1].delta_eps;
    const Vector& cur = record.per_step[i].delta_eps;
    const double denom = prev.norm() * cur.norm();
    if (denom == 0.0 || prev.size() != cur.size()) {
      out.emplace_back();
    } else {
      out.emplace_back(std::clamp(prev.dot(cur) / denom, -1.0, 1.0));
    }
  }
  return out;
}

/// Desk-scale stand-in for alignment: data-space log density of the final state under the
/// conditional mixture.
inline double terminal_log_density(const MixtureField& field, const TrajectoryRecord& record) {
  require(!record.states.empty(), "empty trajectory");
  return field.conditional().log_density(record.states.back().x);
}

}  // namespace z2
