#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "z2/schedule.hpp"
#include "z2/types.hpp"

namespace z2 {

inline constexpr double kWeightTolerance = 1e-12;

struct GaussianComponent {
  Vector mean;
  double var = 1.0;
  double weight = 1.0;
};

/// Posterior moments of one diffused mixture at a single point.
///
/// `eps` and `x0` are E[eps | x] and E[x0 | x]; the Jacobians are filled only on request.
struct Posterior {
  Vector eps;
  Vector x0;
  Matrix eps_jacobian;
  Matrix x0_jacobian;
  double log_density = 0.0;
};

/// Isotropic Gaussian mixture in data space, diffused analytically under any NoiseLevel.
class GaussianMixture {
 public:
  explicit GaussianMixture(std::vector<GaussianComponent> components) : components_(std::move(components)) {
    require(!components_.empty(), "a mixture needs at least one component");
    const auto d = components_.front().mean.size();
    require(d >= 1, "component dimension must be >= 1");
    double total = 0.0;
    for (const auto& c : components_) {
      require(c.mean.size() == d, "all components must share one dimension");
      require(c.mean.allFinite(), "component means must be finite");
      require(c.var > 0.0 && std::isfinite(c.var), "component variance must be positive");
      require(c.weight > 0.0 && c.weight <= 1.0, "component weight must lie in (0, 1]");
      total += c.weight;
    }
    require(std::abs(total - 1.0) <= kWeightTolerance, "mixture weights must sum to 1");
  }

  static GaussianMixture single(Vector mean, double var) { return GaussianMixture({{std::move(mean), var, 1.0}}); }

  int dim() const { return static_cast<int>(components_.front().mean.size()); }
  const std::vector<GaussianComponent>& components() const { return components_; }

  /// Data-space log density.
  double log_density(const Vector& x) const { return posterior_at(1.0, 0.0, x, false).log_density; }

  Posterior posterior(const NoiseLevel& level, const Vector& x, bool with_jacobian = false) const {
    return posterior_at(level.signal(), level.noise(), x, with_jacobian);
  }

  /// Marginal of x = a x0 + b eps is a mixture of N(a mu_i, (a^2 s_i^2 + b^2) I).
  Posterior posterior_at(double a, double b, const Vector& x, bool with_jacobian) const {
    if (x.size() != dim()) throw InvalidArgument("point dimension does not match mixture");
    if (!x.allFinite()) throw InvalidArgument("non-finite evaluation point");
    const auto n = components_.size();
    const double d = static_cast<double>(dim());

    std::vector<double> log_r(n);
    std::vector<double> marg_var(n);
    std::vector<Vector> resid(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = components_[i];
      marg_var[i] = a * a * c.var + b * b;
      if (!(marg_var[i] > 0.0)) throw InvalidArgument("diffused component variance is not positive");
      resid[i] = x - a * c.mean;
      log_r[i] = std::log(c.weight) - 0.5 * d * std::log(2.0 * std::numbers::pi * marg_var[i]) -
                 0.5 * resid[i].squaredNorm() / marg_var[i];
    }
    const double peak = *std::max_element(log_r.begin(), log_r.end());
    double norm = 0.0;
    for (double lr : log_r) norm += std::exp(lr - peak);
    const double log_norm = peak + std::log(norm);

    Posterior out;
    out.log_density = log_norm;
    out.eps = Vector::Zero(dim());
    out.x0 = Vector::Zero(dim());
    std::vector<double> r(n);
    std::vector<Vector> eps_i(n), x0_i(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = std::exp(log_r[i] - log_norm);
      eps_i[i] = (b / marg_var[i]) * resid[i];
      x0_i[i] = components_[i].mean + (a * components_[i].var / marg_var[i]) * resid[i];
      out.eps += r[i] * eps_i[i];
      out.x0 += r[i] * x0_i[i];
    }
    if (!with_jacobian) return out;

    // d r_i / dx = r_i (g_i - g_bar) with g_i = -resid_i / V_i the component score.
    Vector score_bar = Vector::Zero(dim());
    for (std::size_t i = 0; i < n; ++i) score_bar -= r[i] * resid[i] / marg_var[i];
    out.eps_jacobian = Matrix::Zero(dim(), dim());
    out.x0_jacobian = Matrix::Zero(dim(), dim());
    for (std::size_t i = 0; i < n; ++i) {
      const Vector dlog_r = -resid[i] / marg_var[i] - score_bar;
      out.eps_jacobian.diagonal().array() += r[i] * b / marg_var[i];
      out.x0_jacobian.diagonal().array() += r[i] * a * components_[i].var / marg_var[i];
      out.eps_jacobian += r[i] * eps_i[i] * dlog_r.transpose();
      out.x0_jacobian += r[i] * x0_i[i] * dlog_r.transpose();
    }
    return out;
  }

 private:
  std::vector<GaussianComponent> components_;
};

/// Minimum-MSE noise prediction E[eps | x_t] of the diffused mixture.
inline Vector exact_epsilon(const GaussianMixture& mix, const NoiseLevel& level, const Vector& x) {
  return mix.posterior(level, x).eps;
}

inline Vector exact_epsilon(const GaussianMixture& mix, const Schedule& s, const Vector& x, int t) {
  require(t >= 1 && t <= s.steps(), "evaluation step outside 1..T");
  return exact_epsilon(mix, s.level(t), x);
}

/// Prediction in the geometry's native parameterization: eps for VP, dx/dsigma for Flow,
/// dx/dtheta for Spherical. These are exactly what the matching affine step consumes.
inline Vector native_prediction(const Posterior& p, const NoiseLevel& level) {
  switch (level.kind) {
    case ScheduleKind::VP: return p.eps;
    case ScheduleKind::Flow: return p.eps - p.x0;
    case ScheduleKind::Spherical: return level.signal() * p.eps - level.noise() * p.x0;
  }
  return p.eps;
}

inline Matrix native_jacobian(const Posterior& p, const NoiseLevel& level) {
  switch (level.kind) {
    case ScheduleKind::VP: return p.eps_jacobian;
    case ScheduleKind::Flow: return p.eps_jacobian - p.x0_jacobian;
    case ScheduleKind::Spherical: return level.signal() * p.eps_jacobian - level.noise() * p.x0_jacobian;
  }
  return p.eps_jacobian;
}

/// Jacobian of the native prediction at (x, t).
inline Matrix jacobian(const GaussianMixture& mix, const Schedule& s, const Vector& x, int t) {
  require(t >= 1 && t <= s.steps(), "evaluation step outside 1..T");
  const auto level = s.level(t);
  return native_jacobian(mix.posterior(level, x, true), level);
}

/// Converts an eps-prediction to the Flow or Spherical velocity via the x0 estimate
/// (x - noise * eps) / signal. VP has no velocity form and is rejected, as is the
/// pure-noise end where the x0 estimate is not identifiable.
inline Vector epsilon_to_velocity(const Vector& eps, const Vector& x, const NoiseLevel& level) {
  require(eps.size() == x.size(), "dimension mismatch in velocity conversion");
  if (level.kind == ScheduleKind::VP) throw InvalidArgument("VP schedules use eps-prediction; no velocity form");
  const double a = level.signal();
  const double b = level.noise();
  require(a != 0.0, "velocity conversion undefined where the signal coefficient vanishes");
  const Vector x0 = (x - b * eps) / a;
  if (level.kind == ScheduleKind::Flow) return eps - x0;
  return a * eps - b * x0;
}

inline Vector velocity_to_epsilon(const Vector& v, const Vector& x, const NoiseLevel& level) {
  require(v.size() == x.size(), "dimension mismatch in velocity conversion");
  if (level.kind == ScheduleKind::VP) throw InvalidArgument("VP schedules use eps-prediction; no velocity form");
  // Flow: v = (eps - x) / (1 - sigma). Spherical: v = (eps - sin(theta) x) / cos(theta).
  return level.signal() * v + (level.kind == ScheduleKind::Flow ? 1.0 : level.noise()) * x;
}

inline Vector epsilon_to_velocity(const Vector& eps, const Vector& x, const Schedule& s, int t) {
  return epsilon_to_velocity(eps, x, s.level(t));
}

/// Unconditional / conditional prediction pair combined at a guidance scale.
struct GuidedPrediction {
  Vector eps_uncond;
  Vector eps_cond;
  Vector delta_eps;
  double gamma = 0.0;
  Vector guided;

  static GuidedPrediction combine(Vector uncond, Vector cond, double gamma) {
    require(uncond.size() == cond.size(), "conditional and unconditional predictions differ in size");
    GuidedPrediction p;
    p.delta_eps = cond - uncond;
    p.guided = uncond + gamma * p.delta_eps;
    p.eps_uncond = std::move(uncond);
    p.eps_cond = std::move(cond);
    p.gamma = gamma;
    return p;
  }

  /// The same evaluation pair recombined at another scale.
  Vector at_scale(double g) const { return eps_uncond + g * delta_eps; }
};

/// Anything that produces guided predictions on a noise level: the stand-in for eps_theta.
template <class F>
concept PredictionField = requires(const F& f, const NoiseLevel& level, const Vector& x, double g) {
  { f.predict(level, x, g) } -> std::same_as<GuidedPrediction>;
  { f.dim() } -> std::convertible_to<int>;
};

/// A field that also exposes exact Jacobians of its unconditional and delta parts.
template <class F>
concept DifferentiableField = PredictionField<F> && requires(const F& f, const NoiseLevel& level, const Vector& x) {
  { f.jacobian_uncond(level, x) } -> std::same_as<Matrix>;
  { f.jacobian_delta(level, x) } -> std::same_as<Matrix>;
};

/// Analytic guided field: conditional and unconditional Gaussian mixtures.
class MixtureField {
 public:
  MixtureField(GaussianMixture conditional, GaussianMixture unconditional)
      : conditional_(std::move(conditional)), unconditional_(std::move(unconditional)) {
    require(conditional_.dim() == unconditional_.dim(), "conditional and unconditional mixtures differ in dimension");
  }

  /// Unconditional = full mixture; conditional = the designated component alone.
  static MixtureField from_components(const std::vector<GaussianComponent>& components, int conditional_index) {
    require(conditional_index >= 0 && conditional_index < static_cast<int>(components.size()),
            "conditional_index out of range");
    const auto& c = components[static_cast<std::size_t>(conditional_index)];
    return MixtureField(GaussianMixture::single(c.mean, c.var), GaussianMixture(components));
  }

  int dim() const { return unconditional_.dim(); }
  const GaussianMixture& conditional() const { return conditional_; }
  const GaussianMixture& unconditional() const { return unconditional_; }

  GuidedPrediction predict(const NoiseLevel& level, const Vector& x, double gamma) const {
    return GuidedPrediction::combine(native_prediction(unconditional_.posterior(level, x), level),
                                     native_prediction(conditional_.posterior(level, x), level), gamma);
  }

  Matrix jacobian_uncond(const NoiseLevel& level, const Vector& x) const {
    return native_jacobian(unconditional_.posterior(level, x, true), level);
  }

  Matrix jacobian_delta(const NoiseLevel& level, const Vector& x) const {
    return native_jacobian(conditional_.posterior(level, x, true), level) - jacobian_uncond(level, x);
  }

 private:
  GaussianMixture conditional_;
  GaussianMixture unconditional_;
};

/// Field whose predictions ignore both position and time.
class ConstantField {
 public:
  ConstantField(Vector uncond, Vector cond) : uncond_(std::move(uncond)), cond_(std::move(cond)) {
    require(uncond_.size() == cond_.size(), "constant field halves differ in size");
  }

  int dim() const { return static_cast<int>(uncond_.size()); }

  GuidedPrediction predict(const NoiseLevel&, const Vector& x, double gamma) const {
    if (x.size() != uncond_.size()) throw InvalidArgument("point dimension does not match field");
    return GuidedPrediction::combine(uncond_, cond_, gamma);
  }

  Matrix jacobian_uncond(const NoiseLevel&, const Vector&) const { return Matrix::Zero(dim(), dim()); }
  Matrix jacobian_delta(const NoiseLevel&, const Vector&) const { return Matrix::Zero(dim(), dim()); }

 private:
  Vector uncond_;
  Vector cond_;
};

template <PredictionField F>
GuidedPrediction predict(const F& field, const Schedule& s, const Vector& x, int t, double gamma) {
  require(t >= 1 && t <= s.steps(), "evaluation step outside 1..T");
  return field.predict(s.level(t), x, gamma);
}

/// Evaluates two separate fields and combines them under the guidance formula.
inline GuidedPrediction guided_prediction(const GaussianMixture& field_c, const GaussianMixture& field_u,
                                          const Schedule& s, const Vector& x, int t, double gamma) {
  require(t >= 1 && t <= s.steps(), "evaluation step outside 1..T");
  const auto level = s.level(t);
  return GuidedPrediction::combine(native_prediction(field_u.posterior(level, x), level),
                                   native_prediction(field_c.posterior(level, x), level), gamma);
}

}  // namespace z2
