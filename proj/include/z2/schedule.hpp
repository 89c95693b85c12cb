#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "z2/types.hpp"

namespace z2 {

enum class ScheduleKind { VP, Flow, Spherical };

inline std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::VP: return "vp";
    case ScheduleKind::Flow: return "flow";
    case ScheduleKind::Spherical: return "spherical";
  }
  return "unknown";
}

inline ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "vp") return ScheduleKind::VP;
  if (name == "flow") return ScheduleKind::Flow;
  if (name == "spherical") return ScheduleKind::Spherical;
  throw InvalidArgument("unknown schedule kind '" + std::string(name) + "'");
}

/// A point on the continuous noise axis of one geometry.
///
/// `value` is the cumulative signal fraction alpha-bar for VP, the noise scale sigma for
/// Flow and the angle theta for Spherical. The forward-noised variable is always
/// `x = signal * x0 + noise * eps`.
struct NoiseLevel {
  ScheduleKind kind;
  double value;

  double signal() const {
    switch (kind) {
      case ScheduleKind::VP: return std::sqrt(value);
      case ScheduleKind::Flow: return 1.0 - value;
      case ScheduleKind::Spherical: return std::cos(value);
    }
    return 0.0;
  }

  double noise() const {
    switch (kind) {
      case ScheduleKind::VP: return std::sqrt(1.0 - value);
      case ScheduleKind::Flow: return value;
      case ScheduleKind::Spherical: return std::sin(value);
    }
    return 0.0;
  }
};

/// Discrete noise schedule over T steps, indexed so that t = T is pure noise and t = 0 is data.
///
/// Immutable once built; the only way to obtain one is through `from_values` or the
/// factory functions below, all of which validate the monotonicity invariants.
class Schedule {
 public:
  static Schedule from_values(ScheduleKind kind, std::vector<double> values) {
    validate(kind, values);
    return Schedule(kind, std::move(values));
  }

  ScheduleKind kind() const { return kind_; }
  int steps() const { return static_cast<int>(values_.size()) - 1; }
  const std::vector<double>& values() const { return values_; }

  double value(int t) const {
    require(t >= 0 && t <= steps(), "schedule index " + std::to_string(t) + " out of range");
    return values_[static_cast<std::size_t>(t)];
  }

  NoiseLevel level(int t) const { return {kind_, value(t)}; }

 private:
  Schedule(ScheduleKind kind, std::vector<double> values) : kind_(kind), values_(std::move(values)) {}

  static void validate(ScheduleKind kind, const std::vector<double>& v) {
    require(v.size() >= 2, "a schedule needs at least one step (T >= 1)");
    for (double x : v) require(std::isfinite(x), "schedule values must be finite");
    switch (kind) {
      case ScheduleKind::VP:
        require(v.front() <= 1.0, "VP schedule requires alpha_0 <= 1");
        require(v.back() > 0.0, "VP schedule requires alpha_T > 0");
        for (std::size_t i = 1; i < v.size(); ++i)
          require(v[i] < v[i - 1], "VP schedule must strictly decrease from t=0 to t=T");
        break;
      case ScheduleKind::Flow:
        require(v.front() >= 0.0, "flow schedule requires sigma_0 >= 0");
        for (std::size_t i = 1; i < v.size(); ++i)
          require(v[i] > v[i - 1], "flow schedule must strictly increase from t=0 to t=T");
        break;
      case ScheduleKind::Spherical:
        require(v.front() >= 0.0, "spherical schedule requires theta_0 >= 0");
        require(v.back() < std::numbers::pi / 2, "spherical schedule requires theta_T < pi/2");
        for (std::size_t i = 1; i < v.size(); ++i)
          require(v[i] > v[i - 1], "spherical schedule must strictly increase from t=0 to t=T");
        break;
    }
  }

  ScheduleKind kind_;
  std::vector<double> values_;
};

/// VP schedule with alpha-bar interpolated geometrically from `alpha_start` (t=0) to
/// `alpha_end` (t=T).
inline Schedule make_linear_vp(int T, double alpha_start, double alpha_end) {
  require(T >= 1, "T must be >= 1");
  require(alpha_end > 0.0 && alpha_end < alpha_start && alpha_start <= 1.0,
          "VP endpoints must satisfy 0 < alpha_end < alpha_start <= 1");
  std::vector<double> values(static_cast<std::size_t>(T) + 1);
  const double log_start = std::log(alpha_start);
  const double log_end = std::log(alpha_end);
  for (int t = 0; t <= T; ++t) {
    const double frac = static_cast<double>(t) / T;
    values[static_cast<std::size_t>(t)] = std::exp(log_start + frac * (log_end - log_start));
  }
  values.front() = alpha_start;
  values.back() = alpha_end;
  return Schedule::from_values(ScheduleKind::VP, std::move(values));
}

/// Flow schedule on the uniform grid sigma_t = sigma_min + (sigma_max - sigma_min) * t / T.
inline Schedule make_uniform_flow(int T, double sigma_min, double sigma_max) {
  require(T >= 1, "T must be >= 1");
  require(sigma_min >= 0.0 && sigma_max > sigma_min, "flow range must satisfy 0 <= sigma_min < sigma_max");
  std::vector<double> values(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t)
    values[static_cast<std::size_t>(t)] = sigma_min + (sigma_max - sigma_min) * t / T;
  values.back() = sigma_max;
  return Schedule::from_values(ScheduleKind::Flow, std::move(values));
}

inline Schedule make_linear_flow(int T, double sigma_max) {
  require(sigma_max > 0.0, "sigma_max must be > 0");
  return make_uniform_flow(T, 0.0, sigma_max);
}

inline Schedule vp_to_spherical(const Schedule& s) {
  require(s.kind() == ScheduleKind::VP, "vp_to_spherical expects a VP schedule");
  std::vector<double> theta;
  theta.reserve(s.values().size());
  for (double alpha : s.values()) theta.push_back(std::acos(std::sqrt(alpha)));
  return Schedule::from_values(ScheduleKind::Spherical, std::move(theta));
}

/// Schedule whose natural time coordinate is uniform with spacing h = (hi - lo) / T.
///
/// Flow uses sigma in [lo, hi]. Spherical uses theta in [lo, hi]. VP uses the same theta
/// grid mapped through alpha-bar = cos^2(theta), so the three geometries share one notion
/// of step size for order sweeps.
inline Schedule make_uniform_schedule(ScheduleKind kind, int T, double lo, double hi) {
  require(T >= 1, "T must be >= 1");
  require(hi > lo && lo >= 0.0, "uniform schedule needs 0 <= lo < hi");
  if (kind == ScheduleKind::Flow) return make_uniform_flow(T, lo, hi);
  require(hi < std::numbers::pi / 2, "angular range must stay below pi/2");
  std::vector<double> theta(static_cast<std::size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) theta[static_cast<std::size_t>(t)] = lo + (hi - lo) * t / T;
  theta.back() = hi;
  if (kind == ScheduleKind::Spherical) return Schedule::from_values(kind, std::move(theta));
  std::vector<double> alpha;
  alpha.reserve(theta.size());
  for (double th : theta) alpha.push_back(std::cos(th) * std::cos(th));
  return Schedule::from_values(ScheduleKind::VP, std::move(alpha));
}

}  // namespace z2
