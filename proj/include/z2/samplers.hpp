#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "z2/schedule.hpp"
#include "z2/scorefield.hpp"
#include "z2/solver.hpp"
#include "z2/types.hpp"

namespace z2 {

enum class Variant { Standard, ExplicitZ, ImplicitZ, ZSquared };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Standard: return "standard";
    case Variant::ExplicitZ: return "explicit_z";
    case Variant::ImplicitZ: return "implicit_z";
    case Variant::ZSquared: return "z_squared";
  }
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "standard") return Variant::Standard;
  if (name == "explicit_z") return Variant::ExplicitZ;
  if (name == "implicit_z") return Variant::ImplicitZ;
  if (name == "z_squared") return Variant::ZSquared;
  throw InvalidArgument("unknown sampler variant '" + std::string(name) + "'");
}

struct SamplerConfig {
  Variant variant = Variant::Standard;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  int warmup = 0;
  int zigzag_steps = 0;

  void validate(int T) const {
    require(warmup >= 0 && zigzag_steps >= 0, "warmup and zigzag_steps must be non-negative");
    require(warmup + zigzag_steps <= T, "warmup + zigzag_steps must not exceed T");
    require(std::isfinite(gamma1) && std::isfinite(gamma2), "guidance scales must be finite");
    if (variant == Variant::ImplicitZ || variant == Variant::ZSquared)
      require(gamma2 == 0.0, "noise-reuse variants require gamma2 == 0");
  }
};

enum class Phase { Warmup, Zigzag, Standard };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Warmup: return "warmup";
    case Phase::Zigzag: return "zigzag";
    case Phase::Standard: return "standard";
  }
  return "unknown";
}

/// Window of the cached sampler: zigzag iff T - W - lambda < t <= T - W.
inline Phase windowed_phase(int t, int T, int warmup, int zigzag_steps) {
  if (t > T - warmup) return Phase::Warmup;
  if (t > T - warmup - zigzag_steps) return Phase::Zigzag;
  return Phase::Standard;
}

/// Window of the explicit sampler: zigzag iff t > T - lambda (no warmup offset).
inline Phase explicit_phase(int t, int T, int zigzag_steps) {
  return t > T - zigzag_steps ? Phase::Zigzag : Phase::Standard;
}

/// Single cached delta from the previous processed step.
struct SurrogateCache {
  Vector delta_eps;
  int source_step = -1;

  bool empty() const { return source_step < 0; }
};

struct StepDiagnostics {
  int t = 0;  ///< step index the transition started from
  Phase phase = Phase::Standard;
  SolverCoefficients coeffs;
  std::optional<double> tau_norm;  ///< only for steps that invert
  std::optional<double> e_tss;     ///< only for steps that consume the cache
  Vector delta_eps;                ///< delta the step evaluated (feeds the cosine track)
  int nfe = 0;
};

struct TrajectoryRecord {
  SamplerConfig config;
  std::uint64_t seed = 0;
  std::vector<LatentState> states;  ///< x_T first, x_0 last
  int nfe = 0;
  std::vector<StepDiagnostics> per_step;
};

struct StepResult {
  LatentState next;
  StepDiagnostics diag;
};

struct Z2StepResult {
  LatentState next;
  SurrogateCache cache;
  StepDiagnostics diag;
};

/// Seeded draw from N(0, I).
inline Vector standard_normal(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

/// x~_t = x_t - C gamma1 delta, with gamma1 and delta taken from the anchor prediction.
inline LatentState implicit_collapse(const LatentState& x, const SolverCoefficients& c, const GuidedPrediction& pred) {
  if (x.t != c.step) throw ContractViolation("collapse applied at the wrong step");
  if (pred.delta_eps.size() != x.x.size()) throw InvalidArgument("dimension mismatch in collapse");
  return {x.x - (c.C * pred.gamma) * pred.delta_eps, x.t};
}

/// Translation of the cached sampler; identical to implicit_collapse with a supplied delta.
inline LatentState surrogate_translate(const LatentState& x, const SolverCoefficients& c, double gamma1,
                                       const Vector& delta) {
  if (x.t != c.step) throw ContractViolation("translation applied at the wrong step");
  if (delta.size() != x.x.size()) throw InvalidArgument("dimension mismatch in translation");
  return {x.x - (c.C * gamma1) * delta, x.t};
}

/// Re-denoising from the collapsed state, checked against the equivalent forward step from
/// the anchor. Throws DualityViolation when the two disagree beyond `tol` (relative).
inline LatentState collapsed_forward(const LatentState& x, const SolverCoefficients& c, const LatentState& x_tilde,
                                     const GuidedPrediction& pred_at_tilde, const Vector& delta_at_anchor,
                                     double gamma1, double tol = kDualityTolerance) {
  LatentState from_tilde = forward_step(c, x_tilde, pred_at_tilde.guided);
  const LatentState from_anchor = forward_step(c, x, pred_at_tilde.guided + gamma1 * delta_at_anchor);
  const double dev = (from_tilde.x - from_anchor.x).norm();
  const double scale = 1.0 + x.x.norm() + from_anchor.x.norm();
  if (!(dev <= tol * scale))
    throw DualityViolation("collapsed re-denoising differs from the anchored forward step by " + std::to_string(dev) +
                           " at step " + std::to_string(c.step));
  return from_tilde;
}

/// Runs the four samplers on one field and schedule, counting two NFEs per guided pair.
///
/// Diagnostics (tau, E_TSS) may re-evaluate the field; those evaluations are not counted.
template <PredictionField Field>
class Sampler {
 public:
  Sampler(const Field& field, const Schedule& schedule, SamplerConfig cfg)
      : field_(field), schedule_(schedule), cfg_(cfg) {
    cfg_.validate(schedule_.steps());
    require(field_.dim() >= 1, "field dimension must be >= 1");
  }

  const SamplerConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return schedule_; }

  StepResult standard_step(const LatentState& x) const {
    const auto c = coefficients(schedule_, x.t);
    const auto pred = evaluate(x, cfg_.gamma1);
    StepResult out{forward_step(c, x, pred.guided), {}};
    out.diag = base_diag(x.t, Phase::Standard, c, 2);
    out.diag.delta_eps = pred.delta_eps;
    return out;
  }

  /// Denoise with gamma1, invert with gamma2 evaluated at the moved point, re-denoise.
  StepResult explicit_zigzag_step(const LatentState& x) const {
    const auto c = coefficients(schedule_, x.t);
    const auto first = evaluate(x, cfg_.gamma1);
    const auto moved = forward_step(c, x, first.guided);
    const auto back = evaluate(moved.x, x.t, cfg_.gamma2);
    const auto x_tilde = inverse_step(c, moved, back.guided);
    const auto again = evaluate(x_tilde, cfg_.gamma1);
    StepResult out{forward_step(c, x_tilde, again.guided), {}};
    out.diag = base_diag(x.t, Phase::Zigzag, c, 6);
    out.diag.delta_eps = first.delta_eps;
    out.diag.tau_norm = inversion_mismatch(c, moved, back.guided, first.at_scale(cfg_.gamma2)).norm();
    return out;
  }

  /// Exact noise reuse: the inversion uses the anchor's unconditional prediction, so the
  /// lookahead-and-return collapses to a translation followed by one forward step.
  StepResult implicit_zigzag_step(const LatentState& x) const {
    const auto c = coefficients(schedule_, x.t);
    const auto anchor = evaluate(x, cfg_.gamma1);
    const auto x_tilde = implicit_collapse(x, c, anchor);
    const auto at_tilde = evaluate(x_tilde, cfg_.gamma1);
    StepResult out{collapsed_forward(x, c, x_tilde, at_tilde, anchor.delta_eps, cfg_.gamma1), {}};
    out.diag = base_diag(x.t, Phase::Zigzag, c, 4);
    out.diag.delta_eps = anchor.delta_eps;
    const auto moved = forward_step(c, x, anchor.guided);
    const Vector reused = anchor.at_scale(0.0);
    out.diag.tau_norm = inversion_mismatch(c, moved, reused, reused).norm();
    return out;
  }

  /// One step of the cached sampler. Zigzag translates by the cached delta, evaluates one
  /// guided pair at the translated point and refreshes the cache from it; other phases are
  /// a standard step that refreshes the cache at the anchor.
  Z2StepResult z2_step(const LatentState& x, const SurrogateCache& cache, Phase phase) const {
    const auto c = coefficients(schedule_, x.t);
    if (phase != Phase::Zigzag) {
      const auto pred = evaluate(x, cfg_.gamma1);
      Z2StepResult out{forward_step(c, x, pred.guided), {pred.delta_eps, x.t}, base_diag(x.t, phase, c, 2)};
      out.diag.delta_eps = pred.delta_eps;
      return out;
    }
    if (cache.empty()) throw ContractViolation("zigzag step at t=" + std::to_string(x.t) + " with an empty cache");
    const auto x_tilde = surrogate_translate(x, c, cfg_.gamma1, cache.delta_eps);
    const auto pred = evaluate(x_tilde, cfg_.gamma1);
    Z2StepResult out{forward_step(c, x_tilde, pred.guided), {pred.delta_eps, x.t}, base_diag(x.t, phase, c, 2)};
    out.diag.delta_eps = pred.delta_eps;
    out.diag.tau_norm = 0.0;  // no inversion is ever evaluated off the anchor
    out.diag.e_tss = (field_.predict(schedule_.level(x.t), x.x, cfg_.gamma1).delta_eps - cache.delta_eps).norm();
    return out;
  }

  /// Full run from x_T. Deterministic given the inputs.
  TrajectoryRecord run(const Vector& x_T, std::uint64_t seed = 0) const {
    require(x_T.size() == field_.dim(), "initial state dimension does not match the field");
    const int T = schedule_.steps();
    TrajectoryRecord rec;
    rec.config = cfg_;
    rec.seed = seed;
    rec.states.reserve(static_cast<std::size_t>(T) + 1);
    rec.states.push_back({x_T, T});
    // Algorithm initializes the running delta to zero; only matters when W == 0.
    SurrogateCache cache{Vector::Zero(field_.dim()), T + 1};
    for (int t = T; t >= 1; --t) {
      const LatentState& x = rec.states.back();
      StepResult step;
      switch (cfg_.variant) {
        case Variant::Standard: step = standard_step(x); break;
        case Variant::ExplicitZ:
          step = explicit_phase(t, T, cfg_.zigzag_steps) == Phase::Zigzag ? explicit_zigzag_step(x) : standard_step(x);
          break;
        case Variant::ImplicitZ: {
          const Phase p = windowed_phase(t, T, cfg_.warmup, cfg_.zigzag_steps);
          step = p == Phase::Zigzag ? implicit_zigzag_step(x) : standard_step(x);
          step.diag.phase = p;
          break;
        }
        case Variant::ZSquared: {
          auto r = z2_step(x, cache, windowed_phase(t, T, cfg_.warmup, cfg_.zigzag_steps));
          cache = std::move(r.cache);
          step = {std::move(r.next), std::move(r.diag)};
          break;
        }
      }
      rec.nfe += step.diag.nfe;
      rec.per_step.push_back(std::move(step.diag));
      rec.states.push_back(std::move(step.next));
    }
    return rec;
  }

  TrajectoryRecord run_seeded(std::uint64_t seed) const { return run(standard_normal(field_.dim(), seed), seed); }

 private:
  GuidedPrediction evaluate(const LatentState& x, double gamma) const { return evaluate(x.x, x.t, gamma); }

  GuidedPrediction evaluate(const Vector& x, int t, double gamma) const {
    return field_.predict(schedule_.level(t), x, gamma);
  }

  static StepDiagnostics base_diag(int t, Phase phase, const SolverCoefficients& c, int nfe) {
    StepDiagnostics d;
    d.t = t;
    d.phase = phase;
    d.coeffs = c;
    d.nfe = nfe;
    return d;
  }

  const Field& field_;
  const Schedule& schedule_;
  SamplerConfig cfg_;
};

template <PredictionField Field>
TrajectoryRecord run_trajectory(const SamplerConfig& cfg, const Schedule& s, const Field& field, const Vector& x_T,
                                std::uint64_t seed = 0) {
  return Sampler<Field>(field, s, cfg).run(x_T, seed);
}

template <PredictionField Field>
TrajectoryRecord run_trajectory(const SamplerConfig& cfg, const Schedule& s, const Field& field, std::uint64_t seed) {
  return Sampler<Field>(field, s, cfg).run_seeded(seed);
}

}  // namespace z2
