#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "z2/scorefield.hpp"

using namespace z2;

namespace {

GaussianMixture two_modes() {
  return GaussianMixture({{(Vector(2) << 1.5, 0.2).finished(), 0.1, 0.3},
                          {(Vector(2) << -1.0, -0.5).finished(), 0.4, 0.7}});
}

std::vector<NoiseLevel> sample_levels() {
  return {{ScheduleKind::VP, 0.7}, {ScheduleKind::VP, 0.05}, {ScheduleKind::Flow, 0.3},
          {ScheduleKind::Flow, 0.9}, {ScheduleKind::Spherical, 0.4}, {ScheduleKind::Spherical, 1.2}};
}

}  // namespace

TEST(ScoreField, SingleGaussianMatchesClosedForm) {
  std::mt19937_64 rng(3);
  const Vector mu = oracle::random_vec(4, rng);
  const auto mix = GaussianMixture::single(mu, 0.25);
  for (const auto& level : sample_levels()) {
    const Vector x = oracle::random_vec(4, rng, 2.0);
    const auto p = mix.posterior(level, x);
    const double a = level.signal(), b = level.noise();
    EXPECT_LE((p.eps - oracle::gaussian_eps(mu, 0.25, a, b, x)).norm(), 1e-13);
    EXPECT_LE((p.x0 - oracle::gaussian_x0(mu, 0.25, a, b, x)).norm(), 1e-13);
  }
}

TEST(ScoreField, EpsilonIsScaledScoreOfMarginal) {
  const auto mix = two_modes();
  std::mt19937_64 rng(9);
  for (const auto& level : sample_levels()) {
    const Vector x = oracle::random_vec(2, rng);
    const double a = level.signal(), b = level.noise();
    auto logp = [&](const Vector& y) {
      Vector out(1);
      out[0] = mix.posterior_at(a, b, y, false).log_density;
      return out;
    };
    const Vector grad = oracle::fd_jacobian(logp, x, 1e-5).row(0).transpose();
    EXPECT_LE((mix.posterior(level, x).eps + b * grad).norm(), 1e-7) << to_string(level.kind);
  }
}

TEST(ScoreField, PosteriorMeansReconstructState) {
  const auto mix = two_modes();
  std::mt19937_64 rng(21);
  for (int i = 0; i < 200; ++i) {
    for (const auto& level : sample_levels()) {
      const Vector x = oracle::random_vec(2, rng, 3.0);
      const auto p = mix.posterior(level, x);
      EXPECT_LE((level.signal() * p.x0 + level.noise() * p.eps - x).norm(), 1e-12 * (1.0 + x.norm()));
    }
  }
}

TEST(ScoreField, LogDensityMatchesDirectSum) {
  const auto mix = two_modes();
  std::vector<Vector> means;
  std::vector<double> vars, weights;
  for (const auto& c : mix.components()) {
    means.push_back(c.mean);
    vars.push_back(c.var);
    weights.push_back(c.weight);
  }
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Vector x = oracle::random_vec(2, rng);
    EXPECT_NEAR(mix.log_density(x), oracle::mixture_log_density(means, vars, weights, x), 1e-10);
  }
}

TEST(ScoreField, LogSpaceWeightsSurviveFarPoints) {
  const auto mix = two_modes();
  const Vector far = Vector::Constant(2, 400.0);
  const auto p = mix.posterior({ScheduleKind::VP, 0.999}, far, true);
  EXPECT_TRUE(p.eps.allFinite());
  EXPECT_TRUE(p.eps_jacobian.allFinite());
  EXPECT_TRUE(std::isfinite(p.log_density));
}

TEST(ScoreField, NativePredictionIsExpectedVelocity) {
  std::mt19937_64 rng(4);
  const Vector mu = oracle::random_vec(3, rng);
  const auto mix = GaussianMixture::single(mu, 0.5);
  const Vector x = oracle::random_vec(3, rng);
  const NoiseLevel flow{ScheduleKind::Flow, 0.35};
  const NoiseLevel sph{ScheduleKind::Spherical, 0.6};
  auto v_ref = [&](const NoiseLevel& l, double da, double db) {
    const Vector e = oracle::gaussian_eps(mu, 0.5, l.signal(), l.noise(), x);
    const Vector x0 = oracle::gaussian_x0(mu, 0.5, l.signal(), l.noise(), x);
    return Vector(da * x0 + db * e);
  };
  // d/dsigma of (1 - sigma) x0 + sigma eps, d/dtheta of cos x0 + sin eps.
  EXPECT_LE((native_prediction(mix.posterior(flow, x), flow) - v_ref(flow, -1.0, 1.0)).norm(), 1e-13);
  EXPECT_LE((native_prediction(mix.posterior(sph, x), sph) - v_ref(sph, -std::sin(0.6), std::cos(0.6))).norm(), 1e-13);
}

TEST(ScoreField, AnalyticJacobianMatchesFiniteDifferences) {
  const auto mix = two_modes();
  std::mt19937_64 rng(17);
  for (const auto& level : sample_levels()) {
    for (int i = 0; i < 5; ++i) {
      const Vector x = oracle::random_vec(2, rng, 1.5);
      auto f = [&](const Vector& y) { return native_prediction(mix.posterior(level, y), level); };
      const Matrix fd = oracle::fd_jacobian(f, x);
      const Matrix an = native_jacobian(mix.posterior(level, x, true), level);
      EXPECT_LE((fd - an).norm(), 1e-6 * (1.0 + an.norm())) << to_string(level.kind);
    }
  }
}

TEST(ScoreField, MixtureFieldDeltaJacobian) {
  const auto field = MixtureField::from_components(two_modes().components(), 0);
  const NoiseLevel level{ScheduleKind::Flow, 0.5};
  const Vector x = (Vector(2) << 0.3, -0.2).finished();
  auto delta = [&](const Vector& y) { return field.predict(level, y, 0.0).delta_eps; };
  EXPECT_LE((oracle::fd_jacobian(delta, x) - field.jacobian_delta(level, x)).norm(), 1e-6);
}

TEST(ScoreField, VelocityConversionRoundTrips) {
  std::mt19937_64 rng(8);
  for (const auto& level : {NoiseLevel{ScheduleKind::Flow, 0.3}, NoiseLevel{ScheduleKind::Spherical, 0.9}}) {
    const Vector x = oracle::random_vec(5, rng), eps = oracle::random_vec(5, rng);
    const Vector v = epsilon_to_velocity(eps, x, level);
    EXPECT_LE((velocity_to_epsilon(v, x, level) - eps).norm(), 1e-12);
  }
  const Vector x = Vector::Ones(2);
  EXPECT_THROW(epsilon_to_velocity(x, x, {ScheduleKind::VP, 0.5}), InvalidArgument);
  EXPECT_THROW(epsilon_to_velocity(x, x, {ScheduleKind::Flow, 1.0}), InvalidArgument);
}

TEST(ScoreField, GuidanceCombination) {
  const Vector u = (Vector(2) << 1.0, 2.0).finished(), c = (Vector(2) << 3.0, -1.0).finished();
  const auto g = GuidedPrediction::combine(u, c, 2.5);
  EXPECT_EQ(g.guided, u + 2.5 * (c - u));
  EXPECT_EQ(g.at_scale(0.0), u);
  EXPECT_EQ(g.at_scale(1.0), c);
  EXPECT_THROW(GuidedPrediction::combine(u, Vector::Ones(3), 1.0), InvalidArgument);
}

TEST(ScoreField, SeparateFieldsMatchMixtureField) {
  const auto mix = two_modes();
  const auto field = MixtureField::from_components(mix.components(), 1);
  const auto s = make_linear_vp(20, 0.999, 0.01);
  const Vector x = (Vector(2) << 0.1, 0.9).finished();
  const auto a = guided_prediction(field.conditional(), field.unconditional(), s, x, 7, 3.0);
  const auto b = predict(field, s, x, 7, 3.0);
  EXPECT_EQ(a.guided, b.guided);
  EXPECT_THROW(predict(field, s, x, 0, 3.0), InvalidArgument);
}

TEST(ScoreField, MixtureValidation) {
  const Vector m = Vector::Zero(2);
  EXPECT_THROW(GaussianMixture({}), InvalidArgument);
  EXPECT_THROW(GaussianMixture({{m, 0.0, 1.0}}), InvalidArgument);
  EXPECT_THROW(GaussianMixture({{m, 1.0, 0.6}, {m, 1.0, 0.6}}), InvalidArgument);
  EXPECT_THROW(GaussianMixture({{m, 1.0, 0.5}, {Vector::Zero(3), 1.0, 0.5}}), InvalidArgument);
  EXPECT_THROW(MixtureField::from_components({{m, 1.0, 1.0}}, 1), InvalidArgument);
  EXPECT_THROW(GaussianMixture::single(m, 1.0).posterior({ScheduleKind::VP, 0.5}, Vector::Zero(3)), InvalidArgument);
}
