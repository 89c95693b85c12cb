#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "z2/solver.hpp"

using namespace z2;

namespace {

Schedule random_schedule(ScheduleKind kind, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> steps(1, 120);
  std::uniform_real_distribution<double> lo(0.001, 0.5), hi(0.9, 1.0), smax(0.05, 20.0);
  if (kind == ScheduleKind::Flow) return make_linear_flow(steps(rng), smax(rng));
  const auto vp = make_linear_vp(steps(rng), hi(rng), lo(rng));
  return kind == ScheduleKind::VP ? vp : vp_to_spherical(vp);
}

}  // namespace

TEST(Solver, VpCoefficientsMatchExtendedPrecision) {
  const auto s = make_linear_vp(40, 0.9999, 0.004);
  for (int t = 1; t <= 40; ++t) {
    const auto c = coefficients(s, t);
    const auto ref = oracle::ddim(s.value(t), s.value(t - 1));
    EXPECT_NEAR(c.A, static_cast<double>(ref.A), 1e-14);
    EXPECT_NEAR(c.B, static_cast<double>(ref.B), 1e-14);
    EXPECT_NEAR(c.C, static_cast<double>(ref.C), 1e-14);
    EXPECT_EQ(c.step, t);
  }
}

TEST(Solver, FlowIsEulerInSigma) {
  const auto s = make_uniform_flow(10, 0.0, 1.0);
  for (int t = 1; t <= 10; ++t) {
    const auto c = coefficients(s, t);
    EXPECT_EQ(c.A, 1.0);
    EXPECT_NEAR(c.B, -0.1, 1e-15);
    EXPECT_NEAR(c.C, 0.1, 1e-15);
  }
}

TEST(Solver, SphericalIsRotation) {
  const auto s = vp_to_spherical(make_linear_vp(25, 0.999, 0.02));
  for (int t = 1; t <= 25; ++t) {
    const auto c = coefficients(s, t);
    const auto ref = oracle::rotation(static_cast<long double>(s.value(t - 1)) - s.value(t));
    EXPECT_NEAR(c.A, static_cast<double>(ref.A), 1e-15);
    EXPECT_NEAR(c.B, static_cast<double>(ref.B), 1e-15);
    EXPECT_NEAR(c.C, static_cast<double>(ref.C), 1e-15);
    EXPECT_LT(c.B, 0.0);
    EXPECT_GT(c.C, 0.0);
  }
}

TEST(Solver, DualityHoldsOnRandomSchedules) {
  std::mt19937_64 rng(11);
  for (auto kind : {ScheduleKind::VP, ScheduleKind::Flow, ScheduleKind::Spherical}) {
    for (int i = 0; i < 200; ++i) {
      const auto s = random_schedule(kind, rng);
      for (int t = 1; t <= s.steps(); ++t) {
        const auto r = check_duality(coefficients(s, t));
        ASSERT_LE(r.worst(), kDualityTolerance) << to_string(kind) << " t=" << t;
      }
    }
  }
}

TEST(Solver, CorruptedCoefficientsAreRejected) {
  EXPECT_THROW(spherical_coefficients(std::nan(""), 1), InvalidArgument);
  EXPECT_THROW(vp_coefficients(0.5, 0.0, 1), InvalidArgument);
  SolverCoefficients c{1.0, -0.1, 0.2, 1};
  EXPECT_FALSE(check_duality(c).holds());
  EXPECT_GT(check_duality(c).worst(), 0.09);
}

TEST(Solver, InverseUndoesForwardWithSamePrediction) {
  std::mt19937_64 rng(5);
  for (auto kind : {ScheduleKind::VP, ScheduleKind::Flow, ScheduleKind::Spherical}) {
    const auto s = random_schedule(kind, rng);
    for (int t = 1; t <= s.steps(); ++t) {
      const auto c = coefficients(s, t);
      const LatentState x{oracle::random_vec(6, rng), t};
      const Vector pred = oracle::random_vec(6, rng);
      const auto down = forward_step(c, x, pred);
      EXPECT_EQ(down.t, t - 1);
      const auto up = inverse_step(c, down, pred);
      EXPECT_EQ(up.t, t);
      EXPECT_LE((up.x - x.x).norm(), 1e-11 * (1.0 + x.x.norm()));
    }
  }
}

TEST(Solver, StepBookkeepingIsEnforced) {
  const auto s = make_linear_flow(5, 1.0);
  const auto c = coefficients(s, 3);
  const Vector v = Vector::Ones(2);
  EXPECT_THROW(forward_step(c, {v, 2}, v), ContractViolation);
  EXPECT_THROW(inverse_step(c, {v, 3}, v), ContractViolation);
  EXPECT_THROW(forward_step(c, {v, 3}, Vector::Ones(3)), InvalidArgument);
  EXPECT_THROW(forward_step(c, {Vector::Constant(2, NAN), 3}, v), InvalidArgument);
  EXPECT_THROW(coefficients(s, 0), InvalidArgument);
  EXPECT_THROW(coefficients(s, 6), InvalidArgument);
}

TEST(Solver, InversionMismatchVanishesForIdenticalPredictions) {
  const auto s = make_linear_vp(10, 0.999, 0.05);
  const auto c = coefficients(s, 4);
  const LatentState moved{Vector::LinSpaced(3, -1.0, 2.0), 3};
  const Vector p = Vector::Constant(3, 0.7);
  EXPECT_EQ(inversion_mismatch(c, moved, p, p).norm(), 0.0);
  EXPECT_NEAR(inversion_mismatch(c, moved, p + Vector::Ones(3), p).norm(), std::abs(c.C) * std::sqrt(3.0), 1e-14);
}
