// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "dsa/admm.hpp"

namespace admm = dsa::admm;
using dsa::BudgetModel;

namespace {

BudgetModel linear_toy() {
  BudgetModel m(1);
  m.fb = {1.0};
  return m;
}

BudgetModel random_quadratic(std::mt19937_64& rng, int k) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  BudgetModel m(k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (u(rng) < 0.4) m.a(i, j) = 1e5 * u(rng);
    }
    m.fb[i] = 1e4 * u(rng);
  }
  return m;
}

}  // namespace

TEST(Alpha, SigmoidOfTheta) {
  auto s = admm::init_alloc(3);
  s.theta = {0.0, 50.0, -3.0};
  const auto a = admm::current_alpha(s);
  EXPECT_EQ(a[0], 0.5);
  EXPECT_NEAR(a[1], 1.0, 1e-15);
  EXPECT_NEAR(a[2], 1.0 / (1.0 + std::exp(3.0)), 1e-15);
}

TEST(Alpha, LogitRoundTrip) {
  // 1 - sigmoid(x) carries only ~eps * e^x relative precision for large x.
  for (double x = -30.0; x <= 30.0; x += 0.25) {
    const double tol = x <= 9.0 ? 1e-12 : 4.0 * std::numeric_limits<double>::epsilon() * std::exp(x);
    EXPECT_NEAR(admm::logit(admm::sigmoid(x)), x, tol) << x;
  }
}

TEST(Init, StartsNearAllOnes) {
  auto s = admm::init_alloc(4);
  for (double a : admm::current_alpha(s)) EXPECT_NEAR(a, 1.0 - 1e-4, 1e-12);
  EXPECT_EQ(s.z, s.theta);
  EXPECT_EQ(s.u1, 0.0);
  EXPECT_EQ(s.u2, std::vector<double>(4, 0.0));
}

TEST(ThetaStep, ZeroGradientAtFixedPoint) {
  auto s = admm::init_alloc(2);
  const auto before = s.theta;
  const std::vector<double> g(2, 0.0);
  EXPECT_TRUE(admm::theta_step(s, g));
  EXPECT_EQ(s.theta, before);
}

TEST(ThetaStep, ProjectionBlocksNegativeSteps) {
  auto s = admm::init_alloc(2);
  const auto before = s.theta;
  const std::vector<double> g{-1.0, -5.0};
  admm::theta_step(s, g);
  EXPECT_EQ(s.theta, before);
  s.opt.nonneg_projection = false;
  admm::theta_step(s, g);
  EXPECT_GT(s.theta[0], before[0]);
}

TEST(ThetaStep, PenaltyPullsTowardZ) {
  auto s = admm::init_alloc(2);
  s.theta = {2.0, 0.0};
  s.z = {1.0, 1.0};
  const std::vector<double> g(2, 0.0);
  admm::theta_step(s, g, 0.1);
  EXPECT_DOUBLE_EQ(s.theta[0], 2.0 - 0.1 * 0.01 * 1.0);
  EXPECT_EQ(s.theta[1], 0.0);  // gradient negative, projected away
}

TEST(ThetaStep, ScalesLossGradientBySigmoidSlope) {
  auto s = admm::init_alloc(1);
  s.theta = {0.0};
  s.z = {0.0};
  const std::vector<double> g{2e-6};
  admm::theta_step(s, g, 0.5);
  EXPECT_DOUBLE_EQ(s.theta[0], -0.5 * 1e5 * 2e-6 * 0.25);
}

TEST(ThetaStep, NonFiniteGradientSkipped) {
  auto s = admm::init_alloc(2);
  const auto before = s.theta;
  const std::vector<double> g{std::numeric_limits<double>::quiet_NaN(), 1.0};
  EXPECT_FALSE(admm::theta_step(s, g));
  EXPECT_EQ(s.theta, before);
  EXPECT_EQ(s.skipped_steps, 1);
}

TEST(ZStep, FeasibleFixedPointUnchanged) {
  auto s = admm::init_alloc(1);
  const auto model = linear_toy();
  const auto z = s.z;
  admm::z_step(s, model, 1.0);
  EXPECT_EQ(s.z, z);
  EXPECT_EQ(s.u1, 0.0);
}

TEST(ZStep, LinearToyConvergesToBudget) {
  // Scalar trace: F(A) = A, B = 0.5, starting from A close to one.
  auto s = admm::init_alloc(1);
  const auto model = linear_toy();
  bool reached = false;
  for (int round = 0; round < 5 && !reached; ++round) {
    admm::z_step(s, model, 0.5);
    reached = admm::sigmoid(s.z[0]) <= 0.51;
  }
  EXPECT_TRUE(reached) << "sigma(z) = " << admm::sigmoid(s.z[0]);
}

TEST(ZStep, DualAscentIffInfeasible) {
  auto s = admm::init_alloc(1);
  const auto model = linear_toy();
  for (int round = 0; round < 6; ++round) {
    const double u1 = s.u1;
    admm::z_step(s, model, 0.5);
    const bool infeasible = admm::sigmoid(s.z[0]) > 0.5;
    if (infeasible) {
      EXPECT_GT(s.u1, u1);
    } else {
      EXPECT_GE(s.u1, u1);
    }
  }
  // Once feasible with Theta = z and u2 = 0, nothing moves.
  s.theta = s.z;
  s.u2 = {0.0};
  if (admm::sigmoid(s.z[0]) < 0.5) {
    const double u1 = s.u1;
    admm::z_step(s, model, 0.5);
    EXPECT_EQ(s.u1, u1);
  }
}

TEST(ZStep, DivergenceAborts) {
  auto s = admm::init_alloc(1);
  s.u2 = {1e12};
  EXPECT_THROW(admm::z_step(s, linear_toy(), 0.5), dsa::SolverError);
}

TEST(DualStep, Arithmetic) {
  auto s = admm::init_alloc(1);
  s.theta = {1.1};
  s.z = {1.0};
  admm::dual_step(s);
  EXPECT_NEAR(s.u2[0], 0.001, 1e-15);
  s.theta = s.z;
  admm::dual_step(s);
  EXPECT_NEAR(s.u2[0], 0.001, 1e-15);
  s.opt.rho2 = 0.0;
  s.theta = {5.0};
  admm::dual_step(s);
  EXPECT_NEAR(s.u2[0], 0.001, 1e-15);
}

TEST(Outer, StationaryAtFixedPoint) {
  auto s = admm::init_alloc(2);
  BudgetModel m(2);
  m.fb = {1.0, 1.0};
  const auto theta = s.theta, z = s.z;
  const std::vector<double> g(2, 0.0);
  admm::outer_iteration(s, g, m, 2.0);
  EXPECT_EQ(s.theta, theta);
  EXPECT_EQ(s.z, z);
  EXPECT_EQ(s.u1, 0.0);
  EXPECT_EQ(s.u2, std::vector<double>(2, 0.0));
  EXPECT_EQ(s.iteration, 1);
}

TEST(Outer, ReachesFeasibilityOnRandomQuadratics) {
  std::mt19937_64 rng(99);
  for (int k : {1, 3, 6}) {
    for (double frac : {0.25, 0.5, 0.75}) {
      const auto model = random_quadratic(rng, k);
      const double budget = frac * model.full_flops();
      auto s = admm::init_alloc(k);
      const std::vector<double> zero(k, 0.0);
      int it = 0;
      double prev_u1 = 0.0;
      while (it < 200 && dsa::eval_budget(model, admm::current_alpha(s)) > 1.01 * budget) {
        admm::outer_iteration(s, zero, model, budget);
        EXPECT_GE(s.u1, prev_u1);
        prev_u1 = s.u1;
        ++it;
      }
      EXPECT_LE(dsa::eval_budget(model, admm::current_alpha(s)), 1.01 * budget) << "K=" << k << " B=" << frac;
    }
  }
}

TEST(Serialization, JsonRoundTrip) {
  auto s = admm::init_alloc(3);
  s.theta = {0.1, 0.2, 0.3};
  s.z = {0.4, 0.5, 0.6};
  s.u1 = 2.5;
  s.u2 = {-1.0, 0.0, 1.0};
  s.iteration = 17;
  s.opt.lv_scale = 123.0;
  const auto back = admm::from_json(admm::to_json(s));
  EXPECT_EQ(back.theta, s.theta);
  EXPECT_EQ(back.z, s.z);
  EXPECT_EQ(back.u1, s.u1);
  EXPECT_EQ(back.u2, s.u2);
  EXPECT_EQ(back.iteration, 17);
  EXPECT_EQ(back.opt.lv_scale, 123.0);
}
