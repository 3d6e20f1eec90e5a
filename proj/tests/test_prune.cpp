// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "dsa/prune.hpp"

namespace pr = dsa::prune;

namespace {

// Independent bisection on beta1 itself (not its log) for the oracle.
double oracle_beta1(const std::vector<double>& b, double alpha, double beta2) {
  auto gap = [&](double beta1) {
    double s = 0.0;
    for (double bi : b) s += 1.0 / (1.0 + std::pow(bi / beta1, -beta2));
    return s / b.size() - alpha;
  };
  double lo = 1e-200, hi = 1e200;
  for (int i = 0; i < 300; ++i) {
    const double mid = std::sqrt(lo * hi);
    (gap(mid) > 0 ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

}  // namespace

TEST(KeepProb, AtThresholdIsHalf) {
  for (double beta2 : {0.05, 1.0, 7.0}) EXPECT_DOUBLE_EQ(pr::keep_prob(2.5, 2.5, beta2), 0.5);
}

TEST(KeepProb, ClosedForm) { EXPECT_NEAR(pr::keep_prob(2.0, 1.0, 1.0), 2.0 / 3.0, 1e-15); }

TEST(KeepProb, HardKeepLimit) {
  const double p = pr::keep_prob(2.0, 1.0, 50.0);
  EXPECT_LT(1.0 - p, 1e-15);
}

TEST(KeepProb, RejectsNonPositive) {
  EXPECT_THROW(pr::keep_prob(0.0, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(pr::keep_prob(1.0, -1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(pr::keep_prob(1.0, 1.0, 0.0), std::invalid_argument);
}

TEST(KeepProb, MonotoneInImportanceAndThreshold) {
  EXPECT_LT(pr::keep_prob(1.0, 2.0, 3.0), pr::keep_prob(1.5, 2.0, 3.0));
  EXPECT_GT(pr::keep_prob(1.0, 2.0, 3.0), pr::keep_prob(1.0, 2.5, 3.0));
}

TEST(SolveBeta1, EqualImportancesGiveB) {
  const std::vector<double> b(7, 0.37);
  EXPECT_NEAR(pr::solve_beta1(b, 0.5, 2.0), 0.37, 1e-9);
}

TEST(SolveBeta1, TwoChannelQuadratic) {
  const std::vector<double> b{1.0, 3.0};
  EXPECT_NEAR(pr::solve_beta1(b, 0.5, 1.0), std::sqrt(3.0), 1e-6);
  EXPECT_NEAR(oracle_beta1(b, 0.5, 1.0), std::sqrt(3.0), 1e-9);
}

TEST(SolveBeta1, ExpectationConditionHolds) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 1 + static_cast<int>(u(rng) * 64);
    std::vector<double> b(c);
    for (auto& v : b) v = std::exp(-4.0 + 6.0 * u(rng));
    const double alpha = 0.02 + 0.96 * u(rng);
    const double beta2 = std::exp(-3.0 + 7.0 * u(rng));
    const double beta1 = pr::solve_beta1(b, alpha, beta2);
    const auto p = pr::keep_probs(b, beta1, beta2);
    const double kept = std::accumulate(p.begin(), p.end(), 0.0);
    EXPECT_LE(std::abs(kept - alpha * c), 1e-9 * c);
    EXPECT_NEAR(beta1, oracle_beta1(b, alpha, beta2), 1e-6 * beta1);
  }
}

TEST(SolveBeta1, ScaleEquivariant) {
  const std::vector<double> b{0.2, 0.5, 1.1, 4.0};
  std::vector<double> scaled(b);
  for (auto& v : scaled) v *= 37.0;
  EXPECT_NEAR(pr::solve_beta1(scaled, 0.3, 1.7), 37.0 * pr::solve_beta1(b, 0.3, 1.7),
              1e-8 * pr::solve_beta1(scaled, 0.3, 1.7));
}

TEST(SolveBeta1, GapStrictlyDecreasing) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> b(10);
    for (auto& v : b) v = 0.01 + u(rng);
    double prev = pr::expectation_gap(b, -5.0, 0.5, 2.0);
    for (double lb = -4.9; lb < 2.0; lb += 0.1) {
      const double g = pr::expectation_gap(b, lb, 0.5, 2.0);
      EXPECT_LT(g, prev);
      prev = g;
    }
  }
}

TEST(SolveBeta1, RejectsAlphaOutsideOpenInterval) {
  const std::vector<double> b{1.0, 2.0};
  EXPECT_THROW(pr::solve_beta1(b, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(pr::solve_beta1(b, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(pr::solve_beta1(b, 1.5, 1.0), std::invalid_argument);
}

TEST(SampleMasks, DegenerateProbabilities) {
  std::mt19937_64 rng(1);
  const std::vector<double> ones(9, 1.0), zeros(9, 0.0);
  EXPECT_EQ(pr::sample_masks(ones, rng), ones);
  EXPECT_EQ(pr::sample_masks(zeros, rng), zeros);
}

TEST(SampleMasks, BinomialMean) {
  std::mt19937_64 rng(42);
  const std::vector<double> p(10, 0.5);
  const int draws = 100000;
  double total = 0.0;
  for (int d = 0; d < draws; ++d) {
    const auto m = pr::sample_masks(p, rng);
    total += std::accumulate(m.begin(), m.end(), 0.0);
  }
  const double mean = total / draws;
  const double sigma = std::sqrt(10 * 0.25 / draws);
  EXPECT_LT(std::abs(mean - 5.0), 3 * sigma);
}

TEST(SampleMasks, ReproducibleFromSeed) {
  const std::vector<double> p{0.1, 0.4, 0.6, 0.9, 0.5};
  std::mt19937_64 a(77), b(77);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(pr::sample_masks(p, a), pr::sample_masks(p, b));
}

TEST(Inexactness, Examples) {
  EXPECT_EQ(pr::inexactness(std::vector<double>{0.0, 1.0, 1.0}), 0.0);
  EXPECT_DOUBLE_EQ(pr::inexactness(std::vector<double>{0.5, 0.5}), 0.5);
  const std::vector<double> half(6, 0.5), off{0.4, 0.6, 0.5, 0.5, 0.3, 0.5};
  EXPECT_GT(pr::inexactness(half), pr::inexactness(off));
}

TEST(Inexactness, VanishesAsBeta2Grows) {
  // Well separated importances: every |b_i - beta1| >= 0.1 beta1.
  const std::vector<double> b{0.1, 0.2, 0.35, 0.6, 1.0, 1.6, 2.5, 4.0};
  const double beta2 = 50.0;
  const double beta1 = pr::solve_beta1(b, 0.5, beta2);
  for (double bi : b) ASSERT_GE(std::abs(bi - beta1), 0.1 * beta1);
  EXPECT_LT(pr::inexactness(pr::keep_probs(b, beta1, beta2)), 0.01 * b.size());
}

TEST(ImplicitGradient, UniformImportances) {
  const std::vector<double> b(5, 1.0);
  EXPECT_NEAR(pr::dbeta1_dalpha(b, 1.0, 2.0), -2.0, 1e-12);
}

TEST(ImplicitGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(u(rng) * 30);
    std::vector<double> b(c);
    for (auto& v : b) v = 0.05 + 2.0 * u(rng);
    const double alpha = 0.1 + 0.8 * u(rng);
    const double beta2 = 0.05 + 4.0 * u(rng);
    const double beta1 = pr::solve_beta1(b, alpha, beta2);
    const double h = 1e-4;
    const double fd = (pr::solve_beta1(b, alpha + h, beta2) - pr::solve_beta1(b, alpha - h, beta2)) / (2 * h);
    const double an = pr::dbeta1_dalpha(b, beta1, beta2);
    EXPECT_LT(an, 0.0);
    EXPECT_LT(std::abs(an - fd), 1e-3 * std::abs(fd));
  }
}

TEST(ImplicitGradient, SaturationSignalled) {
  const std::vector<double> b{1e-6, 1e6};
  EXPECT_THROW(pr::dbeta1_dalpha(b, 1.0, 40.0), dsa::SaturationError);
  const std::vector<double> g{1.0, 1.0};
  EXPECT_THROW(pr::dL_dalpha(g, b, 1.0, 40.0), dsa::SaturationError);
}

TEST(TaskGradient, UniformUpstreamGivesCTimesC) {
  const std::vector<double> b{0.3, 0.7, 1.9, 2.2};
  const double beta1 = pr::solve_beta1(b, 0.5, 1.3);
  const std::vector<double> g(4, 0.25);
  EXPECT_NEAR(pr::dL_dalpha(g, b, beta1, 1.3), 4 * 0.25, 1e-12);
  const std::vector<double> z(4, 0.0);
  EXPECT_EQ(pr::dL_dalpha(z, b, beta1, 1.3), 0.0);
}

TEST(TaskGradient, MatchesChainThroughSolver) {
  // L(p) = sum_i w_i p_i, so dL/dalpha = sum_i w_i dp_i/dalpha.
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 3 + trial % 10;
    std::vector<double> b(c), w(c);
    for (auto& v : b) v = 0.1 + u(rng);
    for (auto& v : w) v = u(rng) - 0.5;
    const double alpha = 0.2 + 0.6 * u(rng), beta2 = 0.5 + 3.0 * u(rng);
    auto loss = [&](double a) {
      const auto p = pr::keep_probs(b, pr::solve_beta1(b, a, beta2), beta2);
      return std::inner_product(w.begin(), w.end(), p.begin(), 0.0);
    };
    const double h = 1e-4;
    const double fd = (loss(alpha + h) - loss(alpha - h)) / (2 * h);
    const double an = pr::dL_dalpha(w, b, pr::solve_beta1(b, alpha, beta2), beta2);
    EXPECT_LT(std::abs(an - fd), 1e-3 * std::max(std::abs(fd), 1e-3));
  }
}

TEST(Beta2Schedule, PaperValues) {
  pr::Beta2Schedule s;
  EXPECT_DOUBLE_EQ(pr::beta2_at(s, 0), 0.05);
  EXPECT_DOUBLE_EQ(pr::beta2_at(s, 1), 0.055);
  for (int e = 0; e < 100; ++e) EXPECT_LT(s.at(e), s.at(e + 1));
  EXPECT_THROW(s.at(-1), std::invalid_argument);
}

TEST(FinalizeHard, ThresholdExamples) {
  const std::vector<double> b{1.0, 3.0};
  EXPECT_EQ(pr::finalize_hard(b, std::sqrt(3.0)), (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(pr::finalize_hard(b, 0.5), (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(pr::finalize_hard(b, 5.0), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(pr::finalize_hard(b, 3.0), (std::vector<double>{0.0, 1.0}));
}

TEST(TopK, KeepsLargestWithStableTies) {
  const std::vector<double> b{0.5, 2.0, 0.5, 1.0};
  EXPECT_EQ(pr::top_k_mask(b, 2), (std::vector<double>{0, 1, 0, 1}));
  EXPECT_EQ(pr::top_k_mask(b, 3), (std::vector<double>{1, 1, 0, 1}));
  EXPECT_EQ(pr::top_k_mask(b, 0), (std::vector<double>{0, 0, 0, 0}));
}

TEST(GroupState, RefreshKeepsExpectation) {
  pr::PruneGroupState s;
  const std::vector<double> raw{-0.4, 0.0, 1.2, 0.8, -2.0};
  s.set_importance(raw);
  EXPECT_EQ(s.b[1], pr::PruneGroupState::kImportanceFloor);
  EXPECT_EQ(s.b[0], 0.4);
  s.refresh(0.6, 1.5);
  EXPECT_NEAR(s.expected_kept(), 0.6 * 5, 1e-9 * 5);
  s.refresh(1.0, 1.5);
  EXPECT_EQ(s.expected_kept(), 5.0);
}
