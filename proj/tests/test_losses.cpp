#include <gtest/gtest.h>

#include <cmath>

#include "portionnet/losscheck.hpp"
#include "portionnet/losses.hpp"
#include "support.hpp"

using namespace portionnet;
using M = Matrix<double>;

TEST(LossChecks, AllReferenceExamplesPass) {
  const auto checks = run_loss_checks();
  EXPECT_EQ(checks.size(), 34u);
  for (const auto& c : checks) {
    EXPECT_TRUE(c.passed) << c.name << ": expected " << c.expected << " got " << c.actual;
    if (c.name.rfind("gradient/", 0) != 0) {
      EXPECT_LE(c.tolerance, 1e-6) << c.name;
    }
  }
}

TEST(LossChecks, PerturbedConstantIsReportedByName) {
  for (const auto& c : run_loss_checks("distill_kl/two_dim_T1"))
    EXPECT_EQ(c.passed, c.name != "distill_kl/two_dim_T1") << c.name;
  for (const auto& c : run_loss_checks("gradient/distill_cos"))
    EXPECT_EQ(c.passed, c.name != "gradient/distill_cos") << c.name;
}

TEST(DistillMse, OffsetOracle) {
  // Independent evaluation: per-row sum of squared 0.1 offsets over 256 dims.
  Rng rng(1);
  const M f = fixtures::random_matrix(5, 256, rng);
  double expected = 0;
  for (int i = 0; i < 256; ++i) expected += 0.1 * 0.1;
  EXPECT_NEAR(distill_mse<double>(M(f.array() + 0.1), f).value, expected, 1e-6);
  EXPECT_NEAR(expected, 2.56, 1e-12);
}

TEST(DistillCos, ZeroVectorIsStabilized) {
  const M z = M::Zero(2, 8);
  Rng rng(2);
  const M f = fixtures::random_matrix(2, 8, rng);
  const auto r = distill_cos<double>(z, f);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_NEAR(r.value, 1.0, 1e-12);
  EXPECT_TRUE(r.d_a.allFinite());
}

TEST(DistillKl, TwoDimensionalOracle) {
  // Teacher p = softmax(ln 2, 0) = (2/3, 1/3); student q = (1/2, 1/2).
  const double p0 = 2.0 / 3.0, p1 = 1.0 / 3.0;
  const double expected = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
  M fp(1, 2), fa = M::Zero(1, 2);
  fp << std::log(2.0), 0.0;
  EXPECT_NEAR(distill_kl<double>(fa, fp, 1.0).value, expected, 1e-12);
  EXPECT_NEAR(expected, 0.056633, 1e-6);
}

TEST(DistillKl, NonNegativeAndTemperatureFlag) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const M a = fixtures::random_matrix(3, 32, rng, 3.0), b = fixtures::random_matrix(3, 32, rng, 3.0);
    const double plain = distill_kl<double>(a, b, 4.0).value;
    EXPECT_GE(plain, 0.0);
    EXPECT_NEAR(distill_kl<double>(a, b, 4.0, true).value, 16.0 * plain, 1e-12 * (1 + plain));
  }
  EXPECT_THROW(distill_kl<double>(M::Zero(1, 4), M::Zero(1, 4), 0.0), std::exception);
}

TEST(DistillTotal, LinearInWeights) {
  Rng rng(4);
  const M a = fixtures::random_matrix(3, 64, rng), b = fixtures::random_matrix(3, 64, rng);
  const DistillWeights w1{0.7, 0.2, 0.1, 4.0, false}, w2{0.1, 0.5, 0.9, 4.0, false};
  const DistillWeights sum{0.8, 0.7, 1.0, 4.0, false};
  const double l1 = distill_total<double>(a, b, w1).total, l2 = distill_total<double>(a, b, w2).total;
  EXPECT_NEAR(distill_total<double>(a, b, sum).total, l1 + l2, 1e-10);
}

TEST(DistillLosses, RejectShapeMismatch) {
  EXPECT_THROW(distill_mse<double>(M::Zero(2, 4), M::Zero(2, 5)), InvalidArgument);
  EXPECT_THROW(distill_cos<double>(M::Zero(2, 4), M::Zero(3, 4)), InvalidArgument);
}

TEST(Classification, SmoothedTargetAndLabelValidation) {
  EXPECT_NEAR(smoothed_true_target(0.05, 108), 0.95 + 0.05 / 108.0, 1e-15);
  EXPECT_NEAR(smoothed_true_target(0.05, 108), 0.950463, 1e-6);
  const std::vector<int> bad{0, 12};
  EXPECT_THROW(classification_loss<double>(M::Zero(2, 12), bad, 0.05), InvalidArgument);
  const std::vector<int> neg{-1};
  EXPECT_THROW(classification_loss<double>(M::Zero(1, 12), neg, 0.05), InvalidArgument);
}

TEST(Classification, UniformLogitsGiveLogC) {
  for (int c : {2, 12, 108})
    for (double eps : {0.0, 0.05, 0.3}) {
      const std::vector<int> labels{0, c - 1};
      EXPECT_NEAR(classification_loss<double>(M::Constant(2, c, 0.7), labels, eps).value, std::log(c), 1e-12);
    }
}

TEST(Huber, BranchesAndContinuity) {
  EXPECT_DOUBLE_EQ(huber(0.25, 0.5), 0.5 * 0.25 * 0.25);
  EXPECT_DOUBLE_EQ(huber(-1.0, 0.5), 0.5 * (1.0 - 0.25));
  EXPECT_NEAR(huber(0.5 + 1e-12, 0.5), huber(0.5 - 1e-12, 0.5), 1e-11);
}

TEST(Regression, ComponentIsolationRecoversWeights) {
  Vector<double> v(2), e(2);
  v << 100.0, 300.0;
  e << 120.0, 280.0;
  const double r = 0.2;
  const double vol_only = regression_loss<double>(Vector<double>(v.array() + r), v, e, e, 0.5).value;
  EXPECT_NEAR(vol_only / (r + huber(r, 0.5)), 0.4, 1e-12);
  const double scale = e.cwiseAbs().mean();
  const double en_only = regression_loss<double>(v, v, Vector<double>(e.array() + r * scale), e, 0.5).value;
  EXPECT_NEAR(en_only / (r + huber(r, 0.5)), 0.6, 1e-12);
  EXPECT_THROW(regression_loss<double>(Vector<double>(0), Vector<double>(0), Vector<double>(0), Vector<double>(0), 0.5),
               InvalidArgument);
}

TEST(Regression, EnergyNormalizationIsScaleInvariant) {
  Vector<double> v(3), e(3), eh(3);
  v << 1.0, 2.0, 3.0;
  e << 10.0, 20.0, 40.0;
  eh << 12.0, 18.0, 41.0;
  const double base = regression_loss<double>(v, v, eh, e, 0.5).value;
  EXPECT_NEAR(regression_loss<double>(v, v, Vector<double>(eh * 1000.0), Vector<double>(e * 1000.0), 0.5).value, base,
              1e-12);
}

TEST(TotalLoss, IdentityAndNonFiniteAbort) {
  const LossComponents c{0.3, 2.5, 1.25, 0, 0, 0};
  const auto b = total_loss(c, TaskWeights{2.0, 0.1, 0.5});
  EXPECT_NEAR(b.l_total, 2.0 * 0.3 + 0.1 * 2.5 + 0.5 * 1.25, 1e-12);
  EXPECT_LE(b.identity_residual(), 1e-12);
  EXPECT_THROW(total_loss({std::nan(""), 0, 0, 0, 0, 0}, TaskWeights{}), NonFiniteLoss);
  EXPECT_THROW(total_loss({0, INFINITY, 0, 0, 0, 0}, TaskWeights{}), NonFiniteLoss);
}

TEST(GradNorm, FixedPointDirectionAndSum) {
  const std::vector<double> w{1.0, 0.1}, l{2.0, 3.0}, g{0.4, 0.4};
  const auto same = gradnorm_step(w, l, l, g, 1.5, 0.025);
  EXPECT_NEAR(same[0], 1.0, 1e-12);
  EXPECT_NEAR(same[1], 0.1, 1e-12);
  const std::vector<double> g2{0.8, 0.4};
  const auto moved = gradnorm_step(w, l, l, g2, 1.5, 0.025);
  EXPECT_LT(moved[0], w[0]);
  EXPECT_NEAR(moved[0] + moved[1], 1.1, 1e-6);
}

TEST(GradNorm, ZeroInitialLossClampsRatio) {
  const std::vector<double> w{1.0, 1.0}, l{0.5, 2.0}, l0{0.0, 2.0}, g{0.3, 0.3};
  const auto nw = gradnorm_step(w, l, l0, g, 1.5, 0.025);
  EXPECT_TRUE(std::isfinite(nw[0]) && std::isfinite(nw[1]));
  EXPECT_NEAR(nw[0], 1.0, 1e-12);  // both ratios are 1, norms equal
}

TEST(LossGradients, MatchFiniteDifferences) {
  for (const auto& c : run_loss_checks())
    if (c.name.rfind("gradient/", 0) == 0) {
      EXPECT_LE(c.actual, 1e-4) << c.name;
    }
}
