#include <gtest/gtest.h>

#include <cmath>

#include "portionnet/adapter.hpp"
#include "portionnet/fusion_heads.hpp"
#include "portionnet/model.hpp"
#include "support.hpp"

using namespace portionnet;

TEST(Adapter, ShapeMatchesTeacher) {
  Rng rng(1), data(2);
  Adapter<double> ad(AdapterConfig{}, rng);
  const Matrix<double> y = ad.apply(fixtures::random_matrix(6, 256, data));
  EXPECT_EQ(y.rows(), 6);
  EXPECT_EQ(y.cols(), 256);
}

TEST(Adapter, ZeroParametersGiveZeroOutput) {
  Rng rng(1), data(3);
  Adapter<double> ad(AdapterConfig{}, rng);
  ad.zero();
  const Matrix<double> y = ad.apply(fixtures::random_matrix(4, 256, data, 10.0));
  EXPECT_EQ(y.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Adapter, LightweightInFaithfulConfiguration) {
  PortionNet<float> model(faithful_model_config());
  ParamList<float> adapter;
  model.adapter().parameters(adapter, "adapter", ParamGroup::head);
  const auto total = parameter_count(model.parameters());
  const auto own = parameter_count(adapter);
  EXPECT_EQ(own, 256u * 512u + 512u + 512u * 256u + 256u);
  EXPECT_LT(static_cast<double>(own), 0.05 * static_cast<double>(total));
}

TEST(Adapter, GradientsMatchFiniteDifferences) {
  for (const auto& c : fixtures::module_gradient_checks())
    if (c.name == "adapter") {
      EXPECT_LE(c.result.max_rel_error, 1e-4) << c.result.worst;
    }
}

TEST(Fusion, OutputShapeAndDimensionCheck) {
  Rng rng(4), data(5);
  Fusion<double> fu(FusionConfig{}, rng);
  EXPECT_EQ(fu.rgb_to_geo().heads(), 8);
  const Matrix<double> a = fixtures::random_matrix(3, 256, data), b = fixtures::random_matrix(3, 256, data);
  const Matrix<double> y = fu.apply(a, b);
  EXPECT_EQ(y.rows(), 3);
  EXPECT_EQ(y.cols(), 256);
  EXPECT_THROW(fu.apply(a, fixtures::random_matrix(3, 128, data)), InvalidArgument);
  EXPECT_THROW(fu.apply(a, fixtures::random_matrix(2, 256, data)), InvalidArgument);
}

TEST(Fusion, ZeroedOutputProjectionReducesToLayerNormOfQuery) {
  Rng rng(6), data(7);
  CrossAttention<double> attn(16, 4, rng);
  ParamList<double> ps;
  attn.parameters(ps, "attn", ParamGroup::head);
  for (auto& p : ps)
    if (p.name.find(".o.") != std::string::npos) p.value->setZero();
  const Matrix<double> q = fixtures::random_matrix(3, 16, data), kv = fixtures::random_matrix(3, 16, data);
  EXPECT_EQ(attn.apply(q, kv).cwiseAbs().maxCoeff(), 0.0);

  // Residual branch: LN(q + attn(q, kv)) == LN(q) with untouched default gain/shift.
  LayerNorm<double> ln(16);
  const Matrix<double> out = ln.apply(q + attn.apply(q, kv));
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    const double mean = q.row(r).mean();
    const double var = (q.row(r).array() - mean).square().mean();
    for (Eigen::Index c = 0; c < q.cols(); ++c)
      EXPECT_NEAR(out(r, c), (q(r, c) - mean) / std::sqrt(var + 1e-5), 1e-12);
  }
}

TEST(Fusion, SingleTokenAttentionWeightIsExactlyOne) {
  Rng rng(8), data(9);
  CrossAttention<double> attn(256, 8, rng);
  const Matrix<double> q = fixtures::random_matrix(5, 256, data, 30.0), kv = fixtures::random_matrix(5, 256, data, 30.0);
  attn.forward(q, kv);
  const Matrix<double>& w = attn.last_weights();
  EXPECT_EQ(w.rows(), 5);
  EXPECT_EQ(w.cols(), 8);
  for (Eigen::Index i = 0; i < w.size(); ++i) EXPECT_EQ(w.data()[i], 1.0);
}

TEST(Fusion, GradientsMatchFiniteDifferences) {
  for (const auto& c : fixtures::module_gradient_checks())
    if (c.name == "fusion") {
      EXPECT_LE(c.result.max_rel_error, 1e-4) << c.result.worst;
    }
}

TEST(Heads, ClassCountConfigurableAndSoftmaxNormalized) {
  Rng data(10);
  for (int classes : {108, 12}) {
    Rng rng(11);
    HeadsConfig cfg;
    cfg.class_count = classes;
    Heads<double> h(cfg, rng);
    const auto p = h.apply(fixtures::random_matrix(4, 256, data));
    ASSERT_EQ(p.class_logits.cols(), classes);
    for (Eigen::Index r = 0; r < 4; ++r) {
      const auto row = p.class_logits.row(r);
      const double m = row.maxCoeff();
      const double z = (row.array() - m).exp().sum();
      EXPECT_NEAR(((row.array() - m).exp() / z).sum(), 1.0, 1e-6);
    }
  }
}

TEST(Heads, SoftplusValues) {
  EXPECT_NEAR(softplus(0.0), 0.693147, 1e-6);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_GT(softplus(-50.0), 0.0);
  EXPECT_LT(softplus(-50.0), 1e-21);
  EXPECT_NEAR(softplus(50.0), 50.0, 1e-9);
  EXPECT_GT(softplus(-700.0), 0.0);
  EXPECT_GT(softplus(-80.0f), 0.0f);
  EXPECT_GT(softplus(-1000.0f), 0.0f);
  EXPECT_GT(softplus(-1e30f), 0.0f);
  EXPECT_GT(softplus(-1e300), 0.0);
}

TEST(Heads, VolumeIsPositiveForExtremeFeatures) {
  Rng rng(12), data(13);
  Heads<float> h(HeadsConfig{}, rng);
  const Matrix<float> f = fixtures::random_matrix(200, 256, data, 100.0).cast<float>();
  const auto p = h.apply(f);
  EXPECT_GT(p.volume.minCoeff(), 0.0f);
}

TEST(Heads, EnergyInputIsFusedPlusVolume) {
  Rng rng(14);
  Heads<double> h(HeadsConfig{}, rng);
  EXPECT_EQ(h.energy_input_dim(), 257);
}

TEST(Heads, EnergyDependsOnVolumeInput) {
  Rng rng(15), data(16);
  Heads<double> h(HeadsConfig{}, rng);
  Matrix<double> in = fixtures::random_matrix(1, 257, data);
  auto energy = [&](double v) {
    in(0, 256) = v;
    return h.energy_mlp().apply(in)(0, 0);
  };
  const double eps = 1e-5;
  const double derivative = (energy(1.0 + eps) - energy(1.0 - eps)) / (2 * eps);
  EXPECT_GT(std::abs(derivative), 1e-6);
}

TEST(Heads, BatchPermutationPermutesOutputs) {
  Rng rng(17), data(18);
  Heads<double> h(HeadsConfig{}, rng);
  const Matrix<double> f = fixtures::random_matrix(4, 256, data);
  Matrix<double> g(4, 256);
  const int perm[4] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) g.row(i) = f.row(perm[i]);
  const auto a = h.apply(f), b = h.apply(g);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(b.energy(i), a.energy(perm[i]), 1e-12);
    EXPECT_NEAR(b.volume(i), a.volume(perm[i]), 1e-12);
  }
}

TEST(Heads, GradientsMatchFiniteDifferences) {
  for (const auto& c : fixtures::module_gradient_checks())
    if (c.name == "heads") {
      EXPECT_LE(c.result.max_rel_error, 1e-4) << c.result.worst;
    }
}
