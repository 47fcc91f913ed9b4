#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "portionnet/checkpoint.hpp"
#include "portionnet/evaluation.hpp"
#include "portionnet/serialize.hpp"
#include "support.hpp"

using namespace portionnet;

namespace {
using V = std::vector<double>;
}

TEST(Metrics, MapeExamples) {
  EXPECT_NEAR(mape(V{110, 80}, V{100, 100}), 15.0, 1e-9);
  EXPECT_NEAR(mape(V{5, 7, 9}, V{5, 7, 9}), 0.0, 1e-9);
  EXPECT_NEAR(mape(V{1.1 * 3, 1.1 * 40, 1.1 * 0.5}, V{3, 40, 0.5}), 10.0, 1e-9);
  EXPECT_THROW(mape(V{1, 2}, V{1, 0}), InvalidArgument);
}

TEST(Metrics, MaeExamples) {
  EXPECT_NEAR(mae(V{1, 3}, V{2, 2}), 1.0, 1e-9);
  EXPECT_NEAR(mae(V{4, 5}, V{4, 5}), 0.0, 1e-9);
  EXPECT_NEAR(mae(V{2.5, -0.5, 7.5}, V{0, -3, 5}), 2.5, 1e-9);
  EXPECT_THROW(mae(V{}, V{}), InvalidArgument);
  EXPECT_THROW(mae(V{1}, V{1, 2}), InvalidArgument);
}

TEST(Metrics, R2Examples) {
  EXPECT_NEAR(r2(V{0, 0}, V{1, -1}), 0.0, 1e-9);
  EXPECT_NEAR(r2(V{1, 2, 3}, V{1, 2, 3}), 1.0, 1e-9);
  EXPECT_NEAR(r2(V{2, 2, 2}, V{1, 2, 3}), 0.0, 1e-9);
  EXPECT_THROW(r2(V{1, 2}, V{3, 3}), InvalidArgument);
}

TEST(Metrics, AccuracyExamples) {
  Matrix<double> logits(4, 3);
  logits << 3, 1, 0, 0, 2, 1, 0, 0, 5, 1, 4, 2;
  const std::vector<int> labels{0, 1, 2, 0};
  EXPECT_NEAR(accuracy<double>(logits, labels), 75.0, 1e-9);
  const std::vector<int> right{0, 1, 2, 1}, wrong{1, 0, 0, 2};
  EXPECT_NEAR(accuracy<double>(logits, right), 100.0, 1e-9);
  EXPECT_NEAR(accuracy<double>(logits, wrong), 0.0, 1e-9);
  Matrix<double> ties = Matrix<double>::Constant(1, 3, 2.0);
  const std::vector<int> first{0};
  EXPECT_NEAR(accuracy<double>(ties, first), 100.0, 1e-9);
}

TEST(Metrics, ScaleEquivarianceAndOrderInvariance) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    V p(20), t(20);
    for (std::size_t i = 0; i < 20; ++i) p[i] = rng.uniform(1, 500), t[i] = rng.uniform(1, 500);
    const double k = rng.uniform(0.01, 100.0);
    V kp(p), kt(t);
    for (auto& x : kp) x *= k;
    for (auto& x : kt) x *= k;
    EXPECT_NEAR(mae(kp, kt), k * mae(p, t), 1e-9 * k * mae(p, t));
    EXPECT_NEAR(mape(kp, kt), mape(p, t), 1e-9 * mape(p, t));
    EXPECT_NEAR(r2(kp, kt), r2(p, t), 1e-9 * (1 + std::abs(r2(p, t))));

    std::vector<std::size_t> perm(20);
    for (std::size_t i = 0; i < 20; ++i) perm[i] = i;
    for (std::size_t i = 20; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    V sp(20), st(20);
    for (std::size_t i = 0; i < 20; ++i) sp[i] = p[perm[i]], st[i] = t[perm[i]];
    EXPECT_NEAR(mae(sp, st), mae(p, t), 1e-9);
    EXPECT_NEAR(mape(sp, st), mape(p, t), 1e-9);
    EXPECT_NEAR(r2(sp, st), r2(p, t), 1e-9);
  }
}

TEST(Metrics, PooledR2IsMeanOfPerTarget) {
  Rng rng(2);
  V vp(30), vt(30), ep(30), et(30);
  for (std::size_t i = 0; i < 30; ++i) {
    vt[i] = rng.uniform(10, 400), vp[i] = vt[i] + rng.normal() * 30;
    et[i] = rng.uniform(10, 900), ep[i] = et[i] + rng.normal() * 90;
  }
  EXPECT_NEAR(pooled_r2(vp, vt, ep, et), 0.5 * (r2(vp, vt) + r2(ep, et)), 1e-12);
  EXPECT_NEAR(pooled_r2(vt, vt, et, et), 1.0, 1e-12);
}

TEST(Evaluate, ModesDeterminismAndNoMutation) {
  const Dataset ds = generate_synthetic_dataset(fixtures::tiny_data_config(4, 6));
  PortionNet<float> model(fixtures::tiny_model_config(4));
  model.heads().set_target_scales(150.0, 180.0);
  const std::string before = parameter_digest(model);
  const auto rgb = evaluate(model, ds, InferenceMode::rgb, 5);
  const auto pc = evaluate(model, ds, InferenceMode::rgb_pc, 5);
  EXPECT_EQ(parameter_digest(model), before);
  EXPECT_EQ(rgb.mode, InferenceMode::rgb);
  EXPECT_EQ(pc.mode, InferenceMode::rgb_pc);
  EXPECT_EQ(rgb.samples, ds.size());
  EXPECT_NE(rgb.volume_mae, pc.volume_mae);
  const auto again = evaluate(model, ds, InferenceMode::rgb, 5);
  EXPECT_EQ(again.volume_mae, rgb.volume_mae);
  EXPECT_EQ(again.r2, rgb.r2);
  EXPECT_GE(rgb.volume_mape, 0.0);
  EXPECT_LE(rgb.r2, 1.0);
  EXPECT_TRUE(rgb.accuracy >= 0.0 && rgb.accuracy <= 100.0);

  // RGB mode must route the adapter: zeroing it changes RGB results only.
  PortionNet<float> zeroed = model;
  zeroed.adapter().zero();
  EXPECT_NE(evaluate(zeroed, ds, InferenceMode::rgb).volume_mae, rgb.volume_mae);
  EXPECT_EQ(evaluate(zeroed, ds, InferenceMode::rgb_pc).volume_mae, pc.volume_mae);
}

TEST(Evaluate, ChunkingAndOrderDoNotMatter) {
  Dataset ds = generate_synthetic_dataset(fixtures::tiny_data_config(4, 6));
  PortionNet<float> model(fixtures::tiny_model_config(4));
  const auto whole = metrics_from(predict_dataset(model, ds, InferenceMode::rgb, 1000), InferenceMode::rgb);
  const auto chunked = metrics_from(predict_dataset(model, ds, InferenceMode::rgb, 5), InferenceMode::rgb);
  EXPECT_NEAR(whole.volume_mae, chunked.volume_mae, 1e-4);
  std::reverse(ds.samples.begin(), ds.samples.end());
  const auto reversed = metrics_from(predict_dataset(model, ds, InferenceMode::rgb, 1000), InferenceMode::rgb);
  EXPECT_NEAR(reversed.volume_mape, whole.volume_mape, 1e-4);
  EXPECT_EQ(reversed.accuracy, whole.accuracy);
}

TEST(Evaluate, ClassCountMismatchRejected) {
  const Dataset ds = generate_synthetic_dataset(fixtures::tiny_data_config(4, 3));
  PortionNet<float> model(fixtures::tiny_model_config(5));
  EXPECT_THROW(evaluate(model, ds, InferenceMode::rgb), InvalidArgument);
}

TEST(Aggregate, MeanAndSampleStd) {
  std::vector<MetricsReport> reports(3);
  const double mae_values[3] = {10.0, 12.0, 14.0};
  for (int i = 0; i < 3; ++i) reports[static_cast<std::size_t>(i)].volume_mae = mae_values[i];
  for (int i = 0; i < 3; ++i) reports[static_cast<std::size_t>(i)].seed = static_cast<std::uint64_t>(i + 1);
  const auto agg = aggregate(reports);
  EXPECT_NEAR(agg.mean.volume_mae, 12.0, 1e-12);
  EXPECT_NEAR(agg.stddev.volume_mae, 2.0, 1e-12);
  EXPECT_EQ(agg.seeds, (std::vector<std::uint64_t>{1, 2, 3}));
  const Json j = to_json(agg);
  EXPECT_NEAR(j.at("volume_mae_mean").get<double>(), 12.0, 1e-12);
  EXPECT_NEAR(j.at("volume_mae_std").get<double>(), 2.0, 1e-12);
}

TEST(Aggregate, EveryFieldIndependently) {
  std::vector<MetricsReport> reports(3);
  for (int i = 0; i < 3; ++i) {
    auto& r = reports[static_cast<std::size_t>(i)];
    const double k = i + 1;  // field f of report i holds base_f * k
    r.accuracy = 10 * k, r.volume_mae = 20 * k, r.volume_mape = 30 * k, r.energy_mae = 40 * k;
    r.energy_mape = 50 * k, r.r2 = 0.1 * k, r.r2_volume = 0.2 * k, r.r2_energy = 0.3 * k;
  }
  const Json j = to_json(aggregate(reports));
  const std::pair<const char*, double> base[] = {{"accuracy", 10},    {"volume_mae", 20}, {"volume_mape", 30},
                                                 {"energy_mae", 40},  {"energy_mape", 50}, {"r2", 0.1},
                                                 {"r2_volume", 0.2}, {"r2_energy", 0.3}};
  for (const auto& [name, b] : base) {
    // Values b, 2b, 3b: mean 2b, sample std b.
    EXPECT_NEAR(j.at(std::string(name) + "_mean").get<double>(), 2 * b, 1e-12) << name;
    EXPECT_NEAR(j.at(std::string(name) + "_std").get<double>(), b, 1e-12) << name;
  }
}

TEST(Report, JsonRoundTrip) {
  MetricsReport r;
  r.mode = InferenceMode::rgb_pc;
  r.accuracy = 81.25, r.volume_mae = 17.5, r.volume_mape = 12.25, r.energy_mae = 20.0, r.energy_mape = 14.5;
  r.r2 = 0.9, r.r2_volume = 0.91, r.r2_energy = 0.89, r.seed = 2, r.samples = 96;
  const MetricsReport back = metrics_report_from_json(to_json(r));
  EXPECT_EQ(back.mode, r.mode);
  EXPECT_EQ(back.volume_mape, r.volume_mape);
  EXPECT_EQ(back.r2_energy, r.r2_energy);
  EXPECT_EQ(back.samples, r.samples);
}

TEST(Baseline, PredictsTrainingMean) {
  const Dataset ds = generate_synthetic_dataset(fixtures::tiny_data_config(4, 10));
  const Dataset train = ds.filter(Split::train), test = ds.filter(Split::test);
  const auto b = mean_baseline(train, test);
  double mean_v = 0;
  for (const auto& s : train.samples) mean_v += s.volume;
  mean_v /= static_cast<double>(train.size());
  double expected = 0;
  for (const auto& s : test.samples) expected += std::abs(mean_v - s.volume);
  EXPECT_NEAR(b.volume_mae, expected / static_cast<double>(test.size()), 1e-9);
}
