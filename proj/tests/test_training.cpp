#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "portionnet/checkpoint.hpp"
#include "portionnet/optim.hpp"
#include "portionnet/training.hpp"
#include "support.hpp"

using namespace portionnet;
namespace fs = std::filesystem;

namespace {

TrainingConfig quick_config(int epochs = 2) {
  TrainingConfig cfg;
  cfg.epochs = epochs;
  cfg.micro_batch = 4;
  cfg.accumulation_steps = 2;
  cfg.seed = 3;
  cfg.validate_each_epoch = false;
  return cfg;
}

struct TinySetup {
  Dataset data;
  Dataset train;
  ModelConfig model;
};

const TinySetup& tiny() {
  static const TinySetup s = [] {
    TinySetup t;
    t.data = generate_synthetic_dataset(fixtures::tiny_data_config(4, 10));
    t.train = t.data.filter(Split::train);
    t.model = fixtures::tiny_model_config(4);
    return t;
  }();
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("portionnet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <class T>
std::vector<Matrix<T>> snapshot(PortionNet<T>& m) {
  std::vector<Matrix<T>> out;
  for (const auto& p : m.parameters()) out.push_back(*p.value);
  return out;
}

}  // namespace

TEST(SelectMode, ExtremesAreExact) {
  for (std::uint64_t i = 0; i < 5000; ++i) {
    ASSERT_EQ(select_mode(i, 0.0, 17), TrainingMode::multimodal);
    ASSERT_EQ(select_mode(i, 1.0, 17), TrainingMode::rgb_only);
  }
}

TEST(SelectMode, FractionConvergesToAlpha) {
  for (std::uint64_t seed : {0ull, 1ull, 2ull, 12345ull}) {
    int rgb = 0;
    for (std::uint64_t i = 0; i < 10000; ++i) rgb += select_mode(i, 0.3, seed) == TrainingMode::rgb_only;
    EXPECT_GE(rgb / 10000.0, 0.285);
    EXPECT_LE(rgb / 10000.0, 0.315);
  }
}

TEST(SelectMode, DeterministicAndValidated) {
  for (std::uint64_t i = 0; i < 100; ++i) EXPECT_EQ(select_mode(i, 0.5, 9), select_mode(i, 0.5, 9));
  EXPECT_THROW(select_mode(0, 1.5, 0), InvalidArgument);
}

TEST(OneCycle, ReferencePoints) {
  const long total = 150;
  const double base = 5e-4;
  EXPECT_NEAR(onecycle_lr(15, total, base), base, 1e-9);
  EXPECT_NEAR(onecycle_lr(0, total, base), base / 25.0, 1e-12);
  EXPECT_NEAR(onecycle_lr(total, total, base), base / 1e4, 1e-9);
  // Warmup rises, annealing falls.
  for (long s = 1; s <= 15; ++s) EXPECT_GT(onecycle_lr(s, total, base), onecycle_lr(s - 1, total, base));
  for (long s = 16; s <= total; ++s) EXPECT_LT(onecycle_lr(s, total, base), onecycle_lr(s - 1, total, base));
  EXPECT_THROW(onecycle_lr(-1, total, base), InvalidArgument);
  EXPECT_THROW(onecycle_lr(total + 1, total, base), InvalidArgument);
}

TEST(ClipGradients, ReferenceCases) {
  Matrix<double> a(1, 2), ga(1, 2), b(2, 1), gb(2, 1);
  ParamList<double> ps{{"a", &a, &ga, ParamGroup::head}, {"b", &b, &gb, ParamGroup::head}};
  ga << 0.3, 0.0;
  gb << 0.4, 0.0;  // norm 0.5
  EXPECT_NEAR(clip_gradients(ps, 1.0), 0.5, 1e-15);
  EXPECT_EQ(ga(0, 0), 0.3);
  EXPECT_EQ(gb(0, 0), 0.4);

  ga << 2.4, 0.0;
  gb << 3.2, 0.0;  // norm 4
  EXPECT_NEAR(clip_gradients(ps, 1.0), 4.0, 1e-12);
  EXPECT_NEAR(global_grad_norm(ps), 1.0, 1e-7);

  ga.setZero(), gb.setZero();
  clip_gradients(ps, 1.0);
  EXPECT_EQ(global_grad_norm(ps), 0.0);

  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    ga = fixtures::random_matrix(1, 2, rng, rng.uniform(0.0, 3.0));
    gb = fixtures::random_matrix(2, 1, rng, rng.uniform(0.0, 3.0));
    const double before = global_grad_norm(ps);
    clip_gradients(ps, 1.0);
    EXPECT_LE(global_grad_norm(ps), before + 1e-15);
  }
}

TEST(Training, AccumulationEquivalence) {
  const auto& t = tiny();
  Dataset ds = generate_synthetic_dataset(fixtures::tiny_data_config(4, 16));
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  ASSERT_EQ(idx.size(), 64u);
  const LossSettings ls = TrainingConfig{}.loss_settings();
  for (auto mode : {TrainingMode::multimodal, TrainingMode::rgb_only}) {
    PortionNet<double> a(t.model), b(t.model);
    const auto before = snapshot(a);
    AdamW<double> oa, ob;
    const auto ra = optimizer_step(a, oa, ds, idx, mode, ls, 16, 1.0, 1e-4, 5e-4);
    const auto rb = optimizer_step(b, ob, ds, idx, mode, ls, 64, 1.0, 1e-4, 5e-4);
    EXPECT_NEAR(ra.bundle.l_total, rb.bundle.l_total, 1e-10);
    const auto pa = snapshot(a), pb = snapshot(b);
    double diff = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) diff += ((pa[i] - before[i]) - (pb[i] - before[i])).squaredNorm();
    EXPECT_LE(std::sqrt(diff), 1e-5) << to_string(mode);
  }
}

TEST(Training, FullModelGradientsMatchFiniteDifferences) {
  const auto& t = tiny();
  for (const auto& c : fixtures::full_model_gradient_checks(t.data, t.model))
    EXPECT_LE(c.result.max_rel_error, 1e-4) << c.name << " worst " << c.result.worst;
}

TEST(Training, DeterministicGivenSeed) {
  const auto& t = tiny();
  const auto a = train<float>(t.model, t.train, nullptr, quick_config());
  const auto b = train<float>(t.model, t.train, nullptr, quick_config());
  ASSERT_EQ(a.history.steps.size(), b.history.steps.size());
  for (std::size_t i = 0; i < a.history.steps.size(); ++i)
    EXPECT_EQ(a.history.steps[i].bundle.l_total, b.history.steps[i].bundle.l_total);
  PortionNet<float> ma = a.model, mb = b.model;
  const auto pa = snapshot(ma), pb = snapshot(mb);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i] == pb[i]);
}

TEST(Training, ModeGatingAndSchedule) {
  const auto& t = tiny();
  auto cfg = quick_config(3);
  cfg.alpha_rgb_only = 0.0;
  const auto none = train<float>(t.model, t.train, nullptr, cfg);
  EXPECT_EQ(none.history.adapter_fed_steps, 0);
  for (const auto& s : none.history.steps) EXPECT_EQ(s.mode, TrainingMode::multimodal);

  cfg.alpha_rgb_only = 1.0;
  const auto all = train<float>(t.model, t.train, nullptr, cfg);
  EXPECT_EQ(all.history.adapter_fed_steps, static_cast<long>(all.history.steps.size()));

  cfg.alpha_rgb_only = 0.3;
  const auto mixed = train<float>(t.model, t.train, nullptr, cfg);
  const long per_epoch = steps_per_epoch(t.train.size(), cfg);
  EXPECT_EQ(static_cast<long>(mixed.history.steps.size()), per_epoch * 3);
  for (const auto& s : mixed.history.steps) {
    EXPECT_EQ(s.mode, select_mode(static_cast<std::uint64_t>(s.step), 0.3, cfg.seed));
    EXPECT_NEAR(s.lr_heads / s.lr_encoders, 5.0, 1e-12);
    EXPECT_LE(s.bundle.identity_residual(), 1e-6 * std::max(1.0, std::abs(s.bundle.l_total)));
  }
  EXPECT_EQ(mixed.history.epochs.size(), 3u);
}

TEST(Training, GradNormAdjustsWeightsAndKeepsSum) {
  const auto& t = tiny();
  auto cfg = quick_config(2);
  cfg.task.gradnorm_enabled = true;
  const auto st = train<float>(t.model, t.train, nullptr, cfg);
  EXPECT_EQ(st.history.gradnorm_initial_losses.size(), 2u);
  EXPECT_NEAR(st.task_weights.cls + st.task_weights.reg, 1.1, 1e-6);
  EXPECT_NE(st.task_weights.cls, 1.0);
  EXPECT_EQ(st.task_weights.distill, 0.5);
}

TEST(Training, NonFiniteLossAbortsWithLastGoodState) {
  const auto& t = tiny();
  Dataset bad = t.train;
  bad.samples[3].volume = std::nan("");
  try {
    train<float>(t.model, bad, nullptr, quick_config());
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted<float>& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    EXPECT_EQ(e.last_good().epoch, 0);
  }
}

TEST(Training, RejectsInvalidConfig) {
  const auto& t = tiny();
  auto cfg = quick_config();
  cfg.alpha_rgb_only = 1.2;
  EXPECT_THROW(train<float>(t.model, t.train, nullptr, cfg), ConfigError);
  cfg = quick_config();
  ModelConfig wrong = t.model;
  wrong.heads.class_count = 7;
  EXPECT_THROW(train<float>(wrong, t.train, nullptr, cfg), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto& t = tiny();
  auto st = train<float>(t.model, t.train, nullptr, quick_config());
  const fs::path dir = temp_dir("ckpt_roundtrip");
  const std::string path = (dir / "model.pnck").string();
  save_checkpoint(st, {3, "abc123", Json::object()}, path);
  auto loaded = load_checkpoint(path, architecture_digest(st.model));
  EXPECT_EQ(loaded.info.seed, 3u);
  EXPECT_EQ(loaded.info.config_digest, "abc123");
  EXPECT_EQ(loaded.state.epoch, st.epoch);
  EXPECT_EQ(loaded.state.history.steps.size(), st.history.steps.size());
  EXPECT_EQ(loaded.state.optimizer.steps(), st.optimizer.steps());

  const auto pa = snapshot(st.model), pb = snapshot(loaded.state.model);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(pa[i] == pb[i]);
  for (const auto& [name, m] : st.optimizer.state()) {
    const auto& other = loaded.state.optimizer.state().at(name);
    EXPECT_TRUE(m.m == other.m && m.v == other.v) << name;
  }

  const Batch<float> b = make_batch<float>(t.data);
  for (bool with_points : {false, true}) {
    const auto p1 = st.model.predict(b.images, with_points ? &b.points : nullptr);
    const auto p2 = loaded.state.model.predict(b.images, with_points ? &b.points : nullptr);
    EXPECT_TRUE(p1.volume == p2.volume);
    EXPECT_TRUE(p1.energy == p2.energy);
    EXPECT_TRUE(p1.class_logits == p2.class_logits);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsRejected) {
  const auto& t = tiny();
  auto st = train<float>(t.model, t.train, nullptr, quick_config(1));
  const fs::path dir = temp_dir("ckpt_corrupt");
  const std::string path = (dir / "model.pnck").string();
  save_checkpoint(st, {}, path);
  std::vector<char> bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::vector<char>& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x5A;
  write(flipped);
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  write(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 3)));
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  write(std::vector<char>{'n', 'o', 'p', 'e'});
  EXPECT_THROW(load_checkpoint(path), IntegrityError);
  EXPECT_THROW(load_checkpoint((dir / "missing.pnck").string()), InvalidArgument);
  fs::remove_all(dir);
}

TEST(Checkpoint, DigestMismatchNamesBoth) {
  const auto& t = tiny();
  auto st = train<float>(t.model, t.train, nullptr, quick_config(1));
  const fs::path dir = temp_dir("ckpt_digest");
  const std::string path = (dir / "model.pnck").string();
  save_checkpoint(st, {}, path);
  ModelConfig other = t.model;
  other.adapter.hidden = 32;
  PortionNet<float> different(other);
  const std::string expected = architecture_digest(different);
  const std::string stored = architecture_digest(st.model);
  ASSERT_NE(expected, stored);
  try {
    load_checkpoint(path, expected);
    FAIL() << "expected DigestMismatch";
  } catch (const DigestMismatch& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(expected), std::string::npos);
    EXPECT_NE(msg.find(stored), std::string::npos);
  }
  fs::remove_all(dir);
}
