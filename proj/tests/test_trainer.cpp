#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "recvsr/trainer.hpp"

using namespace recvsr;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.shallow_blocks = 1;
  cfg.deep_blocks = 1;
  return cfg;
}

Clip random_clip(std::uint64_t seed, std::size_t frames = 3, std::size_t size = 8) {
  std::mt19937_64 rng(seed);
  Clip c{"clip", {}, {}};
  for (std::size_t i = 0; i < frames; ++i) {
    c.hr.push_back(oracle::random_tensor(rng, {3, size * 4, size * 4}, 0.0, 1.0));
    c.lr.push_back(area_downsample(c.hr.back(), 4));
  }
  return c;
}

TrainingConfig tiny_training() {
  TrainingConfig cfg;
  cfg.model = tiny_config();
  cfg.iterations = 3;
  cfg.lr = 1e-3;
  cfg.patch = 4;
  cfg.clip_length = 2;
  return cfg;
}

}  // namespace

TEST(Metrics, PsnrClosedForm) {
  const Tensor a = Tensor::chw(3, 4, 4, 0.5f);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(a, Tensor::chw(3, 4, 4, 0.6f)), 20.0, 1e-5);
  EXPECT_NEAR(l1_loss(a, Tensor::chw(3, 4, 4, 0.25f)), 0.25, 1e-7);
  EXPECT_THROW(psnr(a, Tensor::chw(3, 4, 5)), Error);
  EXPECT_THROW(mean_psnr({}, {}), Error);
}

TEST(Metrics, BilinearBaselineShapeAndRange) {
  const auto clip = random_clip(1, 2, 5);
  const auto up = bilinear_baseline(clip.lr, 4);
  ASSERT_EQ(up.size(), 2u);
  EXPECT_EQ(up[0].shape(), (Shape{3, 20, 20}));
}

TEST(Augment, TemporalFlipReverses) {
  EXPECT_EQ(temporal_flip(std::vector<int>{1, 2, 3}), (std::vector<int>{3, 2, 1}));
  Rng rng = substream(1, "flip");
  int heads = 0;
  for (int i = 0; i < 10000; ++i) heads += draw_flip(rng);
  EXPECT_NEAR(heads / 10000.0, 0.5, 0.02);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto m = init_model<float>(tiny_config(), 1);
  const auto before = m.params;
  ad::GradientMap<float> grads;
  for (const auto& [name, p] : m.params.flatten()) grads[name] = Tensor(p->shape(), 0.5f);
  Adam adam({0.01, 0.9, 0.999, 1e-8});
  adam.step(m.params, grads);
  const auto fa = before.flatten();
  const auto fb = m.params.flatten();
  for (std::size_t i = 0; i < fa.size(); ++i)
    for (std::size_t j = 0; j < fa[i].second->size(); ++j)
      EXPECT_NEAR((*fa[i].second)[j] - (*fb[i].second)[j], 0.01, 1e-6);
  grads.erase(grads.begin());
  EXPECT_THROW(adam.step(m.params, grads), Error);
}

TEST(Adam, MinimisesAQuadratic) {
  auto m = init_model<float>(tiny_config(), 2);
  Adam adam({0.05, 0.9, 0.999, 1e-8});
  auto norm = [&] {
    double s = 0.0;
    for (const auto& [name, p] : m.params.flatten())
      for (float v : p->data()) s += static_cast<double>(v) * v;
    return s;
  };
  const double start = norm();
  for (int it = 0; it < 200; ++it) {
    ad::GradientMap<float> grads;
    for (const auto& [name, p] : m.params.flatten()) grads[name] = *p;  // d/dw of |w|^2 / 2
    adam.step(m.params, grads);
  }
  EXPECT_LT(norm(), 0.01 * start);
  EXPECT_EQ(adam.steps(), 200u);
}

TEST(Ema, BlendsAndChecksStructure) {
  auto a = init_model<float>(tiny_config(), 3);
  auto b = init_model<float>(tiny_config(), 4);
  auto shadow = b.params;
  ema_update(a.params, shadow, 0.25);
  const auto fa = a.params.flatten(), fb = b.params.flatten(), fs = shadow.flatten();
  for (std::size_t i = 0; i < fa.size(); ++i)
    for (std::size_t j = 0; j < fa[i].second->size(); ++j)
      EXPECT_NEAR((*fs[i].second)[j], 0.25 * (*fb[i].second)[j] + 0.75 * (*fa[i].second)[j], 1e-6);
  ModelConfig other = tiny_config();
  other.deep_blocks = 2;
  auto c = init_model<float>(other, 5);
  EXPECT_THROW(ema_update(a.params, c.params, 0.5), Error);
  EXPECT_THROW(ema_update(a.params, shadow, 1.5), Error);
}

TEST(ClipGradient, OutputBiasGradientMatchesSignOracle) {
  // For the unclamped output y = UP(.) + bilinear + b, dL/db_c is the mean
  // over frames of sum_{pixels of channel c} sign(y - gt) / numel.
  const auto m = init_model<float>(tiny_config(), 6);
  const auto clip = random_clip(6, 3);
  const auto g = clip_gradient(m, clip.lr, clip.hr, StepOptions{}, FlowConfig{});
  RunOptions opt;
  opt.step.clamp_output = false;
  const auto y = run_sequence(clip.lr, m, opt).outputs;
  double loss = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    double expect = 0.0;
    for (std::size_t t = 0; t < 3; ++t) {
      const auto yp = y[t].plane(c), hp = clip.hr[t].plane(c);
      double s = 0.0;
      for (std::size_t i = 0; i < yp.size(); ++i) s += (yp[i] > hp[i]) - (yp[i] < hp[i]);
      expect += s / static_cast<double>(y[t].size());
    }
    EXPECT_NEAR(g.grads.at("out.bias")[c], expect / 3.0, 1e-6);
  }
  for (std::size_t t = 0; t < 3; ++t) loss += oracle::mean_abs_diff(y[t], clip.hr[t]);
  EXPECT_NEAR(g.loss, loss / 3.0, 1e-5);
  EXPECT_EQ(g.grads.size(), m.params.flatten().size());
}

TEST(ClipGradient, FrameCountMismatch) {
  const auto m = init_model<float>(tiny_config(), 7);
  const auto clip = random_clip(7, 2);
  EXPECT_THROW(clip_gradient(m, clip.lr, {clip.hr[0]}, {}, {}), Error);
}

TEST(Training, DeterministicAndRecordsLosses) {
  const std::vector<Clip> data{random_clip(8), random_clip(9)};
  const auto cfg = tiny_training();
  const auto w0 = init_model<float>(cfg.model, 1);
  std::size_t calls = 0;
  const auto a = train_stage1(data, cfg, w0, [&](const LossRecord& l, const TrainResult&) {
    ++calls;
    EXPECT_EQ(l.iteration, calls);
  });
  const auto b = train_stage1(data, cfg, w0);
  EXPECT_EQ(calls, 3u);
  ASSERT_EQ(a.losses.size(), 3u);
  EXPECT_EQ(model_hash(a.weights), model_hash(b.weights));
  EXPECT_EQ(model_hash(a.ema), model_hash(b.ema));
  EXPECT_NE(model_hash(a.weights), model_hash(w0));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.losses[i].loss, b.losses[i].loss);
}

TEST(Training, BatchAveragesSampleGradients) {
  const std::vector<Clip> data{random_clip(10), random_clip(11)};
  auto cfg = tiny_training();
  cfg.batch = 2;
  cfg.iterations = 1;
  const auto w0 = init_model<float>(cfg.model, 2);
  const auto r = train_stage1(data, cfg, w0);
  ASSERT_EQ(r.losses.size(), 1u);
  EXPECT_TRUE(std::isfinite(r.losses[0].loss));
}

TEST(Training, ConfigErrors) {
  const std::vector<Clip> data{random_clip(12)};
  auto cfg = tiny_training();
  const auto w0 = init_model<float>(cfg.model, 3);
  auto bad = cfg;
  bad.patch = 6;
  EXPECT_THROW(train_stage1(data, bad, w0), Error);
  bad = cfg;
  bad.model.channels = 5;
  EXPECT_THROW(train_stage1(data, bad, w0), Error);
  EXPECT_THROW(train_stage1({}, cfg, w0), Error);
  Clip broken = random_clip(13);
  broken.hr.pop_back();
  EXPECT_THROW(train_stage1({broken}, cfg, w0), Error);
}

TEST(Training, NonFiniteInputNamesTheIteration) {
  Clip c = random_clip(14);
  for (auto& f : c.lr)
    for (auto& v : f.data()) v = std::numeric_limits<float>::quiet_NaN();
  const auto cfg = tiny_training();
  try {
    train_stage1({c}, cfg, init_model<float>(cfg.model, 4));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos) << e.what();
  }
}

TEST(Training, SmoothedEnds) {
  std::vector<LossRecord> l;
  for (std::size_t i = 1; i <= 10; ++i) l.push_back({i, static_cast<double>(i), 0.0});
  const auto [a, b] = smoothed_loss_ends(l, 3);
  EXPECT_DOUBLE_EQ(a, 2.0);
  EXPECT_DOUBLE_EQ(b, 9.0);
  EXPECT_THROW(smoothed_loss_ends({}, 3), Error);
}

TEST(Training, CropBounds) {
  const Tensor x = Tensor::chw(1, 4, 4, 1.0f);
  EXPECT_EQ(crop(x, 1, 1, 3, 3).shape(), (Shape{1, 3, 3}));
  EXPECT_THROW(crop(x, 2, 0, 3, 3), Error);
}

TEST(TrainingConfigKv, RoundTripAndOverrides) {
  TrainingConfig c;
  c.iterations = 42;
  c.lr = 3e-4;
  c.hsa = false;
  c.model.channels = 8;
  c.model.padding = Padding::kZero;
  c.flow.provider = FlowProvider::kZero;
  c.seed = 123456789012345ULL;
  const auto back = TrainingConfig::from_kv(KeyValues::parse(c.to_kv().to_string()));
  EXPECT_EQ(back.to_kv().to_string(), c.to_kv().to_string());
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_THROW(TrainingConfig::from_kv(KeyValues::parse("padding = mirror\n")), Error);
  EXPECT_THROW(TrainingConfig::from_kv(KeyValues::parse("patch = 10\n")), Error);
}

TEST(Checkpoint, WritesAllArtifacts) {
  const std::vector<Clip> data{random_clip(15)};
  const auto cfg = tiny_training();
  const auto r = train_stage1(data, cfg, init_model<float>(cfg.model, 5));
  const fs::path dir = fs::temp_directory_path() / "recvsr_ckpt_test";
  fs::remove_all(dir);
  save_checkpoint(dir, r, cfg);
  for (const char* f : {"model.hst", "model_ema.hst", "loss.csv", "manifest.txt"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  const auto m = KeyValues::load(dir / "manifest.txt");
  EXPECT_EQ(m.require_as<std::size_t>("iteration"), 3u);
  EXPECT_EQ(m.require("model_hash"), model_hash(load_model(dir / "model.hst")));
  EXPECT_EQ(m.require("bank_hash"), default_bank().fingerprint());
  fs::remove_all(dir);
}

TEST(Augment, DihedralCodesAreDistinctSymmetries) {
  std::mt19937_64 rng(16);
  const Tensor x = oracle::random_tensor(rng, {2, 3, 5});
  std::vector<Tensor> seen;
  for (unsigned code = 0; code < 8; ++code) {
    const Tensor y = dihedral(x, code);
    EXPECT_EQ(y.shape(), code & 4u ? (Shape{2, 5, 3}) : (Shape{2, 3, 5}));
    if (code < 4) {
      EXPECT_EQ(dihedral(y, code), x);
    }
    for (const auto& s : seen) EXPECT_FALSE(s.shape() == y.shape() && s == y) << code;
    seen.push_back(y);
  }
  EXPECT_EQ(dihedral(x, 4).at(1, 4, 2), x.at(1, 2, 4));
  EXPECT_EQ(dihedral(x, 1).at(0, 1, 0), x.at(0, 1, 4));
}
