#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "usmtl/training.hpp"

using namespace usmtl;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.width = 0.125;
  c.gcn_kernel = 3;
  c.sigma = 2.0;
  return c;
}

const Dataset& tiny_dataset() {
  static const Dataset ds = [] {
    DatasetOptions d;
    d.view_counts = counts_per_view(2);
    d.target_size = 96;
    d.target_spacing = 256.0 / 96.0;
    d.phantom.field_mm = 256;
    d.phantom.min_spacing = 2.0;
    d.phantom.max_spacing = 3.0;
    d.seed = 5;
    return build_dataset(d);
  }();
  return ds;
}

TrainConfig quick() {
  auto c = TrainConfig::desk();
  c.landmark_epochs = 1;
  c.view_epochs = 1;
  c.regularizer_warmup_epochs = 0;
  c.seed = 3;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("usmtl_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::vector<torch::Tensor> snapshot(MultiTaskModel& m, Partition p) {
  std::vector<torch::Tensor> out;
  for (const auto& t : m->parameters_in(p)) out.push_back(t.detach().clone());
  for (const auto& b : m->named_buffers())
    if (MultiTaskModel::Impl::partition_of(b.key()) == p) out.push_back(b.value().clone());
  return out;
}

}  // namespace

TEST(TrainConfig, ProfilesValidationAndJson) {
  auto f = TrainConfig::for_profile("faithful");
  EXPECT_EQ(f.base_optimizer, "sgd");
  EXPECT_DOUBLE_EQ(f.base_lr, 1e-6);
  EXPECT_EQ(f.landmark_batch, 4);
  EXPECT_EQ(f.view_batch, 8);
  EXPECT_DOUBLE_EQ(f.adversary_beta1, 0.5);
  auto d = TrainConfig::for_profile("desk");
  EXPECT_GT(d.base_lr, f.base_lr);
  EXPECT_THROW((void)TrainConfig::for_profile("fast"), std::invalid_argument);
  nlohmann::json j = d;
  auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  d.landmark_batch = 0;
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d = TrainConfig::desk();
  d.base_optimizer = "rmsprop";
  EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Batching, SelectionFollowsTheFrameTask) {
  const auto& ds = tiny_dataset();
  for (const auto& f : ds.frames) {
    auto chans = select_backprop_channels(f);
    auto mask = selection_mask(f);
    EXPECT_EQ(mask.sum().item<int64_t>(), static_cast<int64_t>(chans.size()));
    if (auto t = f.task()) {
      EXPECT_EQ(static_cast<int>(chans.size()), task_spec(*t).num_channels);
    } else {
      EXPECT_TRUE(chans.empty());
    }
  }
}

TEST(Batching, TensorsMatchFrames) {
  const auto& ds = tiny_dataset();
  std::vector<std::size_t> idx = {0, 1, 2};
  auto b = make_batch(ds, idx);
  EXPECT_EQ(b.images.sizes(), (std::vector<int64_t>{3, 1, 96, 96}));
  EXPECT_EQ(b.coords.sizes(), (std::vector<int64_t>{3, kNumLandmarks, 2}));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& f = ds.frames[idx[k]];
    EXPECT_EQ(b.views[static_cast<int64_t>(k)].item<int64_t>(), index(f.view));
    const auto& ic = *f.icon;
    EXPECT_EQ(b.masked_images[static_cast<int64_t>(k)][0][ic.row][ic.col].item<float>(), 0.0F);
    EXPECT_EQ(b.images[static_cast<int64_t>(k)][0][ic.row][ic.col].item<float>(), f.image.at(ic.row, ic.col));
  }
  auto h = render_batch_heatmaps(ds, idx, 2.0);
  EXPECT_EQ(h.sizes(), (std::vector<int64_t>{3, kNumLandmarks, 96, 96}));
}

TEST(LandmarkPhase, LogsConsistentLossesAndCheckpoints) {
  torch::manual_seed(0);
  auto model = build_model(tiny_model());
  PatchDiscriminator disc(tiny_model().width);
  auto dir = scratch("landmarks");
  auto cfg = quick();
  cfg.weights = {1.0, 0.5, 2.0};
  int callbacks = 0;
  PhaseOutput out{dir, [&](const StepRecord&) { ++callbacks; }, {}};
  auto res = train_landmark_phase(model, disc, tiny_dataset(), cfg, out);
  ASSERT_FALSE(res.steps.empty());
  EXPECT_EQ(callbacks, static_cast<int>(res.steps.size()));
  for (const auto& s : res.steps) {
    EXPECT_EQ(s.combined, combined_landmark_loss(s.l2, s.coord, s.adv, cfg.weights));
    EXPECT_GT(s.adv, 0.0);
    EXPECT_GT(s.discriminator, 0.0);
  }
  ASSERT_TRUE(res.last_checkpoint && res.best_checkpoint);
  EXPECT_TRUE(std::filesystem::exists(*res.last_checkpoint));
  std::ifstream log(dir / "landmarks_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("phase"), "landmarks");
    ++lines;
  }
  EXPECT_EQ(lines, res.steps.size());
  std::filesystem::remove_all(dir);
}

TEST(LandmarkPhase, UnregularizedRunSkipsTheAdversary) {
  auto mc = tiny_model();
  mc.apply_ablation(Ablation::MGCN);
  torch::manual_seed(0);
  auto model = build_model(mc);
  PatchDiscriminator disc(mc.width);
  std::vector<torch::Tensor> before;
  for (const auto& p : disc->parameters()) before.push_back(p.detach().clone());
  auto res = train_landmark_phase(model, disc, tiny_dataset(), quick());
  for (const auto& s : res.steps) {
    EXPECT_EQ(s.coord, 0.0);
    EXPECT_EQ(s.adv, 0.0);
  }
  auto after = disc->parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(torch::equal(before[i], after[i]));
}

TEST(LandmarkPhase, WarmupEpochsUseTheL2TermAlone) {
  torch::manual_seed(0);
  auto model = build_model(tiny_model());
  PatchDiscriminator disc(tiny_model().width);
  auto dir = scratch("warmup");
  auto cfg = quick();
  cfg.landmark_epochs = 2;
  cfg.regularizer_warmup_epochs = 1;
  auto res = train_landmark_phase(model, disc, tiny_dataset(), cfg, {dir, {}, {}});
  for (const auto& s : res.steps) {
    if (s.epoch == 0) {
      EXPECT_EQ(s.coord, 0.0);
      EXPECT_EQ(s.adv, 0.0);
      EXPECT_EQ(s.discriminator, 0.0);
      EXPECT_EQ(s.combined, s.l2);
    } else {
      EXPECT_GT(s.adv, 0.0);
      EXPECT_GT(s.discriminator, 0.0);
    }
  }
  // The warmup epoch's smaller loss must not stay "best".
  auto best = load_checkpoint(*res.best_checkpoint);
  EXPECT_EQ(best.meta.at("epoch"), 1);
  std::filesystem::remove_all(dir);
  cfg.regularizer_warmup_epochs = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(LandmarkPhase, RequiresLandmarkFrames) {
  auto ds = tiny_dataset();
  for (auto& r : ds.manifest.records)
    if (r.task) r.split = Split::Test;
  auto model = build_model(tiny_model());
  PatchDiscriminator disc(0.125);
  EXPECT_THROW((void)train_landmark_phase(model, disc, ds, quick()), std::invalid_argument);
}

TEST(ViewPhase, SharedAndLandmarkStateIsFrozen) {
  torch::manual_seed(1);
  auto model = build_model(tiny_model());
  auto shared = snapshot(model, Partition::Shared);
  auto landmark = snapshot(model, Partition::Landmark);
  auto cls = snapshot(model, Partition::Classification);
  auto probe = torch::rand({2, 1, 96, 96});
  torch::Tensor heat_before;
  {
    torch::NoGradGuard ng;
    model->eval();
    heat_before = model->detect_landmarks(probe);
  }
  auto res = train_view_phase(model, tiny_dataset(), quick());
  EXPECT_FALSE(res.steps.empty());
  auto shared_after = snapshot(model, Partition::Shared);
  auto landmark_after = snapshot(model, Partition::Landmark);
  for (std::size_t i = 0; i < shared.size(); ++i) EXPECT_TRUE(torch::equal(shared[i], shared_after[i]));
  for (std::size_t i = 0; i < landmark.size(); ++i) EXPECT_TRUE(torch::equal(landmark[i], landmark_after[i]));
  auto cls_after = snapshot(model, Partition::Classification);
  bool moved = false;
  for (std::size_t i = 0; i < cls.size(); ++i) moved |= !torch::equal(cls[i], cls_after[i]);
  EXPECT_TRUE(moved);
  torch::NoGradGuard ng;
  model->eval();
  EXPECT_TRUE(torch::equal(model->detect_landmarks(probe), heat_before));
  for (const auto& p : model->parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(ViewPhase, MissingCheckpointIsAnError) {
  auto model = build_model(tiny_model());
  EXPECT_THROW((void)train_view_phase("/nonexistent/landmarks_last.ckpt", tiny_dataset(), quick(), model),
               std::runtime_error);
}

TEST(Determinism, SameSeedGivesIdenticalCheckpoints) {
  auto run = [] {
    auto cfg = quick();
    prepare_determinism(cfg);
    auto model = build_model(tiny_model());
    PatchDiscriminator disc(0.125);
    (void)train_landmark_phase(model, disc, tiny_dataset(), cfg);
    (void)train_view_phase(model, tiny_dataset(), cfg);
    return sha256_hex(serialize_checkpoint(model, &disc));
  };
  EXPECT_EQ(run(), run());
}

TEST(StepLog, JsonKeysDependOnPhase) {
  StepRecord r;
  r.phase = "views";
  r.cross_entropy = 1.5;
  auto j = step_json(r);
  EXPECT_TRUE(j.contains("cross_entropy"));
  EXPECT_FALSE(j.contains("l2"));
  r.phase = "landmarks";
  j = step_json(r);
  EXPECT_EQ(j.begin().key(), "phase");
  EXPECT_TRUE(j.contains("combined"));
}
