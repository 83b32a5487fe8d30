#include <gtest/gtest.h>

#include "usmtl/network.hpp"

using namespace usmtl;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.width = 0.25;
  c.gcn_kernel = 3;
  c.sigma = 2.0;
  return c;
}

}  // namespace

TEST(ModelConfig, ValidationAndAblations) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.gcn_kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.width = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);

  c = ModelConfig{};
  c.apply_ablation(Ablation::MFCN);
  EXPECT_FALSE(c.use_gcn);
  EXPECT_FALSE(c.use_regularizers);
  c.apply_ablation(Ablation::MGCN);
  EXPECT_TRUE(c.use_gcn);
  EXPECT_FALSE(c.use_regularizers);
  c.apply_ablation(Ablation::MGCN_R);
  EXPECT_EQ(c.ablation(), Ablation::MGCN_R);
  EXPECT_EQ(parse_ablation("mgcn_r"), Ablation::MGCN_R);
  EXPECT_THROW((void)parse_ablation("sfcn"), std::invalid_argument);
}

TEST(ModelConfig, ChannelWidthsFollowReferenceLayout) {
  ModelConfig c;
  EXPECT_EQ(c.stage_channels(), (std::array<int64_t, 4>{256, 512, 1024, 2048}));
  EXPECT_EQ(c.stem_channels(), 64);
  c.width = 0.25;
  EXPECT_EQ(c.stage_channels(), (std::array<int64_t, 4>{64, 128, 256, 512}));
  EXPECT_EQ(c.stem_channels(), 16);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = small_config();
  c.use_regularizers = false;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
}

TEST(MultiTaskModel, OutputShapesAndRange) {
  torch::manual_seed(0);
  auto model = build_model(small_config());
  model->eval();
  torch::NoGradGuard ng;
  auto out = model->forward_all(torch::rand({2, 1, 96, 128}));
  EXPECT_EQ(out.logits.sizes(), (std::vector<int64_t>{2, kNumViews}));
  EXPECT_EQ(out.heatmaps.sizes(), (std::vector<int64_t>{2, kNumLandmarks, 96, 128}));
  EXPECT_GE(out.heatmaps.min().item<float>(), 0.0F);
  EXPECT_LE(out.heatmaps.max().item<float>(), 1.0F);
}

TEST(MultiTaskModel, ForwardAllEqualsSeparateBranches) {
  torch::manual_seed(1);
  auto model = build_model(small_config());
  model->eval();
  torch::NoGradGuard ng;
  auto x = torch::rand({1, 1, 96, 96});
  auto all = model->forward_all(x);
  EXPECT_TRUE(torch::equal(all.logits, model->classify_view(x)));
  EXPECT_TRUE(torch::equal(all.heatmaps, model->detect_landmarks(x)));
}

TEST(MultiTaskModel, RejectsMalformedInput) {
  auto model = build_model(small_config());
  EXPECT_THROW((void)model->classify_view(torch::rand({1, 3, 96, 96})), std::invalid_argument);
  EXPECT_THROW((void)model->classify_view(torch::rand({1, 1, 100, 96})), std::invalid_argument);
  EXPECT_THROW((void)model->detect_landmarks(torch::rand({1, 96, 96})), std::invalid_argument);
}

TEST(MultiTaskModel, GcnKernelLargerThanDeepestMapIsRejected) {
  auto c = small_config();
  c.gcn_kernel = 7;
  auto model = build_model(c);
  torch::NoGradGuard ng;
  model->eval();
  EXPECT_THROW((void)model->detect_landmarks(torch::rand({1, 1, 96, 96})), std::invalid_argument);
}

TEST(MultiTaskModel, PartitionsCoverAllParameters) {
  auto model = build_model(small_config());
  const auto total = model->parameter_count();
  EXPECT_EQ(model->parameter_count(Partition::Shared) + model->parameter_count(Partition::Classification) +
                model->parameter_count(Partition::Landmark),
            total);
  EXPECT_GT(model->parameter_count(Partition::Shared), 0);
  EXPECT_EQ(MultiTaskModel::Impl::partition_of("stem.conv.weight"), Partition::Shared);
  EXPECT_EQ(MultiTaskModel::Impl::partition_of("cls_stage3.0.reduce.weight"), Partition::Classification);
  EXPECT_EQ(MultiTaskModel::Impl::partition_of("decoder.project.bias"), Partition::Landmark);
}

TEST(MultiTaskModel, FcnAblationHasNoLargeKernels) {
  auto gcn = small_config();
  auto fcn = small_config();
  fcn.apply_ablation(Ablation::MFCN);
  EXPECT_LT(build_model(fcn)->parameter_count(Partition::Landmark),
            build_model(gcn)->parameter_count(Partition::Landmark));
}

TEST(PatchDiscriminator, GridMatchesReceptiveFieldArithmetic) {
  auto sched = PatchDiscriminator::Impl::schedule();
  ASSERT_EQ(sched.size(), 5U);
  int64_t rf = 1;
  int64_t jump = 1;
  int64_t size = 512;
  for (const auto& l : sched) {
    rf += (l.kernel - 1) * jump;
    jump *= l.stride;
    size = (size + 2 * l.padding - l.kernel) / l.stride + 1;
  }
  EXPECT_EQ(rf, 70);
  EXPECT_EQ(size, 62);

  torch::manual_seed(0);
  PatchDiscriminator disc(0.125);
  disc->eval();
  torch::NoGradGuard ng;
  auto p = disc->forward(torch::rand({1, 1, 512, 512}), torch::rand({1, kNumLandmarks, 512, 512}));
  EXPECT_EQ(p.sizes(), (std::vector<int64_t>{1, 1, 62, 62}));
  EXPECT_GT(p.min().item<float>(), 0.0F);
  EXPECT_LT(p.max().item<float>(), 1.0F);
  EXPECT_ANY_THROW((void)disc->forward(torch::rand({1, 1, 64, 64}), torch::rand({1, kNumLandmarks, 32, 32})));
}

TEST(ParameterEconomy, ReferenceNetworksAreCountedPerTask) {
  auto c = small_config();
  SingleTaskClassifier cls(c);
  int64_t expected = count_parameters(*cls);
  for (const auto& spec : kTaskSpecs) {
    SingleTaskLandmarkNet net(c, spec.num_channels);
    expected += count_parameters(*net);
  }
  EXPECT_EQ(single_task_reference_parameter_count(c), expected);
  EXPECT_LT(build_model(c)->parameter_count(), expected);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  torch::manual_seed(4);
  auto c = small_config();
  auto model = build_model(c);
  PatchDiscriminator disc(c.width);
  // Move BN running statistics away from their defaults.
  model->train();
  (void)model->forward_all(torch::rand({2, 1, 96, 96}));
  const auto bytes = serialize_checkpoint(model, &disc, {{"note", "x"}});
  auto ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(ck.config, c);
  EXPECT_EQ(ck.meta.at("note"), "x");
  ASSERT_TRUE(ck.discriminator);
  EXPECT_EQ(serialize_checkpoint(ck.model, &ck.discriminator, {{"note", "x"}}), bytes);
  auto a = model->named_buffers();
  auto b = ck.model->named_buffers();
  for (const auto& item : a) EXPECT_TRUE(torch::equal(item.value(), b[item.key()])) << item.key();
}

TEST(Checkpoint, CorruptInputIsRejected) {
  auto model = build_model(small_config());
  auto bytes = serialize_checkpoint(model, nullptr);
  EXPECT_THROW((void)deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), std::runtime_error);
  EXPECT_THROW((void)deserialize_checkpoint(bytes + "x"), std::runtime_error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)deserialize_checkpoint(bad_magic), std::runtime_error);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/model.ckpt"), std::runtime_error);
  EXPECT_FALSE(deserialize_checkpoint(bytes).discriminator);
}

TEST(Checkpoint, Sha256KnownAnswer) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
