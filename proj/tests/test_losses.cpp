#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "usmtl/heatmap_geometry.hpp"
#include "usmtl/losses.hpp"

using namespace usmtl;

namespace {

torch::Tensor mask_of(std::initializer_list<std::initializer_list<bool>> rows) {
  std::vector<torch::Tensor> out;
  for (auto r : rows) {
    auto row = torch::zeros({static_cast<int64_t>(r.size())}, torch::kBool);
    int64_t i = 0;
    for (bool v : r) row[i++] = v;
    out.push_back(row);
  }
  return torch::stack(out);
}

}  // namespace

TEST(CrossEntropy, HandValues) {
  EXPECT_NEAR(cross_entropy_view({0.5, 0.25, 0.25}, 1), std::log(4.0), 1e-15);
  auto probs = torch::tensor({{0.5, 0.5}, {0.1, 0.9}}, torch::kFloat64);
  auto ce = cross_entropy_view(probs, torch::tensor({0, 1}));
  EXPECT_NEAR(ce.item<double>(), (std::log(2.0) - std::log(0.9)) / 2.0, 1e-15);
}

TEST(CrossEntropy, RejectsOffSimplexInput) {
  EXPECT_THROW((void)cross_entropy_view({0.5, 0.6}, 0), std::invalid_argument);
  EXPECT_THROW((void)cross_entropy_view({1.0, 0.0}, 0), std::invalid_argument);
}

TEST(CrossEntropy, LogitsFormAgreesWithProbabilityForm) {
  auto logits = torch::tensor({{0.2, -1.0, 3.0}, {1.5, 0.0, 0.1}}, torch::kFloat64);
  auto truth = torch::tensor({2, 0});
  auto a = cross_entropy_view_logits(logits, truth).item<double>();
  auto b = cross_entropy_view(torch::softmax(logits, 1), truth).item<double>();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(SelectiveL2, HandComputedMeanOfFrameMeans) {
  auto pred = torch::zeros({3, 4, 2, 2}, torch::kFloat64);
  auto truth = torch::zeros({3, 4, 2, 2}, torch::kFloat64);
  pred[0][0].fill_(1.0);   // frame 0, channel 0 selected: mse 1
  pred[1][2].fill_(2.0);   // frame 1, channels 2 and 3: mse 4 and 0
  pred[1][0].fill_(100.0); // not selected
  pred[2].fill_(5.0);      // frame 2 has no selection
  auto mask = mask_of({{true, false, false, false}, {false, false, true, true}, {false, false, false, false}});
  EXPECT_NEAR(selective_l2(pred, truth, mask).item<double>(), (1.0 + (4.0 + 0.0) / 2.0) / 2.0, 1e-15);
}

TEST(SelectiveL2, EmptySelectionIsZeroWithZeroGradient) {
  auto pred = torch::rand({2, 3, 4, 4}, torch::kFloat64).set_requires_grad(true);
  auto mask = torch::zeros({2, 3}, torch::kBool);
  auto loss = selective_l2(pred, torch::zeros_like(pred), mask);
  EXPECT_EQ(loss.item<double>(), 0.0);
  loss.backward();
  EXPECT_EQ(pred.grad().abs().sum().item<double>(), 0.0);
}

TEST(SelectiveL2, NonSelectedChannelsGetExactlyZeroGradient) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 20; ++trial) {
    auto mask = torch::zeros({3, kNumLandmarks}, torch::kBool);
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < kNumLandmarks; ++c) mask[b][c] = coin(rng);
    auto pred = torch::rand({3, kNumLandmarks, 6, 6}).set_requires_grad(true);
    selective_l2(pred, torch::rand({3, kNumLandmarks, 6, 6}), mask).backward();
    auto off = mask.logical_not().unsqueeze(-1).unsqueeze(-1).expand_as(pred);
    EXPECT_EQ(pred.grad().masked_select(off).abs().max().item<float>(), 0.0F);
  }
}

TEST(SelectiveL2, RejectsMalformedMask) {
  auto pred = torch::zeros({2, 3, 4, 4});
  EXPECT_ANY_THROW((void)selective_l2(pred, pred, torch::ones({2, 3})));
  EXPECT_ANY_THROW((void)selective_l2(pred, pred, torch::ones({2, 2}, torch::kBool)));
}

TEST(CoordinateLoss, DistanceOfPeakedMaps) {
  auto pred = torch::zeros({1, 2, 8, 8}, torch::kFloat64);
  pred[0][0][2][2] = 1.0;
  pred[0][1][6][1] = 1.0;
  auto coords = torch::zeros({1, 2, 2}, torch::kFloat64);
  coords[0][0][0] = 2.0;
  coords[0][0][1] = 5.0;  // 3 px away
  coords[0][1][0] = 2.0;
  coords[0][1][1] = 4.0;  // 5 px away
  auto both = mask_of({{true, true}});
  EXPECT_NEAR(coordinate_loss(pred, coords, both, 0.75).item<double>(), 4.0, 1e-15);
  auto first = mask_of({{true, false}});
  EXPECT_NEAR(coordinate_loss(pred, coords, first, 0.75).item<double>(), 3.0, 1e-15);
}

TEST(CoordinateLoss, ExactHitHasFiniteGradient) {
  auto pred = torch::zeros({1, 1, 5, 5}, torch::kFloat64);
  pred[0][0][2][2] = 0.9;
  pred[0][0][2][3] = 0.9;
  auto coords = torch::tensor({2.0, 2.5}, torch::kFloat64).view({1, 1, 2});
  auto leaf = pred.clone().set_requires_grad(true);
  auto loss = coordinate_loss(leaf, coords, mask_of({{true}}), 0.75);
  EXPECT_EQ(loss.item<double>(), 0.0);
  loss.backward();
  EXPECT_TRUE(torch::isfinite(leaf.grad()).all().item<bool>());
}

TEST(Adversarial, HandValues) {
  auto half = torch::full({1, 1, 3, 3}, 0.5, torch::kFloat64);
  EXPECT_NEAR(adversarial_generator_loss(half).item<double>(), std::log(2.0), 1e-15);
  EXPECT_NEAR(discriminator_loss(half, half).item<double>(), std::log(2.0), 1e-15);
  auto real = torch::full({1, 1, 2, 2}, 0.8, torch::kFloat64);
  auto fake = torch::full({1, 1, 2, 2}, 0.3, torch::kFloat64);
  EXPECT_NEAR(discriminator_loss(real, fake).item<double>(), (-std::log(0.8) - std::log(0.7)) / 2.0, 1e-15);
}

TEST(Adversarial, SaturatedProbabilitiesStayFinite) {
  auto zeros = torch::zeros({1, 1, 2, 2}, torch::kFloat64);
  auto ones = torch::ones({1, 1, 2, 2}, torch::kFloat64);
  EXPECT_NEAR(adversarial_generator_loss(zeros).item<double>(), -std::log(kProbabilityEpsilon), 1e-9);
  EXPECT_TRUE(std::isfinite(discriminator_loss(zeros, ones).item<double>()));
}

TEST(Combined, WeightedSumAndValidation) {
  auto t = [](double v) { return torch::tensor(v, torch::kFloat64); };
  EXPECT_DOUBLE_EQ(combined_landmark_loss(t(1.0), t(2.0), t(3.0), {1.0, 0.5, 2.0}).item<double>(), 8.0);
  EXPECT_DOUBLE_EQ(combined_landmark_loss(1.0, 2.0, 3.0), 6.0);
  EXPECT_THROW((void)combined_landmark_loss(1.0, 2.0, 3.0, {1.0, -1.0, 1.0}), std::invalid_argument);
}

class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  std::uniform_int_distribution<int64_t> nc(1, 4);
  const int64_t channels = nc(rng);
  auto x = testkit::maps_away_from(0.75, 2e-3, 2, channels, rng);
  auto truth = torch::rand({2, channels, 8, 8}, torch::kFloat64);
  auto mask = torch::ones({2, channels}, torch::kBool);
  mask[1][0] = false;
  auto coords = torch::rand({2, channels, 2}, torch::kFloat64) * 7.0;

  auto l2 = [&](const torch::Tensor& v) { return selective_l2(v, truth, mask); };
  auto coord = [&](const torch::Tensor& v) { return coordinate_loss(v, coords, mask, 0.75); };
  auto probs = torch::rand({2, 1, 3, 3}, torch::kFloat64) * 0.9 + 0.05;
  auto other = torch::rand({2, 1, 3, 3}, torch::kFloat64) * 0.9 + 0.05;
  auto gen = [](const torch::Tensor& p) { return adversarial_generator_loss(p); };
  auto disc_real = [&](const torch::Tensor& p) { return discriminator_loss(p, other); };
  auto disc_fake = [&](const torch::Tensor& p) { return discriminator_loss(other, p); };

  EXPECT_LT(testkit::relative_error(testkit::analytic_gradient(l2, x), testkit::numeric_gradient(l2, x, 1e-4)), 1e-4);
  EXPECT_LT(testkit::relative_error(testkit::analytic_gradient(coord, x), testkit::numeric_gradient(coord, x, 1e-4)),
            1e-4);
  for (const auto& f : {std::function<torch::Tensor(const torch::Tensor&)>(gen), {disc_real}, {disc_fake}}) {
    EXPECT_LT(testkit::relative_error(testkit::analytic_gradient(f, probs), testkit::numeric_gradient(f, probs, 1e-4)),
              1e-4);
  }
}

INSTANTIATE_TEST_SUITE_P(RandomInstances, LossGradient, ::testing::Range(0, 6));
