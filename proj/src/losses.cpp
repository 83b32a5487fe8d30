#include "usmtl/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "usmtl/heatmap_geometry.hpp"

namespace usmtl {
namespace {

void check_mask(const torch::Tensor& pred, const torch::Tensor& mask) {
  TORCH_CHECK(pred.dim() == 4, "expected heatmaps of shape [B, L, H, W]");
  TORCH_CHECK(mask.dim() == 2 && mask.size(0) == pred.size(0) && mask.size(1) == pred.size(1),
              "selection mask must be [B, L]");
  TORCH_CHECK(mask.scalar_type() == torch::kBool, "selection mask must be bool");
}

// Per-selected-channel weight 1 / (N_L' of its frame * number of frames with a
// non-empty selection), so a weighted sum gives the mean of per-frame means.
torch::Tensor selection_weights(const torch::Tensor& mask, torch::ScalarType dtype) {
  auto counts = mask.sum(1);
  auto active = (counts > 0).sum().item<int64_t>();
  auto frame_of = mask.nonzero().select(1, 0);
  auto per_frame = counts.index_select(0, frame_of).to(dtype);
  return 1.0 / (per_frame * static_cast<double>(active));
}

torch::Tensor clamp_prob(const torch::Tensor& p) {
  return p.clamp(kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
}

}  // namespace

torch::Tensor cross_entropy_view(const torch::Tensor& probabilities, const torch::Tensor& truth) {
  auto probs = probabilities.dim() == 1 ? probabilities.unsqueeze(0) : probabilities;
  auto labels = truth.dim() == 0 ? truth.unsqueeze(0) : truth;
  TORCH_CHECK(probs.dim() == 2 && labels.dim() == 1 && labels.size(0) == probs.size(0),
              "cross_entropy_view: shape mismatch");
  {
    torch::NoGradGuard no_grad;
    if ((probs <= 0).any().item<bool>()) {
      throw std::invalid_argument("cross_entropy_view: probabilities must be positive");
    }
    auto dev = (probs.to(torch::kFloat64).sum(1) - 1.0).abs().max().item<double>();
    if (dev > 1e-6) throw std::invalid_argument("cross_entropy_view: probabilities do not sum to 1");
  }
  return -probs.gather(1, labels.to(torch::kInt64).unsqueeze(1)).log().mean();
}

double cross_entropy_view(const std::vector<double>& probabilities, int truth) {
  auto t = torch::tensor(probabilities, torch::kFloat64);
  return cross_entropy_view(t, torch::tensor(static_cast<int64_t>(truth))).item<double>();
}

torch::Tensor cross_entropy_view_logits(const torch::Tensor& logits, const torch::Tensor& truth) {
  return torch::nll_loss(torch::log_softmax(logits, -1), truth.to(torch::kInt64));
}

torch::Tensor selective_l2(const torch::Tensor& pred, const torch::Tensor& truth, const torch::Tensor& mask) {
  check_mask(pred, mask);
  TORCH_CHECK(pred.sizes() == truth.sizes(), "selective_l2: prediction and truth shapes differ");
  if (!mask.any().item<bool>()) return pred.flatten().slice(0, 0, 0).sum();

  auto diff = pred.index({mask}) - truth.index({mask});
  auto per_channel = diff.square().mean({1, 2});
  return (per_channel * selection_weights(mask, pred.scalar_type())).sum();
}

torch::Tensor coordinate_loss(const torch::Tensor& pred, const torch::Tensor& truth_coords, const torch::Tensor& mask,
                              double threshold) {
  check_mask(pred, mask);
  TORCH_CHECK(truth_coords.dim() == 3 && truth_coords.size(2) == 2, "truth coordinates must be [B, L, 2]");
  if (!mask.any().item<bool>()) return pred.flatten().slice(0, 0, 0).sum();

  auto est = soft_argmax(pred.index({mask}), threshold).coords;
  auto d2 = (est - truth_coords.index({mask}).to(est.scalar_type())).square().sum(-1);
  // sqrt has an unbounded derivative at 0; route exact hits through a zero-gradient branch.
  auto positive = d2 > 0;
  auto dist = torch::where(positive, torch::where(positive, d2, torch::ones_like(d2)).sqrt(), torch::zeros_like(d2));
  return (dist * selection_weights(mask, est.scalar_type())).sum();
}

torch::Tensor adversarial_generator_loss(const torch::Tensor& fake_patch_probs) {
  return -clamp_prob(fake_patch_probs).log().mean();
}

torch::Tensor discriminator_loss(const torch::Tensor& real_patch_probs, const torch::Tensor& fake_patch_probs) {
  TORCH_CHECK(real_patch_probs.sizes() == fake_patch_probs.sizes(), "discriminator_loss: patch grids differ");
  auto real_term = -clamp_prob(real_patch_probs).log();
  auto fake_term = -(1.0 - clamp_prob(fake_patch_probs)).log();
  return (real_term + fake_term).mean() / 2.0;
}

torch::Tensor combined_landmark_loss(const torch::Tensor& l2, const torch::Tensor& coord, const torch::Tensor& adv,
                                     const LossWeights& weights) {
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("combined_landmark_loss: weights must be non-negative");
  }
  return weights[0] * l2 + weights[1] * coord + weights[2] * adv;
}

double combined_landmark_loss(double l2, double coord, double adv, const LossWeights& weights) {
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("combined_landmark_loss: weights must be non-negative");
  }
  return weights[0] * l2 + weights[1] * coord + weights[2] * adv;
}

}  // namespace usmtl
