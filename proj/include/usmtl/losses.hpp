#pragma once

// Training objectives. Heatmap-shaped arguments are [B, kNumLandmarks, H, W];
// selection masks are [B, kNumLandmarks] bool, true for the channels of the
// frame's own landmark task. Frames whose mask is empty contribute nothing.

#include <torch/torch.h>

#include <array>

namespace usmtl {

inline constexpr double kProbabilityEpsilon = 1e-7;

/// -log p[truth] on the probability simplex. `probabilities` is [C] or [B, C]
/// (batch mean). Rejects non-positive entries or rows not summing to 1.
[[nodiscard]] torch::Tensor cross_entropy_view(const torch::Tensor& probabilities, const torch::Tensor& truth);
[[nodiscard]] double cross_entropy_view(const std::vector<double>& probabilities, int truth);

/// Same objective evaluated from logits through log-softmax.
[[nodiscard]] torch::Tensor cross_entropy_view_logits(const torch::Tensor& logits, const torch::Tensor& truth);

/// Mean squared heatmap error over the selected channels of each frame,
/// averaged over frames with a non-empty selection. Non-selected channels
/// receive an exactly zero gradient.
[[nodiscard]] torch::Tensor selective_l2(const torch::Tensor& pred, const torch::Tensor& truth,
                                         const torch::Tensor& mask);

/// Mean Euclidean distance between soft-argmax locations of the selected
/// predicted channels and the true landmarks ([B, kNumLandmarks, 2] as (s, t)).
[[nodiscard]] torch::Tensor coordinate_loss(const torch::Tensor& pred, const torch::Tensor& truth_coords,
                                            const torch::Tensor& mask, double threshold);

/// Non-saturating generator objective: mean over patches of -log p.
[[nodiscard]] torch::Tensor adversarial_generator_loss(const torch::Tensor& fake_patch_probs);

/// Mean over patches of [-log p_real - log(1 - p_fake)] / 2.
[[nodiscard]] torch::Tensor discriminator_loss(const torch::Tensor& real_patch_probs,
                                               const torch::Tensor& fake_patch_probs);

using LossWeights = std::array<double, 3>;

[[nodiscard]] torch::Tensor combined_landmark_loss(const torch::Tensor& l2, const torch::Tensor& coord,
                                                   const torch::Tensor& adv, const LossWeights& weights = {1, 1, 1});
[[nodiscard]] double combined_landmark_loss(double l2, double coord, double adv, const LossWeights& weights = {1, 1, 1});

}  // namespace usmtl
