#pragma once

// Heatmap kernels: Gaussian ground-truth rendering, thresholded soft-argmax
// and landmark-pair measurements. All functions are pure.

#include <torch/torch.h>

#include <span>
#include <vector>

#include "usmtl/tasks.hpp"

namespace usmtl {

/// Continuous pixel coordinate; s is the row, t the column.
struct LandmarkPoint {
  double s = 0.0;
  double t = 0.0;

  friend bool operator==(const LandmarkPoint&, const LandmarkPoint&) = default;
};

struct ChannelLandmark {
  int channel = 0;
  LandmarkPoint point;

  friend bool operator==(const ChannelLandmark&, const ChannelLandmark&) = default;
};

inline constexpr double kDefaultThreshold = 0.75;
inline constexpr double kDefaultSigma = 5.0;

/// Renders a kNumLandmarks x rows x cols stack. Each annotated channel holds
/// an unnormalized Gaussian with peak 1 at the landmark; other channels are 0.
/// Throws std::out_of_range for a landmark outside the grid and
/// std::invalid_argument for a bad channel, grid or sigma.
[[nodiscard]] torch::Tensor render_heatmaps(std::span<const ChannelLandmark> landmarks, int rows, int cols,
                                            double sigma, torch::Dtype dtype = torch::kFloat32);

struct SoftArgmax {
  torch::Tensor coords;    // [..., 2] as (s, t); differentiable w.r.t. in-region values
  torch::Tensor fallback;  // [...] bool, true where no pixel exceeded the threshold
};

/// Activation-weighted centroid over pixels strictly above `threshold`, for a
/// tensor of shape [..., H, W]. Region membership is a constant for autograd.
/// An empty region falls back to the single global-max pixel, which carries
/// no gradient.
[[nodiscard]] SoftArgmax soft_argmax(const torch::Tensor& heatmaps, double threshold = kDefaultThreshold);

struct PointEstimate {
  LandmarkPoint point;
  bool fallback = false;
};

/// Single-channel convenience wrapper over soft_argmax.
[[nodiscard]] PointEstimate soft_argmax_point(const torch::Tensor& heatmap, double threshold = kDefaultThreshold);

/// Euclidean pixel distance scaled by spacing (mm/pixel).
[[nodiscard]] double measurement_from_pair(const LandmarkPoint& p1, const LandmarkPoint& p2, double spacing);

}  // namespace usmtl
