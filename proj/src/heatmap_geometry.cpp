#include "usmtl/heatmap_geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace usmtl {

torch::Tensor render_heatmaps(std::span<const ChannelLandmark> landmarks, int rows, int cols, double sigma,
                              torch::Dtype dtype) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("render_heatmaps: grid must be non-empty");
  if (!(sigma > 0.0)) throw std::invalid_argument("render_heatmaps: sigma must be positive");

  auto out = torch::zeros({kNumLandmarks, rows, cols}, torch::TensorOptions().dtype(torch::kFloat64));
  auto acc = out.accessor<double, 3>();
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  for (const auto& lm : landmarks) {
    if (lm.channel < 0 || lm.channel >= kNumLandmarks) {
      throw std::invalid_argument("render_heatmaps: channel " + std::to_string(lm.channel) + " out of range");
    }
    const auto [s0, t0] = lm.point;
    if (!(s0 >= 0.0 && s0 < rows && t0 >= 0.0 && t0 < cols)) {
      throw std::out_of_range("render_heatmaps: landmark (" + std::to_string(s0) + ", " + std::to_string(t0) +
                              ") outside " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
    }
    for (int s = 0; s < rows; ++s) {
      const double ds2 = (s - s0) * (s - s0);
      for (int t = 0; t < cols; ++t) {
        const double dt = t - t0;
        acc[lm.channel][s][t] = std::exp(-(ds2 + dt * dt) * inv_two_var);
      }
    }
  }
  return out.to(dtype);
}

SoftArgmax soft_argmax(const torch::Tensor& heatmaps, double threshold) {
  TORCH_CHECK(heatmaps.dim() >= 2, "soft_argmax expects [..., H, W]");
  const auto rows = heatmaps.size(-2);
  const auto cols = heatmaps.size(-1);
  const auto opts = heatmaps.options().requires_grad(false);

  auto flat = heatmaps.flatten(-2);
  torch::Tensor region;
  torch::Tensor peak;
  {
    torch::NoGradGuard no_grad;
    region = flat > threshold;
    peak = torch::one_hot(flat.argmax(-1), rows * cols).to(torch::kBool);
  }
  auto fallback = region.any(-1).logical_not();
  auto fallback_mask = fallback.unsqueeze(-1);

  auto weights = torch::where(region, flat, torch::zeros({}, opts));
  weights = torch::where(fallback_mask, peak.to(flat.scalar_type()), weights);

  auto index = torch::arange(rows * cols, opts.dtype(torch::kInt64));
  auto grid_s = torch::floor_divide(index, cols).to(flat.scalar_type());
  auto grid_t = torch::remainder(index, cols).to(flat.scalar_type());

  auto mass = weights.sum(-1);
  auto s = (weights * grid_s).sum(-1) / mass;
  auto t = (weights * grid_t).sum(-1) / mass;
  return {torch::stack({s, t}, -1), fallback};
}

PointEstimate soft_argmax_point(const torch::Tensor& heatmap, double threshold) {
  TORCH_CHECK(heatmap.dim() == 2, "soft_argmax_point expects a single H x W channel");
  auto res = soft_argmax(heatmap.detach().to(torch::kFloat64), threshold);
  auto c = res.coords.accessor<double, 1>();
  return {{c[0], c[1]}, res.fallback.item<bool>()};
}

double measurement_from_pair(const LandmarkPoint& p1, const LandmarkPoint& p2, double spacing) {
  if (!(spacing > 0.0)) throw std::invalid_argument("measurement_from_pair: spacing must be positive");
  return std::hypot(p1.s - p2.s, p1.t - p2.t) * spacing;
}

}  // namespace usmtl
