#pragma once

#include <torch/torch.h>

#include <functional>
#include <random>

namespace usmtl::testkit {

/// Central differences of a scalar function of `x` (float64), one coordinate
/// at a time.
inline torch::Tensor numeric_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                      const torch::Tensor& x, double h) {
  torch::NoGradGuard no_grad;
  auto base = x.detach().clone();
  auto grad = torch::zeros_like(base);
  auto flat = base.view({-1});
  auto g = grad.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double v = flat[i].item<double>();
    flat[i] = v + h;
    const double up = f(base).item<double>();
    flat[i] = v - h;
    const double down = f(base).item<double>();
    flat[i] = v;
    g[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline torch::Tensor analytic_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                       const torch::Tensor& x) {
  auto leaf = x.detach().clone().set_requires_grad(true);
  f(leaf).backward();
  return leaf.grad().detach();
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  const double scale = std::max(a.norm().item<double>(), b.norm().item<double>());
  if (scale == 0.0) return 0.0;
  return (a - b).norm().item<double>() / scale;
}

/// Random [B, C, 8, 8] float64 maps in (0, 1) whose values keep at least
/// `margin` away from `threshold`, so a finite-difference step never changes
/// the soft-argmax region.
inline torch::Tensor maps_away_from(double threshold, double margin, int64_t batch, int64_t channels,
                                    std::mt19937_64& rng, int64_t size = 8) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto t = torch::empty({batch, channels, size, size}, torch::kFloat64);
  auto a = t.accessor<double, 4>();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t c = 0; c < channels; ++c)
      for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
          double v;
          do v = u(rng);
          while (std::abs(v - threshold) < margin);
          a[b][c][i][j] = v;
        }
  return t;
}

}  // namespace usmtl::testkit
