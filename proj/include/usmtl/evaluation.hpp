#pragma once

// Clinical metrics: view confusion matrix and accuracy, absolute long-/short-
// axis measurement errors in mm, landmark localisation error, and the report
// documents (JSON with fixed key order, and a flat per-measurement table).

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "usmtl/heatmap_geometry.hpp"
#include "usmtl/network.hpp"
#include "usmtl/synthetic_data.hpp"

namespace usmtl {

using ConfusionMatrix = std::array<std::array<std::int64_t, kNumViews>, kNumViews>;

/// Entry (i, j) counts truth i predicted j. Throws std::invalid_argument on
/// length mismatch and std::out_of_range on a bad class index.
[[nodiscard]] ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> truths);
[[nodiscard]] double accuracy(const ConfusionMatrix& m);

struct MeasurementError {
  int measurement = 0;  // index into kMeasurementNames
  double predicted_mm = 0.0;
  double truth_mm = 0.0;
  double abs_error_mm = 0.0;
};

struct FrameLandmarkResult {
  std::vector<MeasurementError> measurements;
  std::vector<ChannelLandmark> predicted;
  std::vector<double> localisation_px;  // parallel to `predicted`
  int fallbacks = 0;
};

/// `heatmaps` is a single frame [kNumLandmarks, H, W]. Every channel of the
/// task must be annotated in `truth`, otherwise std::invalid_argument.
[[nodiscard]] FrameLandmarkResult measurement_errors(const torch::Tensor& heatmaps,
                                                     std::span<const ChannelLandmark> truth, Task task,
                                                     double spacing, double threshold);

struct MeasurementSummary {
  std::int64_t count = 0;
  double mean_mm = 0.0;
  double median_mm = 0.0;

  friend bool operator==(const MeasurementSummary&, const MeasurementSummary&) = default;
};

struct MetricsReport {
  std::string split;
  ConfusionMatrix confusion{};
  double accuracy = 0.0;
  std::int64_t frames = 0;
  std::array<MeasurementSummary, kNumMeasurements> measurements{};
  double mean_measurement_error_mm = 0.0;  // over all individual measurements
  double mean_landmark_error_px = 0.0;
  std::int64_t landmarks = 0;
  std::int64_t fallback_count = 0;
  std::array<std::int64_t, kNumTasks> task_counts{};

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

[[nodiscard]] nlohmann::ordered_json report_json(const MetricsReport& r);
[[nodiscard]] MetricsReport report_from_json(const nlohmann::json& j);
/// Tab-separated header plus one row labelled `method`, one column per
/// measurement (mean mm; "n/a" without samples).
[[nodiscard]] std::string report_table(const MetricsReport& r, std::string_view method);

struct EvalOptions {
  double threshold = 0.75;
  int batch = 8;
};

/// One forward pass per frame on the icon-masked image. Throws
/// std::invalid_argument for an empty split or frames the model cannot take.
[[nodiscard]] MetricsReport evaluate(MultiTaskModel& model, const Dataset& data, Split split,
                                     const EvalOptions& options = {});
[[nodiscard]] MetricsReport evaluate(MultiTaskModel& model, const Dataset& data,
                                     std::span<const std::size_t> indices, std::string split_label,
                                     const EvalOptions& options = {});

/// Throws std::invalid_argument if the checkpoint was built with a different
/// architecture than `expected`.
void check_config_match(const ModelConfig& expected, const ModelConfig& actual);

}  // namespace usmtl
