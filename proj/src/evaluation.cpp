#include "usmtl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace usmtl {

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) throw std::invalid_argument("confusion_matrix: length mismatch");
  ConfusionMatrix m{};
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const int t = truths[i];
    const int p = predictions[i];
    if (t < 0 || t >= kNumViews || p < 0 || p >= kNumViews) {
      throw std::out_of_range("confusion_matrix: class index out of range");
    }
    ++m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return m;
}

double accuracy(const ConfusionMatrix& m) {
  std::int64_t total = 0;
  std::int64_t trace = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = 0; j < m[i].size(); ++j) total += m[i][j];
    trace += m[i][i];
  }
  return total == 0 ? 0.0 : static_cast<double>(trace) / static_cast<double>(total);
}

FrameLandmarkResult measurement_errors(const torch::Tensor& heatmaps, std::span<const ChannelLandmark> truth,
                                       Task task, double spacing, double threshold) {
  TORCH_CHECK(heatmaps.dim() == 3, "measurement_errors expects one frame [L, H, W]");
  const auto& spec = task_spec(task);
  std::array<std::optional<LandmarkPoint>, kNumLandmarks> truth_at{};
  for (const auto& lm : truth) truth_at.at(static_cast<std::size_t>(lm.channel)) = lm.point;

  FrameLandmarkResult out;
  std::array<LandmarkPoint, kNumLandmarks> pred_at{};
  auto est = soft_argmax(heatmaps.detach().to(torch::kFloat64), threshold);
  auto coords = est.coords.accessor<double, 2>();
  auto fb = est.fallback.accessor<bool, 1>();
  for (int c = spec.first_channel; c < spec.first_channel + spec.num_channels; ++c) {
    if (!truth_at[c]) throw std::invalid_argument("measurement_errors: channel " + std::to_string(c) + " unannotated");
    pred_at[c] = {coords[c][0], coords[c][1]};
    out.fallbacks += fb[c] ? 1 : 0;
    out.predicted.push_back({c, pred_at[c]});
    out.localisation_px.push_back(std::hypot(pred_at[c].s - truth_at[c]->s, pred_at[c].t - truth_at[c]->t));
  }
  for (const auto& pair : spec.pairs()) {
    MeasurementError e;
    e.measurement = pair.measurement;
    e.predicted_mm = measurement_from_pair(pred_at[pair.first], pred_at[pair.second], spacing);
    e.truth_mm = measurement_from_pair(*truth_at[pair.first], *truth_at[pair.second], spacing);
    e.abs_error_mm = std::abs(e.predicted_mm - e.truth_mm);
    out.measurements.push_back(e);
  }
  return out;
}

void check_config_match(const ModelConfig& expected, const ModelConfig& actual) {
  if (expected.width != actual.width || expected.use_gcn != actual.use_gcn ||
      expected.gcn_kernel != actual.gcn_kernel || expected.num_views != actual.num_views ||
      expected.num_landmarks != actual.num_landmarks || expected.head_hidden != actual.head_hidden) {
    throw std::invalid_argument("checkpoint architecture does not match the requested model configuration");
  }
}

MetricsReport evaluate(MultiTaskModel& model, const Dataset& data, Split split, const EvalOptions& options) {
  auto idx = data.manifest.indices(split);
  return evaluate(model, data, idx, std::string(split_name(split)), options);
}

MetricsReport evaluate(MultiTaskModel& model, const Dataset& data, std::span<const std::size_t> indices,
                       std::string split_label, const EvalOptions& options) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty split");
  if (model->config().num_views != kNumViews || model->config().num_landmarks != kNumLandmarks) {
    throw std::invalid_argument("evaluate: model head sizes do not match the task registry");
  }
  torch::NoGradGuard no_grad;
  model->eval();

  MetricsReport report;
  report.split = std::move(split_label);
  std::vector<int> preds;
  std::vector<int> truths;
  std::array<std::vector<double>, kNumMeasurements> per_measurement;
  double loc_sum = 0.0;

  const auto batch = static_cast<std::size_t>(std::max(1, options.batch));
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    std::vector<torch::Tensor> images;
    const auto end = std::min(indices.size(), start + batch);
    for (auto k = start; k < end; ++k) {
      const auto& f = data.frames[indices[k]];
      Image masked = f.image;
      mask_icon_in_place(masked, f.icon);
      images.push_back(
          torch::from_blob(masked.pixels.data(), {1, masked.rows, masked.cols}, torch::kFloat32).clone());
    }
    auto out = model->forward_all(torch::stack(images));
    auto predicted = out.logits.argmax(1);
    for (auto k = start; k < end; ++k) {
      const auto& f = data.frames[indices[k]];
      const auto b = static_cast<int64_t>(k - start);
      preds.push_back(static_cast<int>(predicted[b].item<int64_t>()));
      truths.push_back(index(f.view));
      auto task = f.task();
      if (!task) continue;
      ++report.task_counts[static_cast<std::size_t>(index(*task))];
      auto res = measurement_errors(out.heatmaps[b], f.landmarks, *task, f.spacing, options.threshold);
      report.fallback_count += res.fallbacks;
      for (double d : res.localisation_px) loc_sum += d;
      report.landmarks += static_cast<std::int64_t>(res.localisation_px.size());
      for (const auto& e : res.measurements) per_measurement[static_cast<std::size_t>(e.measurement)].push_back(e.abs_error_mm);
    }
  }

  report.confusion = confusion_matrix(preds, truths);
  report.accuracy = accuracy(report.confusion);
  report.frames = static_cast<std::int64_t>(preds.size());
  double all_sum = 0.0;
  std::int64_t all_count = 0;
  for (std::size_t m = 0; m < per_measurement.size(); ++m) {
    auto& v = per_measurement[m];
    auto& s = report.measurements[m];
    s.count = static_cast<std::int64_t>(v.size());
    if (v.empty()) continue;
    double sum = 0.0;
    for (double e : v) sum += e;
    s.mean_mm = sum / static_cast<double>(v.size());
    std::sort(v.begin(), v.end());
    const auto h = v.size() / 2;
    s.median_mm = v.size() % 2 == 1 ? v[h] : 0.5 * (v[h - 1] + v[h]);
    all_sum += sum;
    all_count += s.count;
  }
  report.mean_measurement_error_mm = all_count ? all_sum / static_cast<double>(all_count) : 0.0;
  report.mean_landmark_error_px = report.landmarks ? loc_sum / static_cast<double>(report.landmarks) : 0.0;
  return report;
}

nlohmann::ordered_json report_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["split"] = r.split;
  j["frames"] = r.frames;
  j["accuracy"] = r.accuracy;
  j["view_names"] = kViewNames;
  j["confusion"] = r.confusion;
  nlohmann::ordered_json ms;
  for (std::size_t m = 0; m < r.measurements.size(); ++m) {
    ms[std::string(kMeasurementNames[m])] = {{"count", r.measurements[m].count},
                                             {"mean_abs_error_mm", r.measurements[m].mean_mm},
                                             {"median_abs_error_mm", r.measurements[m].median_mm}};
  }
  j["measurements"] = ms;
  j["mean_measurement_error_mm"] = r.mean_measurement_error_mm;
  j["mean_landmark_error_px"] = r.mean_landmark_error_px;
  j["landmarks"] = r.landmarks;
  j["fallback_count"] = r.fallback_count;
  nlohmann::ordered_json tc;
  for (const auto& spec : kTaskSpecs) tc[std::string(spec.name)] = r.task_counts[static_cast<std::size_t>(index(spec.task))];
  j["task_counts"] = tc;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  j.at("split").get_to(r.split);
  j.at("frames").get_to(r.frames);
  j.at("accuracy").get_to(r.accuracy);
  j.at("confusion").get_to(r.confusion);
  for (std::size_t m = 0; m < r.measurements.size(); ++m) {
    const auto& e = j.at("measurements").at(std::string(kMeasurementNames[m]));
    e.at("count").get_to(r.measurements[m].count);
    e.at("mean_abs_error_mm").get_to(r.measurements[m].mean_mm);
    e.at("median_abs_error_mm").get_to(r.measurements[m].median_mm);
  }
  j.at("mean_measurement_error_mm").get_to(r.mean_measurement_error_mm);
  j.at("mean_landmark_error_px").get_to(r.mean_landmark_error_px);
  j.at("landmarks").get_to(r.landmarks);
  j.at("fallback_count").get_to(r.fallback_count);
  for (const auto& spec : kTaskSpecs) {
    j.at("task_counts").at(std::string(spec.name)).get_to(r.task_counts[static_cast<std::size_t>(index(spec.task))]);
  }
  return r;
}

std::string report_table(const MetricsReport& r, std::string_view method) {
  std::ostringstream out;
  out << "method";
  for (auto name : kMeasurementNames) out << '\t' << name;
  out << '\n' << method;
  for (const auto& m : r.measurements) {
    out << '\t';
    if (m.count == 0) {
      out << "n/a";
    } else {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f", m.mean_mm);
      out << buf;
    }
  }
  out << '\n';
  return out.str();
}

}  // namespace usmtl
