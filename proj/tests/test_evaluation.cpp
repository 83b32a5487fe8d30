#include <gtest/gtest.h>

#include <numeric>

#include "usmtl/evaluation.hpp"

using namespace usmtl;

TEST(Confusion, CountsAndAccuracy) {
  std::vector<int> pred = {0, 1, 1, 10, 3};
  std::vector<int> truth = {0, 1, 2, 10, 4};
  auto m = confusion_matrix(pred, truth);
  EXPECT_EQ(m[0][0], 1);
  EXPECT_EQ(m[2][1], 1);
  EXPECT_EQ(m[4][3], 1);
  EXPECT_DOUBLE_EQ(accuracy(m), 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(accuracy(ConfusionMatrix{}), 0.0);
  std::vector<int> short_pred = {0};
  EXPECT_THROW((void)confusion_matrix(short_pred, truth), std::invalid_argument);
  std::vector<int> bad = {11};
  std::vector<int> one = {0};
  EXPECT_THROW((void)confusion_matrix(bad, one), std::out_of_range);
}

TEST(MeasurementErrors, RenderedTruthIsRecoveredExactly) {
  std::vector<ChannelLandmark> truth = {{2, {10, 12}}, {3, {40, 50}}, {4, {20, 30}}, {5, {35, 28}}};
  auto heat = render_heatmaps(truth, 64, 64, 3.0);
  auto res = measurement_errors(heat, truth, Task::KidneyTrans, 0.5, 0.75);
  ASSERT_EQ(res.measurements.size(), 2U);
  EXPECT_EQ(res.fallbacks, 0);
  for (const auto& m : res.measurements) EXPECT_LT(m.abs_error_mm, 0.05);
  EXPECT_NEAR(res.measurements[0].truth_mm, std::hypot(30.0, 38.0) * 0.5, 1e-12);
  EXPECT_EQ(std::string(kMeasurementNames[res.measurements[1].measurement]), "KT_SA");
  for (double d : res.localisation_px) EXPECT_LT(d, 1e-5);
}

TEST(MeasurementErrors, ShiftedPredictionGivesKnownError) {
  std::vector<ChannelLandmark> truth = {{0, {10, 10}}, {1, {10, 40}}};
  std::vector<ChannelLandmark> pred = {{0, {10, 10}}, {1, {10, 46}}};
  auto res = measurement_errors(render_heatmaps(pred, 64, 64, 2.0), truth, Task::KidneyLong, 0.5, 0.75);
  EXPECT_NEAR(res.measurements[0].abs_error_mm, 3.0, 1e-5);
  EXPECT_NEAR(res.localisation_px[1], 6.0, 1e-5);
}

TEST(MeasurementErrors, MissingTruthChannelIsRejected) {
  std::vector<ChannelLandmark> truth = {{0, {10, 10}}};
  EXPECT_THROW((void)measurement_errors(torch::zeros({kNumLandmarks, 16, 16}), truth, Task::KidneyLong, 1.0, 0.75),
               std::invalid_argument);
}

TEST(MeasurementErrors, FlatPredictionFallsBack) {
  std::vector<ChannelLandmark> truth = {{8, {3, 3}}, {9, {12, 12}}};
  auto res = measurement_errors(torch::zeros({kNumLandmarks, 16, 16}), truth, Task::SpleenLong, 1.0, 0.75);
  EXPECT_EQ(res.fallbacks, 2);
}

TEST(Report, JsonRoundTripAndKeyOrder) {
  MetricsReport r;
  r.split = "test";
  r.confusion[1][2] = 3;
  r.confusion[4][4] = 7;
  r.accuracy = 0.7;
  r.frames = 10;
  r.measurements[2] = {4, 1.25, 1.0};
  r.mean_measurement_error_mm = 1.25;
  r.mean_landmark_error_px = 0.5;
  r.landmarks = 12;
  r.fallback_count = 1;
  r.task_counts[1] = 4;
  auto j = report_json(r);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  EXPECT_EQ(keys, (std::vector<std::string>{"split", "frames", "accuracy", "view_names", "confusion", "measurements",
                                            "mean_measurement_error_mm", "mean_landmark_error_px", "landmarks",
                                            "fallback_count", "task_counts"}));
  EXPECT_EQ(report_from_json(nlohmann::json::parse(j.dump())), r);
  EXPECT_ANY_THROW((void)report_from_json(nlohmann::json::object()));
}

TEST(Report, TableHasOneColumnPerMeasurement) {
  MetricsReport r;
  r.measurements[0] = {2, 1.5, 1.5};
  auto t = report_table(r, "MGCN_R");
  EXPECT_EQ(t, "method\tKL_LA\tKT_LA\tKT_SA\tLL_LA\tSL_LA\tST_LA\tST_SA\nMGCN_R\t1.500\tn/a\tn/a\tn/a\tn/a\tn/a\tn/a\n");
}

TEST(Evaluate, CountsFramesTasksAndLandmarks) {
  DatasetOptions d;
  d.view_counts = counts_per_view(1);
  d.min_frames_per_patient = 2;
  d.max_frames_per_patient = 4;
  d.target_size = 96;
  d.target_spacing = 256.0 / 96.0;
  d.phantom.field_mm = 256;
  d.phantom.min_spacing = 2.0;
  d.phantom.max_spacing = 3.0;
  auto ds = build_dataset(d);
  std::vector<std::size_t> all(ds.frames.size());
  std::iota(all.begin(), all.end(), 0);
  ModelConfig mc;
  mc.width = 0.125;
  mc.gcn_kernel = 3;
  torch::manual_seed(0);
  auto model = build_model(mc);
  auto r = evaluate(model, ds, all, "all", {0.75, 4});
  EXPECT_EQ(r.frames, 11);
  std::int64_t cells = 0;
  for (const auto& row : r.confusion)
    for (auto v : row) cells += v;
  EXPECT_EQ(cells, 11);
  EXPECT_EQ(r.task_counts[index(Task::KidneyLong)], 2);
  EXPECT_EQ(r.task_counts[index(Task::LiverLong)], 1);
  EXPECT_EQ(r.landmarks, 2 * 2 + 2 * 4 + 2 + 2 + 4);
  EXPECT_EQ(r.measurements[0].count, 2);
  std::vector<std::size_t> none;
  EXPECT_THROW((void)evaluate(model, ds, none, "none"), std::invalid_argument);
}

TEST(Evaluate, ConfigMismatchIsReported) {
  ModelConfig a;
  ModelConfig b = a;
  EXPECT_NO_THROW(check_config_match(a, b));
  b.width = 0.5;
  EXPECT_THROW(check_config_match(a, b), std::invalid_argument);
}
