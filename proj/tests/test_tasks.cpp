#include <gtest/gtest.h>

#include <set>

#include "usmtl/tasks.hpp"

using namespace usmtl;

TEST(Tasks, ChannelsPartitionTheLandmarkStack) {
  std::set<int> seen;
  for (const auto& spec : kTaskSpecs) {
    for (int c = spec.first_channel; c < spec.first_channel + spec.num_channels; ++c) {
      EXPECT_TRUE(seen.insert(c).second);
      EXPECT_EQ(task_for_channel(c), spec.task);
    }
  }
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(kNumLandmarks));
}

TEST(Tasks, LongViewsCarryOnePairTransViewsTwo) {
  for (int v = 0; v < kNumViews; ++v) {
    auto view = static_cast<View>(v);
    auto task = task_for_view(view);
    if (!task) continue;
    const auto& spec = task_spec(*task);
    EXPECT_EQ(spec.num_channels, is_long_view(view) ? 2 : 4) << view_name(view);
    EXPECT_EQ(spec.pairs().size(), is_long_view(view) ? 1U : 2U);
    EXPECT_EQ(spec.pairs()[0].axis, Axis::LA);
  }
}

TEST(Tasks, ViewToTaskTable) {
  EXPECT_EQ(task_for_view(View::KidneyLeftLong), Task::KidneyLong);
  EXPECT_EQ(task_for_view(View::KidneyRightLong), Task::KidneyLong);
  EXPECT_EQ(task_for_view(View::KidneyRightTrans), Task::KidneyTrans);
  EXPECT_EQ(task_for_view(View::LiverRightLong), Task::LiverLong);
  EXPECT_EQ(task_for_view(View::SpleenTrans), Task::SpleenTrans);
  EXPECT_FALSE(task_for_view(View::LiverLeftLong));
  EXPECT_FALSE(task_for_view(View::LiverRightTrans));
  EXPECT_FALSE(task_for_view(View::Others));
}

TEST(Tasks, MeasurementsAreEnumeratedOnce) {
  std::set<int> seen;
  for (const auto& spec : kTaskSpecs)
    for (const auto& p : spec.pairs()) {
      EXPECT_TRUE(spec.owns(p.first) && spec.owns(p.second));
      EXPECT_TRUE(seen.insert(p.measurement).second);
    }
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(kNumMeasurements));
}

TEST(Tasks, NamesRoundTrip) {
  for (int v = 0; v < kNumViews; ++v) EXPECT_EQ(parse_view(view_name(static_cast<View>(v))), static_cast<View>(v));
  for (int t = 0; t < kNumTasks; ++t) EXPECT_EQ(parse_task(task_name(static_cast<Task>(t))), static_cast<Task>(t));
  EXPECT_FALSE(parse_view("pancreas_long"));
  EXPECT_THROW((void)task_spec(kNumTasks), std::out_of_range);
}
