#pragma once

// Static registry of view classes, landmark tasks, global landmark channels
// and the long-/short-axis measurement pairs derived from them.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

namespace usmtl {

inline constexpr int kNumViews = 11;
inline constexpr int kNumLandmarks = 14;
inline constexpr int kNumTasks = 5;
inline constexpr int kNumMeasurements = 7;

enum class View : std::uint8_t {
  LiverRightLong = 0,
  LiverRightTrans,
  LiverLeftLong,
  LiverLeftTrans,
  KidneyRightLong,
  KidneyRightTrans,
  KidneyLeftLong,
  KidneyLeftTrans,
  SpleenLong,
  SpleenTrans,
  Others,
};

enum class Task : std::uint8_t {
  KidneyLong = 0,
  KidneyTrans,
  LiverLong,
  SpleenLong,
  SpleenTrans,
};

enum class Axis : std::uint8_t { LA, SA };

struct AxisPair {
  int first;
  int second;
  Axis axis;
  int measurement;  // index into kMeasurementNames

  friend constexpr bool operator==(const AxisPair&, const AxisPair&) = default;
};

struct TaskSpec {
  Task task;
  std::string_view name;
  int first_channel;
  int num_channels;
  std::array<AxisPair, 2> pair_storage;
  int num_pairs;

  [[nodiscard]] constexpr std::span<const AxisPair> pairs() const {
    return {pair_storage.data(), static_cast<std::size_t>(num_pairs)};
  }
  [[nodiscard]] constexpr bool owns(int channel) const {
    return channel >= first_channel && channel < first_channel + num_channels;
  }
};

inline constexpr std::array<std::string_view, kNumMeasurements> kMeasurementNames = {
    "KL_LA", "KT_LA", "KT_SA", "LL_LA", "SL_LA", "ST_LA", "ST_SA"};

inline constexpr std::array<TaskSpec, kNumTasks> kTaskSpecs = {{
    {Task::KidneyLong, "kidney_long", 0, 2, {{{0, 1, Axis::LA, 0}, {}}}, 1},
    {Task::KidneyTrans, "kidney_trans", 2, 4, {{{2, 3, Axis::LA, 1}, {4, 5, Axis::SA, 2}}}, 2},
    {Task::LiverLong, "liver_long", 6, 2, {{{6, 7, Axis::LA, 3}, {}}}, 1},
    {Task::SpleenLong, "spleen_long", 8, 2, {{{8, 9, Axis::LA, 4}, {}}}, 1},
    {Task::SpleenTrans, "spleen_trans", 10, 4, {{{10, 11, Axis::LA, 5}, {12, 13, Axis::SA, 6}}}, 2},
}};

inline constexpr std::array<std::string_view, kNumViews> kViewNames = {
    "liver_right_long",  "liver_right_trans", "liver_left_long",  "liver_left_trans",
    "kidney_right_long", "kidney_right_trans", "kidney_left_long", "kidney_left_trans",
    "spleen_long",       "spleen_trans",       "others"};

[[nodiscard]] const TaskSpec& task_spec(Task task);
[[nodiscard]] const TaskSpec& task_spec(int task_index);

/// Axis pairs of a task. Throws std::out_of_range for an unknown id.
[[nodiscard]] std::span<const AxisPair> axis_pairs_for_task(int task_index);

/// Task carried by a view, if any. Left and right kidney views share a task.
[[nodiscard]] std::optional<Task> task_for_view(View view);

/// Task owning a global landmark channel.
[[nodiscard]] Task task_for_channel(int channel);

[[nodiscard]] bool is_long_view(View view);

[[nodiscard]] std::string_view view_name(View view);
[[nodiscard]] std::string_view task_name(Task task);
[[nodiscard]] std::optional<View> parse_view(std::string_view name);
[[nodiscard]] std::optional<Task> parse_task(std::string_view name);

[[nodiscard]] inline constexpr int index(View v) { return static_cast<int>(v); }
[[nodiscard]] inline constexpr int index(Task t) { return static_cast<int>(t); }

}  // namespace usmtl
