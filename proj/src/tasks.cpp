#include "usmtl/tasks.hpp"

#include <stdexcept>
#include <string>

namespace usmtl {

const TaskSpec& task_spec(Task task) { return kTaskSpecs[static_cast<std::size_t>(task)]; }

const TaskSpec& task_spec(int task_index) {
  if (task_index < 0 || task_index >= kNumTasks) {
    throw std::out_of_range("unknown landmark task id " + std::to_string(task_index));
  }
  return kTaskSpecs[static_cast<std::size_t>(task_index)];
}

std::span<const AxisPair> axis_pairs_for_task(int task_index) { return task_spec(task_index).pairs(); }

std::optional<Task> task_for_view(View view) {
  switch (view) {
    case View::KidneyRightLong:
    case View::KidneyLeftLong:
      return Task::KidneyLong;
    case View::KidneyRightTrans:
    case View::KidneyLeftTrans:
      return Task::KidneyTrans;
    case View::LiverRightLong:
      return Task::LiverLong;
    case View::SpleenLong:
      return Task::SpleenLong;
    case View::SpleenTrans:
      return Task::SpleenTrans;
    default:
      return std::nullopt;
  }
}

Task task_for_channel(int channel) {
  for (const auto& spec : kTaskSpecs) {
    if (spec.owns(channel)) return spec.task;
  }
  throw std::out_of_range("landmark channel " + std::to_string(channel) + " outside 0..13");
}

bool is_long_view(View view) {
  switch (view) {
    case View::LiverRightLong:
    case View::LiverLeftLong:
    case View::KidneyRightLong:
    case View::KidneyLeftLong:
    case View::SpleenLong:
      return true;
    default:
      return false;
  }
}

std::string_view view_name(View view) { return kViewNames[static_cast<std::size_t>(view)]; }
std::string_view task_name(Task task) { return task_spec(task).name; }

std::optional<View> parse_view(std::string_view name) {
  for (int i = 0; i < kNumViews; ++i) {
    if (kViewNames[i] == name) return static_cast<View>(i);
  }
  return std::nullopt;
}

std::optional<Task> parse_task(std::string_view name) {
  for (const auto& spec : kTaskSpecs) {
    if (spec.name == name) return spec.task;
  }
  return std::nullopt;
}

}  // namespace usmtl
