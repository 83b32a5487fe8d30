#pragma once

// Two-phase schedule: landmark detection first (base network by SGD, patch
// discriminator by Adam, alternating per mini-batch), then view
// classification with the shared stem and stages locked.

#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "usmtl/losses.hpp"
#include "usmtl/network.hpp"
#include "usmtl/synthetic_data.hpp"

namespace usmtl {

/// A loss became NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::string profile = "faithful";

  // Phase 1: landmarks.
  int landmark_batch = 4;
  int landmark_epochs = 30;
  std::string base_optimizer = "sgd";  // "sgd" or "adam"
  double base_lr = 1e-6;
  double base_momentum = 0.9;
  double adversary_lr = 2e-4;
  double adversary_beta1 = 0.5;
  double adversary_beta2 = 0.999;
  /// Leading epochs trained on the L2 term alone.
  int regularizer_warmup_epochs = 0;

  // Phase 2: views.
  int view_batch = 8;
  int view_epochs = 5;
  double view_lr = 5e-4;
  double view_beta1 = 0.9;
  double view_beta2 = 0.999;

  double threshold = 0.75;
  LossWeights weights = {1.0, 1.0, 1.0};
  std::uint64_t seed = 0;
  /// Single intra-op thread; required for bit-reproducible runs.
  bool reference_mode = true;

  void validate() const;

  /// Full-scale reference hyperparameters.
  [[nodiscard]] static TrainConfig faithful();
  /// Small-scale schedule: Adam at 1e-4, an L2-only warmup, damped adversary.
  [[nodiscard]] static TrainConfig desk();
  [[nodiscard]] static TrainConfig for_profile(std::string_view name);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One record per optimisation step.
struct StepRecord {
  std::string phase;
  int step = 0;
  int epoch = 0;
  double l2 = 0.0;
  double coord = 0.0;
  double adv = 0.0;
  double combined = 0.0;
  double discriminator = 0.0;
  double cross_entropy = 0.0;
  double lr = 0.0;
  double timestamp = 0.0;  // seconds since the phase started
};

[[nodiscard]] nlohmann::ordered_json step_json(const StepRecord& r);

/// Where a phase persists its artifacts; an empty directory keeps everything
/// in memory.
struct PhaseOutput {
  std::filesystem::path dir;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct PhaseResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
  std::optional<std::filesystem::path> last_checkpoint;
  std::optional<std::filesystem::path> best_checkpoint;
};

/// Tensors assembled from a dataset subset.
struct Batch {
  torch::Tensor images;        // [B, 1, H, W]
  torch::Tensor masked_images; // [B, 1, H, W] icon removed
  torch::Tensor coords;        // [B, L, 2]
  torch::Tensor selection;     // [B, L] bool
  torch::Tensor views;         // [B] int64
};

[[nodiscard]] Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
[[nodiscard]] torch::Tensor render_batch_heatmaps(const Dataset& data, std::span<const std::size_t> indices,
                                                  double sigma);

/// Channels of the frame's landmark task, empty without one.
[[nodiscard]] std::vector<int> select_backprop_channels(const UltrasoundFrame& frame);
[[nodiscard]] torch::Tensor selection_mask(const UltrasoundFrame& frame);

/// Frames of `split` that carry a landmark task.
[[nodiscard]] std::vector<std::size_t> landmark_indices(const Dataset& data, Split split);

/// Throws std::invalid_argument when the train split has no landmark frames.
PhaseResult train_landmark_phase(MultiTaskModel& model, PatchDiscriminator& disc, const Dataset& data,
                                 const TrainConfig& config, const PhaseOutput& out = {});

/// Updates only the classification stages and head, on icon-masked inputs.
PhaseResult train_view_phase(MultiTaskModel& model, const Dataset& data, const TrainConfig& config,
                             const PhaseOutput& out = {});

/// Loads the landmark-phase checkpoint, then trains views. Throws
/// std::runtime_error if the checkpoint is missing.
PhaseResult train_view_phase(const std::filesystem::path& phase1_checkpoint, const Dataset& data,
                             const TrainConfig& config, MultiTaskModel& model_out, const PhaseOutput& out = {});

/// Applies reference-mode threading and seeds torch.
void prepare_determinism(const TrainConfig& config);

}  // namespace usmtl
