#pragma once

// Multi-task model: single-channel stem, ResNet50-layout bottleneck stages with
// stages 1-2 shared and stages 3-4 duplicated per branch, a GAP classifier over
// all four stage outputs, and a single FCN-style landmark decoder whose skip
// transforms are global-convolution blocks (or 1x1 projections for the FCN
// ablation). Also holds the patch discriminator and the reference single-task
// networks used for parameter accounting.

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "usmtl/tasks.hpp"

namespace usmtl {

enum class Ablation { MFCN, MGCN, MGCN_R };

[[nodiscard]] std::string_view ablation_name(Ablation a);
[[nodiscard]] Ablation parse_ablation(std::string_view name);  // throws std::invalid_argument

struct ModelConfig {
  double width = 1.0;          // fraction of reference ResNet50 channel counts
  int gcn_kernel = 7;          // odd, >= 3
  double sigma = 5.0;          // ground-truth Gaussian width in pixels
  double threshold = 0.75;     // soft-argmax region threshold k
  bool use_gcn = true;
  bool use_regularizers = true;
  int num_views = kNumViews;
  int num_landmarks = kNumLandmarks;
  int head_hidden = 256;
  double heatmap_bias = -2.0;  // initial bias of the final decoder projection

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  [[nodiscard]] Ablation ablation() const;
  void apply_ablation(Ablation a);

  /// Reference output widths (256, 512, 1024, 2048) scaled by `width`.
  [[nodiscard]] std::array<int64_t, 4> stage_channels() const;
  [[nodiscard]] int64_t stem_channels() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class Partition { Shared, Classification, Landmark };

[[nodiscard]] std::string_view partition_name(Partition p);

// ---------------------------------------------------------------------------
// Building blocks

class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d reduce_{nullptr}, conv_{nullptr}, expand_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr}, bn3_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(Bottleneck);

/// `blocks` bottlenecks; the first one carries the stride and projection.
[[nodiscard]] torch::nn::Sequential make_stage(int64_t in_channels, int64_t out_channels, int blocks,
                                              int64_t stride);

class StemImpl : public torch::nn::Module {
 public:
  explicit StemImpl(int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(Stem);

/// Sum of the (k x 1 -> 1 x k) and (1 x k -> k x 1) separable paths followed by
/// a residual boundary-refinement block.
class GlobalConvSkipImpl : public torch::nn::Module {
 public:
  GlobalConvSkipImpl(int64_t in_channels, int64_t out_channels, int kernel);
  torch::Tensor forward(const torch::Tensor& x);
  /// Output of the two large-kernel paths only.
  torch::Tensor global_conv(const torch::Tensor& x);
  [[nodiscard]] int kernel() const { return kernel_; }

 private:
  int kernel_;
  torch::nn::Conv2d left_a_{nullptr}, left_b_{nullptr}, right_a_{nullptr}, right_b_{nullptr};
  torch::nn::Conv2d refine_a_{nullptr}, refine_b_{nullptr};
};
TORCH_MODULE(GlobalConvSkip);

/// Maps C x h x w features to N_L x h x w: global convolution + boundary
/// refinement when `use_gcn`, a 1x1 projection otherwise.
class SkipTransformImpl : public torch::nn::Module {
 public:
  SkipTransformImpl(int64_t in_channels, const ModelConfig& config);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  GlobalConvSkip gcn_{nullptr};
  torch::nn::Conv2d projection_{nullptr};
};
TORCH_MODULE(SkipTransform);

class LandmarkDecoderImpl : public torch::nn::Module {
 public:
  LandmarkDecoderImpl(const std::array<int64_t, 4>& level_channels, const ModelConfig& config);
  /// `levels` are encoder outputs at strides 4, 8, 16, 32.
  torch::Tensor forward(const std::array<torch::Tensor, 4>& levels, int64_t out_rows, int64_t out_cols);

 private:
  std::vector<SkipTransform> skips_;
  torch::nn::Conv2d project_{nullptr};
};
TORCH_MODULE(LandmarkDecoder);

class ClassificationHeadImpl : public torch::nn::Module {
 public:
  ClassificationHeadImpl(const std::array<int64_t, 4>& level_channels, int hidden, int num_views);
  torch::Tensor forward(const std::array<torch::Tensor, 4>& levels);
  /// Concatenated global-average-pooled features.
  torch::Tensor pooled(const std::array<torch::Tensor, 4>& levels);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(ClassificationHead);

// ---------------------------------------------------------------------------
// Models

struct SharedFeatures {
  torch::Tensor stage1;
  torch::Tensor stage2;
};

struct MultiTaskOutput {
  torch::Tensor logits;    // [B, num_views]
  torch::Tensor heatmaps;  // [B, num_landmarks, H, W] in [0, 1]
};

class MultiTaskModelImpl : public torch::nn::Module {
 public:
  explicit MultiTaskModelImpl(const ModelConfig& config);

  SharedFeatures shared(const torch::Tensor& image);
  torch::Tensor classify_from(const SharedFeatures& f);
  torch::Tensor detect_from(const SharedFeatures& f, int64_t rows, int64_t cols);

  torch::Tensor classify_view(const torch::Tensor& image);
  torch::Tensor detect_landmarks(const torch::Tensor& image);
  MultiTaskOutput forward_all(const torch::Tensor& image);

  [[nodiscard]] const ModelConfig& config() const { return config_; }

  /// Partition of a parameter/buffer by its qualified name.
  [[nodiscard]] static Partition partition_of(std::string_view qualified_name);
  [[nodiscard]] std::vector<torch::Tensor> parameters_in(Partition p) const;
  [[nodiscard]] std::vector<torch::nn::Module*> modules_in(Partition p);
  [[nodiscard]] int64_t parameter_count() const;
  [[nodiscard]] int64_t parameter_count(Partition p) const;

  /// Throws std::invalid_argument unless image is [B, 1, H, W] with H, W
  /// positive multiples of 32.
  static void check_input(const torch::Tensor& image);

 private:
  ModelConfig config_;
  Stem stem_{nullptr};
  torch::nn::Sequential stage1_{nullptr}, stage2_{nullptr};
  torch::nn::Sequential cls_stage3_{nullptr}, cls_stage4_{nullptr};
  ClassificationHead cls_head_{nullptr};
  torch::nn::Sequential lm_stage3_{nullptr}, lm_stage4_{nullptr};
  LandmarkDecoder decoder_{nullptr};
};
TORCH_MODULE(MultiTaskModel);

[[nodiscard]] MultiTaskModel build_model(const ModelConfig& config);

/// Layer of the discriminator's convolution schedule.
struct ConvLayerSpec {
  int64_t kernel;
  int64_t stride;
  int64_t padding;
};

/// PatchGAN over the channel concatenation of image and heatmaps: three
/// stride-2 4x4 convolutions then two stride-1 4x4 convolutions, giving a
/// 70 px receptive field per output patch.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  PatchDiscriminatorImpl(double width, int num_landmarks = kNumLandmarks);
  /// Returns [B, 1, h, w] patch probabilities.
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& heatmaps);
  [[nodiscard]] static std::vector<ConvLayerSpec> schedule();
  [[nodiscard]] int64_t parameter_count() const;

 private:
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

/// Stand-alone view classifier at the same width (stem + 4 stages + head).
class SingleTaskClassifierImpl : public torch::nn::Module {
 public:
  explicit SingleTaskClassifierImpl(const ModelConfig& config);
  torch::Tensor forward(const torch::Tensor& image);

 private:
  Stem stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
  ClassificationHead head_{nullptr};
};
TORCH_MODULE(SingleTaskClassifier);

/// Stand-alone landmark network for one task (stem + 4 stages + decoder).
class SingleTaskLandmarkNetImpl : public torch::nn::Module {
 public:
  SingleTaskLandmarkNetImpl(const ModelConfig& config, int num_landmarks);
  torch::Tensor forward(const torch::Tensor& image);

 private:
  Stem stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
  LandmarkDecoder decoder_{nullptr};
};
TORCH_MODULE(SingleTaskLandmarkNet);

[[nodiscard]] int64_t count_parameters(const torch::nn::Module& m);

/// Parameters of one single-task classifier plus one single-task landmark
/// network per task, all at the width of `config`.
[[nodiscard]] int64_t single_task_reference_parameter_count(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  MultiTaskModel model{nullptr};
  PatchDiscriminator discriminator{nullptr};
};

/// Binary little-endian container: magic, version, JSON header (config echo
/// and metadata), then one record per tensor with its partition label.
void save_checkpoint(const std::filesystem::path& path, MultiTaskModel& model, PatchDiscriminator* disc,
                     const nlohmann::json& meta = nlohmann::json::object());
[[nodiscard]] std::string serialize_checkpoint(MultiTaskModel& model, PatchDiscriminator* disc,
                                               const nlohmann::json& meta = nlohmann::json::object());
/// Throws std::runtime_error on a malformed or mismatched file.
[[nodiscard]] Checkpoint load_checkpoint(const std::filesystem::path& path);
[[nodiscard]] Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Lowercase hex SHA-256.
[[nodiscard]] std::string sha256_hex(std::string_view bytes);
[[nodiscard]] std::string file_sha256(const std::filesystem::path& path);

}  // namespace usmtl
