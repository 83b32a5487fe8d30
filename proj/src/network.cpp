#include "usmtl/network.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace usmtl {

namespace F = torch::nn::functional;

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::MFCN:
      return "mfcn";
    case Ablation::MGCN:
      return "mgcn";
    case Ablation::MGCN_R:
      return "mgcn_r";
  }
  return "?";
}

Ablation parse_ablation(std::string_view name) {
  for (auto a : {Ablation::MFCN, Ablation::MGCN, Ablation::MGCN_R}) {
    if (ablation_name(a) == name) return a;
  }
  throw std::invalid_argument("unknown ablation '" + std::string(name) + "' (expected mfcn, mgcn or mgcn_r)");
}

// ---------------------------------------------------------------------------
// ModelConfig

namespace {
constexpr std::array<int64_t, 4> kReferenceStageChannels = {256, 512, 1024, 2048};
constexpr std::array<int, 4> kStageBlocks = {3, 4, 6, 3};
constexpr std::array<int64_t, 4> kStageStrides = {1, 2, 2, 2};
constexpr int64_t kReferenceStemChannels = 64;

int64_t scaled(int64_t reference, double width) {
  return static_cast<int64_t>(std::floor(static_cast<double>(reference) * width + 1e-9));
}
}  // namespace

std::array<int64_t, 4> ModelConfig::stage_channels() const {
  std::array<int64_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) out[i] = scaled(kReferenceStageChannels[i], width);
  return out;
}

int64_t ModelConfig::stem_channels() const { return scaled(kReferenceStemChannels, width); }

void ModelConfig::validate() const {
  if (!(width > 0.0 && width <= 1.0)) throw std::invalid_argument("model.width must lie in (0, 1]");
  if (stem_channels() < 1 || stage_channels()[0] / 4 < 1) {
    throw std::invalid_argument("model.width " + std::to_string(width) + " yields zero channels");
  }
  if (gcn_kernel < 3 || gcn_kernel % 2 == 0) throw std::invalid_argument("model.gcn_kernel must be odd and >= 3");
  if (!(sigma > 0.0)) throw std::invalid_argument("model.sigma must be positive");
  if (!(threshold >= 0.0 && threshold < 1.0)) throw std::invalid_argument("model.threshold must lie in [0, 1)");
  if (num_views < 2) throw std::invalid_argument("model.num_views must be >= 2");
  if (num_landmarks < 1) throw std::invalid_argument("model.num_landmarks must be >= 1");
  if (head_hidden < 1) throw std::invalid_argument("model.head_hidden must be >= 1");
}

Ablation ModelConfig::ablation() const {
  if (!use_gcn) return Ablation::MFCN;
  return use_regularizers ? Ablation::MGCN_R : Ablation::MGCN;
}

void ModelConfig::apply_ablation(Ablation a) {
  use_gcn = a != Ablation::MFCN;
  use_regularizers = a == Ablation::MGCN_R;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"width", c.width},
                     {"gcn_kernel", c.gcn_kernel},
                     {"sigma", c.sigma},
                     {"threshold", c.threshold},
                     {"use_gcn", c.use_gcn},
                     {"use_regularizers", c.use_regularizers},
                     {"num_views", c.num_views},
                     {"num_landmarks", c.num_landmarks},
                     {"head_hidden", c.head_hidden},
                     {"heatmap_bias", c.heatmap_bias}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("width").get_to(c.width);
  j.at("gcn_kernel").get_to(c.gcn_kernel);
  j.at("sigma").get_to(c.sigma);
  j.at("threshold").get_to(c.threshold);
  j.at("use_gcn").get_to(c.use_gcn);
  j.at("use_regularizers").get_to(c.use_regularizers);
  j.at("num_views").get_to(c.num_views);
  j.at("num_landmarks").get_to(c.num_landmarks);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("heatmap_bias").get_to(c.heatmap_bias);
}

std::string_view partition_name(Partition p) {
  switch (p) {
    case Partition::Shared:
      return "shared";
    case Partition::Classification:
      return "classification";
    case Partition::Landmark:
      return "landmark";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kh, int64_t kw, int64_t stride, int64_t ph, int64_t pw,
                       bool bias) {
  auto c = torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, {kh, kw}).stride(stride).padding({ph, pw}).bias(bias));
  torch::nn::init::kaiming_normal_(c->weight, 0.0, torch::kFanIn, torch::kReLU);
  if (bias) torch::nn::init::zeros_(c->bias);
  return c;
}

torch::nn::Conv2d square_conv(int64_t in, int64_t out, int64_t k, int64_t stride, bool bias = false) {
  return conv(in, out, k, k, stride, k / 2, k / 2, bias);
}

torch::Tensor upsample_to(const torch::Tensor& x, int64_t rows, int64_t cols) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{rows, cols})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  const int64_t mid = out_channels / 4;
  reduce_ = register_module("reduce", square_conv(in_channels, mid, 1, 1));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(mid));
  conv_ = register_module("conv", square_conv(mid, mid, 3, stride));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(mid));
  expand_ = register_module("expand", square_conv(mid, out_channels, 1, 1));
  bn3_ = register_module("bn3", torch::nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module(
        "shortcut",
        torch::nn::Sequential(square_conv(in_channels, out_channels, 1, stride), torch::nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn1_(reduce_(x)));
  y = torch::relu(bn2_(conv_(y)));
  y = bn3_(expand_(y));
  return torch::relu(y + (shortcut_ ? shortcut_->forward(x) : x));
}

torch::nn::Sequential make_stage(int64_t in_channels, int64_t out_channels, int blocks, int64_t stride) {
  torch::nn::Sequential stage;
  stage->push_back(Bottleneck(in_channels, out_channels, stride));
  for (int i = 1; i < blocks; ++i) stage->push_back(Bottleneck(out_channels, out_channels, 1));
  return stage;
}

StemImpl::StemImpl(int64_t out_channels) {
  conv_ = register_module("conv", square_conv(1, out_channels, 7, 2));
  bn_ = register_module("bn", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor StemImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(bn_(conv_(x)));
  return F::max_pool2d(y, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
}

GlobalConvSkipImpl::GlobalConvSkipImpl(int64_t in_channels, int64_t out_channels, int kernel) : kernel_(kernel) {
  const int64_t k = kernel;
  const int64_t p = k / 2;
  left_a_ = register_module("left_a", conv(in_channels, out_channels, k, 1, 1, p, 0, false));
  left_b_ = register_module("left_b", conv(out_channels, out_channels, 1, k, 1, 0, p, false));
  right_a_ = register_module("right_a", conv(in_channels, out_channels, 1, k, 1, 0, p, false));
  right_b_ = register_module("right_b", conv(out_channels, out_channels, k, 1, 1, p, 0, false));
  refine_a_ = register_module("refine_a", square_conv(out_channels, out_channels, 3, 1, true));
  refine_b_ = register_module("refine_b", square_conv(out_channels, out_channels, 3, 1, true));
}

torch::Tensor GlobalConvSkipImpl::global_conv(const torch::Tensor& x) {
  if (x.size(-2) < kernel_ || x.size(-1) < kernel_) {
    throw std::invalid_argument("global convolution kernel " + std::to_string(kernel_) + " exceeds feature map " +
                                std::to_string(x.size(-2)) + "x" + std::to_string(x.size(-1)));
  }
  return left_b_(left_a_(x)) + right_b_(right_a_(x));
}

torch::Tensor GlobalConvSkipImpl::forward(const torch::Tensor& x) {
  auto y = global_conv(x);
  return y + refine_b_(torch::relu(refine_a_(y)));
}

SkipTransformImpl::SkipTransformImpl(int64_t in_channels, const ModelConfig& config) {
  if (config.use_gcn) {
    gcn_ = register_module("gcn", GlobalConvSkip(in_channels, config.num_landmarks, config.gcn_kernel));
  } else {
    projection_ = register_module("projection", square_conv(in_channels, config.num_landmarks, 1, 1, true));
  }
}

torch::Tensor SkipTransformImpl::forward(const torch::Tensor& x) {
  return gcn_ ? gcn_->forward(x) : projection_->forward(x);
}

LandmarkDecoderImpl::LandmarkDecoderImpl(const std::array<int64_t, 4>& level_channels, const ModelConfig& config) {
  for (std::size_t i = 0; i < level_channels.size(); ++i) {
    skips_.push_back(register_module("skip" + std::to_string(i + 1), SkipTransform(level_channels[i], config)));
  }
  project_ = register_module("project", square_conv(config.num_landmarks, config.num_landmarks, 1, 1, true));
  // Flat initial maps keep the sigmoid out of saturation.
  torch::nn::init::zeros_(project_->weight);
  torch::nn::init::constant_(project_->bias, config.heatmap_bias);
}

torch::Tensor LandmarkDecoderImpl::forward(const std::array<torch::Tensor, 4>& levels, int64_t out_rows,
                                           int64_t out_cols) {
  auto y = skips_[3]->forward(levels[3]);
  for (int i = 2; i >= 0; --i) {
    const auto& f = levels[static_cast<std::size_t>(i)];
    y = upsample_to(y, f.size(-2), f.size(-1)) + skips_[static_cast<std::size_t>(i)]->forward(f);
  }
  return torch::sigmoid(upsample_to(project_(y), out_rows, out_cols));
}

ClassificationHeadImpl::ClassificationHeadImpl(const std::array<int64_t, 4>& level_channels, int hidden,
                                               int num_views) {
  int64_t pooled = 0;
  for (auto c : level_channels) pooled += c;
  fc1_ = register_module("fc1", torch::nn::Linear(pooled, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, num_views));
}

torch::Tensor ClassificationHeadImpl::pooled(const std::array<torch::Tensor, 4>& levels) {
  std::vector<torch::Tensor> parts;
  parts.reserve(levels.size());
  for (const auto& f : levels) parts.push_back(f.mean({-2, -1}));
  return torch::cat(parts, 1);
}

torch::Tensor ClassificationHeadImpl::forward(const std::array<torch::Tensor, 4>& levels) {
  return fc2_(torch::relu(fc1_(pooled(levels))));
}

// ---------------------------------------------------------------------------
// MultiTaskModel

MultiTaskModelImpl::MultiTaskModelImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto ch = config_.stage_channels();
  stem_ = register_module("stem", Stem(config_.stem_channels()));
  stage1_ = register_module("stage1", make_stage(config_.stem_channels(), ch[0], kStageBlocks[0], kStageStrides[0]));
  stage2_ = register_module("stage2", make_stage(ch[0], ch[1], kStageBlocks[1], kStageStrides[1]));
  cls_stage3_ = register_module("cls_stage3", make_stage(ch[1], ch[2], kStageBlocks[2], kStageStrides[2]));
  cls_stage4_ = register_module("cls_stage4", make_stage(ch[2], ch[3], kStageBlocks[3], kStageStrides[3]));
  cls_head_ = register_module("cls_head", ClassificationHead(ch, config_.head_hidden, config_.num_views));
  lm_stage3_ = register_module("lm_stage3", make_stage(ch[1], ch[2], kStageBlocks[2], kStageStrides[2]));
  lm_stage4_ = register_module("lm_stage4", make_stage(ch[2], ch[3], kStageBlocks[3], kStageStrides[3]));
  decoder_ = register_module("decoder", LandmarkDecoder(ch, config_));
}

void MultiTaskModelImpl::check_input(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 1) {
    throw std::invalid_argument("expected a single-channel image batch [B, 1, H, W]");
  }
  if (image.size(2) < 32 || image.size(3) < 32 || image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw std::invalid_argument("image height and width must be positive multiples of 32");
  }
}

SharedFeatures MultiTaskModelImpl::shared(const torch::Tensor& image) {
  check_input(image);
  auto s1 = stage1_->forward(stem_(image));
  auto s2 = stage2_->forward(s1);
  return {s1, s2};
}

torch::Tensor MultiTaskModelImpl::classify_from(const SharedFeatures& f) {
  auto s3 = cls_stage3_->forward(f.stage2);
  auto s4 = cls_stage4_->forward(s3);
  return cls_head_->forward({f.stage1, f.stage2, s3, s4});
}

torch::Tensor MultiTaskModelImpl::detect_from(const SharedFeatures& f, int64_t rows, int64_t cols) {
  auto s3 = lm_stage3_->forward(f.stage2);
  auto s4 = lm_stage4_->forward(s3);
  return decoder_->forward({f.stage1, f.stage2, s3, s4}, rows, cols);
}

torch::Tensor MultiTaskModelImpl::classify_view(const torch::Tensor& image) { return classify_from(shared(image)); }

torch::Tensor MultiTaskModelImpl::detect_landmarks(const torch::Tensor& image) {
  auto f = shared(image);
  return detect_from(f, image.size(2), image.size(3));
}

MultiTaskOutput MultiTaskModelImpl::forward_all(const torch::Tensor& image) {
  auto f = shared(image);
  return {classify_from(f), detect_from(f, image.size(2), image.size(3))};
}

Partition MultiTaskModelImpl::partition_of(std::string_view qualified_name) {
  auto head = qualified_name.substr(0, qualified_name.find('.'));
  if (head == "stem" || head == "stage1" || head == "stage2") return Partition::Shared;
  if (head.starts_with("cls_")) return Partition::Classification;
  if (head.starts_with("lm_") || head == "decoder") return Partition::Landmark;
  throw std::invalid_argument("parameter '" + std::string(qualified_name) + "' has no partition");
}

std::vector<torch::Tensor> MultiTaskModelImpl::parameters_in(Partition p) const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (partition_of(item.key()) == p) out.push_back(item.value());
  }
  return out;
}

std::vector<torch::nn::Module*> MultiTaskModelImpl::modules_in(Partition p) {
  switch (p) {
    case Partition::Shared:
      return {stem_.get(), stage1_.get(), stage2_.get()};
    case Partition::Classification:
      return {cls_stage3_.get(), cls_stage4_.get(), cls_head_.get()};
    case Partition::Landmark:
      return {lm_stage3_.get(), lm_stage4_.get(), decoder_.get()};
  }
  return {};
}

int64_t MultiTaskModelImpl::parameter_count() const { return count_parameters(*this); }

int64_t MultiTaskModelImpl::parameter_count(Partition p) const {
  int64_t n = 0;
  for (const auto& t : parameters_in(p)) n += t.numel();
  return n;
}

MultiTaskModel build_model(const ModelConfig& config) { return MultiTaskModel(config); }

int64_t count_parameters(const torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Discriminator and single-task references

std::vector<ConvLayerSpec> PatchDiscriminatorImpl::schedule() {
  return {{4, 2, 1}, {4, 2, 1}, {4, 2, 1}, {4, 1, 1}, {4, 1, 1}};
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(double width, int num_landmarks) {
  const std::array<int64_t, 4> widths = {std::max<int64_t>(1, scaled(64, width)),
                                         std::max<int64_t>(1, scaled(128, width)),
                                         std::max<int64_t>(1, scaled(256, width)),
                                         std::max<int64_t>(1, scaled(512, width))};
  const auto layers = schedule();
  net_ = torch::nn::Sequential();
  int64_t in = num_landmarks + 1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool last = i + 1 == layers.size();
    const int64_t out = last ? 1 : widths[i];
    const auto& l = layers[i];
    auto c = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in, out, l.kernel).stride(l.stride).padding(l.padding).bias(i == 0 || last));
    torch::nn::init::normal_(c->weight, 0.0, 0.02);
    if (c->options.bias()) torch::nn::init::zeros_(c->bias);
    net_->push_back(c);
    if (!last) {
      if (i > 0) net_->push_back(torch::nn::BatchNorm2d(out));
      net_->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    }
    in = out;
  }
  net_->push_back(torch::nn::Sigmoid());
  register_module("net", net_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& image, const torch::Tensor& heatmaps) {
  if (image.dim() != 4 || heatmaps.dim() != 4 || image.size(0) != heatmaps.size(0) ||
      image.size(2) != heatmaps.size(2) || image.size(3) != heatmaps.size(3)) {
    throw std::invalid_argument("discriminator inputs must be spatially aligned [B, C, H, W] tensors");
  }
  return net_->forward(torch::cat({image, heatmaps}, 1));
}

int64_t PatchDiscriminatorImpl::parameter_count() const { return count_parameters(*this); }

SingleTaskClassifierImpl::SingleTaskClassifierImpl(const ModelConfig& config) {
  config.validate();
  const auto ch = config.stage_channels();
  stem_ = register_module("stem", Stem(config.stem_channels()));
  int64_t in = config.stem_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    stages_[i] = register_module("stage" + std::to_string(i + 1),
                                 make_stage(in, ch[i], kStageBlocks[i], kStageStrides[i]));
    in = ch[i];
  }
  head_ = register_module("head", ClassificationHead(ch, config.head_hidden, config.num_views));
}

torch::Tensor SingleTaskClassifierImpl::forward(const torch::Tensor& image) {
  MultiTaskModelImpl::check_input(image);
  std::array<torch::Tensor, 4> levels;
  auto x = stem_(image);
  for (std::size_t i = 0; i < 4; ++i) x = levels[i] = stages_[i]->forward(x);
  return head_->forward(levels);
}

SingleTaskLandmarkNetImpl::SingleTaskLandmarkNetImpl(const ModelConfig& config, int num_landmarks) {
  config.validate();
  auto cfg = config;
  cfg.num_landmarks = num_landmarks;
  const auto ch = cfg.stage_channels();
  stem_ = register_module("stem", Stem(cfg.stem_channels()));
  int64_t in = cfg.stem_channels();
  for (std::size_t i = 0; i < 4; ++i) {
    stages_[i] = register_module("stage" + std::to_string(i + 1),
                                 make_stage(in, ch[i], kStageBlocks[i], kStageStrides[i]));
    in = ch[i];
  }
  decoder_ = register_module("decoder", LandmarkDecoder(ch, cfg));
}

torch::Tensor SingleTaskLandmarkNetImpl::forward(const torch::Tensor& image) {
  MultiTaskModelImpl::check_input(image);
  std::array<torch::Tensor, 4> levels;
  auto x = stem_(image);
  for (std::size_t i = 0; i < 4; ++i) x = levels[i] = stages_[i]->forward(x);
  return decoder_->forward(levels, image.size(2), image.size(3));
}

int64_t single_task_reference_parameter_count(const ModelConfig& config) {
  int64_t total = count_parameters(*SingleTaskClassifier(config));
  for (const auto& spec : kTaskSpecs) total += count_parameters(*SingleTaskLandmarkNet(config, spec.num_channels));
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'U', 'S', 'M', 'T', 'L', 'C', 'K', 'P'};

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2 };

class Writer {
 public:
  template <typename T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    auto u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    need(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<U>(static_cast<std::uint8_t>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }
  std::string get_string() {
    auto n = get<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto v = in_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  [[nodiscard]] bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw std::runtime_error("checkpoint truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, std::string_view label, bool is_buffer,
                  const torch::Tensor& value) {
  auto t = value.detach().contiguous().cpu();
  w.put_string(name);
  w.put_string(label);
  w.put(static_cast<std::uint8_t>(is_buffer ? 1 : 0));
  DType dt{};
  switch (t.scalar_type()) {
    case torch::kFloat32:
      dt = DType::F32;
      break;
    case torch::kFloat64:
      dt = DType::F64;
      break;
    case torch::kInt64:
      dt = DType::I64;
      break;
    default:
      throw std::runtime_error("checkpoint: unsupported dtype for " + name);
  }
  w.put(static_cast<std::uint8_t>(dt));
  w.put(static_cast<std::uint32_t>(t.dim()));
  for (auto d : t.sizes()) w.put(static_cast<std::int64_t>(d));
  const auto n = t.numel();
  if (dt == DType::F32) {
    const float* p = t.data_ptr<float>();
    for (int64_t i = 0; i < n; ++i) w.put(p[i]);
  } else if (dt == DType::F64) {
    const double* p = t.data_ptr<double>();
    for (int64_t i = 0; i < n; ++i) w.put(p[i]);
  } else {
    const int64_t* p = t.data_ptr<int64_t>();
    for (int64_t i = 0; i < n; ++i) w.put(p[i]);
  }
}

struct Record {
  std::string label;
  bool is_buffer = false;
  torch::Tensor value;
};

Record read_tensor(Reader& r, std::string& name) {
  Record rec;
  name = r.get_string();
  rec.label = r.get_string();
  rec.is_buffer = r.get<std::uint8_t>() != 0;
  auto dt = static_cast<DType>(r.get<std::uint8_t>());
  auto ndim = r.get<std::uint32_t>();
  std::vector<int64_t> dims(ndim);
  for (auto& d : dims) d = r.get<std::int64_t>();
  switch (dt) {
    case DType::F32: {
      rec.value = torch::empty(dims, torch::kFloat32);
      float* p = rec.value.data_ptr<float>();
      for (int64_t i = 0; i < rec.value.numel(); ++i) p[i] = r.get<float>();
      break;
    }
    case DType::F64: {
      rec.value = torch::empty(dims, torch::kFloat64);
      double* p = rec.value.data_ptr<double>();
      for (int64_t i = 0; i < rec.value.numel(); ++i) p[i] = r.get<double>();
      break;
    }
    case DType::I64: {
      rec.value = torch::empty(dims, torch::kInt64);
      int64_t* p = rec.value.data_ptr<int64_t>();
      for (int64_t i = 0; i < rec.value.numel(); ++i) p[i] = r.get<int64_t>();
      break;
    }
    default:
      throw std::runtime_error("checkpoint: unknown dtype tag for " + name);
  }
  return rec;
}

void assign(torch::nn::Module& m, const std::string& prefix, std::map<std::string, Record>& records) {
  torch::NoGradGuard no_grad;
  auto take = [&](const std::string& key, torch::Tensor& dst) {
    auto it = records.find(prefix + key);
    if (it == records.end()) throw std::runtime_error("checkpoint missing tensor " + prefix + key);
    if (it->second.value.sizes() != dst.sizes() || it->second.value.scalar_type() != dst.scalar_type()) {
      throw std::runtime_error("checkpoint tensor " + prefix + key + " does not match the model");
    }
    dst.copy_(it->second.value);
    records.erase(it);
  };
  for (auto& item : m.named_parameters()) take(item.key(), item.value());
  for (auto& item : m.named_buffers()) take(item.key(), item.value());
}

}  // namespace

std::string serialize_checkpoint(MultiTaskModel& model, PatchDiscriminator* disc, const nlohmann::json& meta) {
  Writer w;
  for (char c : kMagic) w.put(c);
  w.put(kCheckpointVersion);
  nlohmann::json header = {{"config", model->config()},
                           {"has_discriminator", disc != nullptr && !disc->is_empty()},
                           {"meta", meta}};
  w.put_string(header.dump());

  std::uint32_t count = 0;
  count += static_cast<std::uint32_t>(model->named_parameters().size() + model->named_buffers().size());
  const bool with_disc = disc != nullptr && !disc->is_empty();
  if (with_disc) count += static_cast<std::uint32_t>((*disc)->named_parameters().size() + (*disc)->named_buffers().size());
  w.put(count);

  for (const auto& item : model->named_parameters()) {
    write_tensor(w, "model." + item.key(), partition_name(MultiTaskModelImpl::partition_of(item.key())), false,
                 item.value());
  }
  for (const auto& item : model->named_buffers()) {
    write_tensor(w, "model." + item.key(), partition_name(MultiTaskModelImpl::partition_of(item.key())), true,
                 item.value());
  }
  if (with_disc) {
    for (const auto& item : (*disc)->named_parameters()) {
      write_tensor(w, "disc." + item.key(), "discriminator", false, item.value());
    }
    for (const auto& item : (*disc)->named_buffers()) {
      write_tensor(w, "disc." + item.key(), "discriminator", true, item.value());
    }
  }
  return w.take();
}

void save_checkpoint(const std::filesystem::path& path, MultiTaskModel& model, PatchDiscriminator* disc,
                     const nlohmann::json& meta) {
  auto bytes = serialize_checkpoint(model, disc, meta);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.get<char>() != c) throw std::runtime_error("not a checkpoint file (bad magic)");
  }
  auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  auto header = nlohmann::json::parse(r.get_string());
  Checkpoint ck;
  ck.config = header.at("config").get<ModelConfig>();
  ck.meta = header.value("meta", nlohmann::json::object());

  std::map<std::string, Record> records;
  auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    auto rec = read_tensor(r, name);
    records.emplace(std::move(name), std::move(rec));
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");

  ck.model = build_model(ck.config);
  assign(*ck.model, "model.", records);
  if (header.value("has_discriminator", false)) {
    ck.discriminator = PatchDiscriminator(ck.config.width, ck.config.num_landmarks);
    assign(*ck.discriminator, "disc.", records);
  }
  if (!records.empty()) throw std::runtime_error("checkpoint has unexpected tensor " + records.begin()->first);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace usmtl
