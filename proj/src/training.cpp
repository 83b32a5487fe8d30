#include "usmtl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "usmtl/heatmap_geometry.hpp"

namespace usmtl {

void TrainConfig::validate() const {
  if (landmark_batch < 1 || view_batch < 1) throw std::invalid_argument("train: batch sizes must be positive");
  if (regularizer_warmup_epochs < 0) throw std::invalid_argument("train: warmup epochs must be non-negative");
  if (landmark_epochs < 0 || view_epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
  if (!(base_lr > 0 && adversary_lr > 0 && view_lr > 0)) throw std::invalid_argument("train: LRs must be positive");
  if (base_optimizer != "sgd" && base_optimizer != "adam") {
    throw std::invalid_argument("train: base_optimizer must be sgd or adam");
  }
  if (!(threshold >= 0.0 && threshold < 1.0)) throw std::invalid_argument("train: threshold must lie in [0, 1)");
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("train: loss weights must be non-negative");
  }
}

TrainConfig TrainConfig::faithful() { return {}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.profile = "desk";
  c.base_lr = 1e-4;
  c.base_optimizer = "adam";
  c.base_momentum = 0.9;
  c.landmark_epochs = 40;
  c.regularizer_warmup_epochs = 20;
  c.weights = {1.0, 1.0, 0.01};
  c.view_epochs = 30;
  return c;
}

TrainConfig TrainConfig::for_profile(std::string_view name) {
  if (name == "faithful") return faithful();
  if (name == "desk") return desk();
  throw std::invalid_argument("unknown training profile '" + std::string(name) + "' (expected faithful or desk)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"profile", c.profile},
                     {"landmark_batch", c.landmark_batch},
                     {"landmark_epochs", c.landmark_epochs},
                     {"base_optimizer", c.base_optimizer},
                     {"base_lr", c.base_lr},
                     {"base_momentum", c.base_momentum},
                     {"adversary_lr", c.adversary_lr},
                     {"adversary_beta1", c.adversary_beta1},
                     {"adversary_beta2", c.adversary_beta2},
                     {"regularizer_warmup_epochs", c.regularizer_warmup_epochs},
                     {"view_batch", c.view_batch},
                     {"view_epochs", c.view_epochs},
                     {"view_lr", c.view_lr},
                     {"view_beta1", c.view_beta1},
                     {"view_beta2", c.view_beta2},
                     {"threshold", c.threshold},
                     {"weights", c.weights},
                     {"seed", c.seed},
                     {"reference_mode", c.reference_mode}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("profile").get_to(c.profile);
  j.at("landmark_batch").get_to(c.landmark_batch);
  j.at("landmark_epochs").get_to(c.landmark_epochs);
  j.at("base_optimizer").get_to(c.base_optimizer);
  j.at("base_lr").get_to(c.base_lr);
  j.at("base_momentum").get_to(c.base_momentum);
  j.at("adversary_lr").get_to(c.adversary_lr);
  j.at("adversary_beta1").get_to(c.adversary_beta1);
  j.at("adversary_beta2").get_to(c.adversary_beta2);
  j.at("regularizer_warmup_epochs").get_to(c.regularizer_warmup_epochs);
  j.at("view_batch").get_to(c.view_batch);
  j.at("view_epochs").get_to(c.view_epochs);
  j.at("view_lr").get_to(c.view_lr);
  j.at("view_beta1").get_to(c.view_beta1);
  j.at("view_beta2").get_to(c.view_beta2);
  j.at("threshold").get_to(c.threshold);
  j.at("weights").get_to(c.weights);
  j.at("seed").get_to(c.seed);
  j.at("reference_mode").get_to(c.reference_mode);
}

nlohmann::ordered_json step_json(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["phase"] = r.phase;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  if (r.phase == "landmarks") {
    j["l2"] = r.l2;
    j["coord"] = r.coord;
    j["adv"] = r.adv;
    j["combined"] = r.combined;
    j["discriminator"] = r.discriminator;
  } else {
    j["cross_entropy"] = r.cross_entropy;
  }
  j["lr"] = r.lr;
  j["timestamp"] = r.timestamp;
  return j;
}

void prepare_determinism(const TrainConfig& config) {
  if (config.reference_mode) torch::set_num_threads(1);
  torch::manual_seed(config.seed);
}

// ---------------------------------------------------------------------------
// Batching

std::vector<int> select_backprop_channels(const UltrasoundFrame& frame) {
  std::vector<int> out;
  if (auto task = frame.task()) {
    const auto& spec = task_spec(*task);
    for (int c = 0; c < spec.num_channels; ++c) out.push_back(spec.first_channel + c);
  }
  return out;
}

torch::Tensor selection_mask(const UltrasoundFrame& frame) {
  auto mask = torch::zeros({kNumLandmarks}, torch::kBool);
  for (int c : select_backprop_channels(frame)) mask[c] = true;
  return mask;
}

namespace {

torch::Tensor image_tensor(const Image& img) {
  return torch::from_blob(const_cast<float*>(img.pixels.data()), {1, img.rows, img.cols}, torch::kFloat32).clone();
}

}  // namespace

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const auto n = static_cast<int64_t>(indices.size());
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> masked;
  auto coords = torch::zeros({n, kNumLandmarks, 2}, torch::kFloat32);
  auto selection = torch::zeros({n, kNumLandmarks}, torch::kBool);
  auto views = torch::zeros({n}, torch::kInt64);
  auto c = coords.accessor<float, 3>();
  for (int64_t b = 0; b < n; ++b) {
    const auto& f = data.frames[indices[static_cast<std::size_t>(b)]];
    images.push_back(image_tensor(f.image));
    Image m = f.image;
    mask_icon_in_place(m, f.icon);
    masked.push_back(image_tensor(m));
    selection[b] = selection_mask(f);
    views[b] = index(f.view);
    for (const auto& lm : f.landmarks) {
      c[b][lm.channel][0] = static_cast<float>(lm.point.s);
      c[b][lm.channel][1] = static_cast<float>(lm.point.t);
    }
  }
  return {torch::stack(images), torch::stack(masked), coords, selection, views};
}

torch::Tensor render_batch_heatmaps(const Dataset& data, std::span<const std::size_t> indices, double sigma) {
  std::vector<torch::Tensor> maps;
  maps.reserve(indices.size());
  for (auto i : indices) {
    const auto& f = data.frames[i];
    maps.push_back(render_heatmaps(f.landmarks, f.image.rows, f.image.cols, sigma, torch::kFloat32));
  }
  return torch::stack(maps);
}

std::vector<std::size_t> landmark_indices(const Dataset& data, Split split) {
  std::vector<std::size_t> out;
  for (auto i : data.manifest.indices(split)) {
    if (data.frames[i].task()) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Phases

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t> pool, int batch, std::mt19937_64& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < pool.size(); i += static_cast<std::size_t>(batch)) {
    out.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(i),
                     pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), i + batch)));
  }
  return out;
}

void check_finite(const torch::Tensor& loss, const char* what, int step) {
  if (!std::isfinite(loss.item<double>())) {
    throw NumericError(std::string(what) + " loss is not finite at step " + std::to_string(step));
  }
}

void set_training(const std::vector<torch::nn::Module*>& modules, bool on) {
  for (auto* m : modules) m->train(on);
}

struct EpochCheckpoints {
  std::filesystem::path dir;
  std::string stem;
  double best = std::numeric_limits<double>::infinity();
  PhaseResult* result;

  void save(MultiTaskModel& model, PatchDiscriminator* disc, int epoch, double loss, const TrainConfig& cfg) {
    if (dir.empty()) return;
    nlohmann::json meta = {{"phase", stem}, {"epoch", epoch}, {"train", cfg}, {"epoch_loss", loss}};
    auto last = dir / (stem + "_last.ckpt");
    save_checkpoint(last, model, disc, meta);
    result->last_checkpoint = last;
    if (loss < best) {
      best = loss;
      auto b = dir / (stem + "_best.ckpt");
      save_checkpoint(b, model, disc, meta);
      result->best_checkpoint = b;
    }
  }
};

class StepLog {
 public:
  StepLog(const PhaseOutput& out, const std::string& name) : out_(out) {
    if (!out.dir.empty()) {
      std::filesystem::create_directories(out.dir);
      file_.open(out.dir / (name + "_log.jsonl"), std::ios::trunc);
      if (!file_) throw std::runtime_error("cannot write training log in " + out.dir.string());
    }
  }
  void write(const StepRecord& r) {
    if (file_.is_open()) file_ << step_json(r).dump() << '\n';
    if (out_.on_step) out_.on_step(r);
  }

 private:
  const PhaseOutput& out_;
  std::ofstream file_;
};

}  // namespace

PhaseResult train_landmark_phase(MultiTaskModel& model, PatchDiscriminator& disc, const Dataset& data,
                                 const TrainConfig& config, const PhaseOutput& out) {
  config.validate();
  auto pool = landmark_indices(data, Split::Train);
  if (pool.empty()) throw std::invalid_argument("landmark phase: no landmark frames in the train split");
  prepare_determinism(config);

  const auto& mcfg = model->config();
  const bool regularizers = mcfg.use_regularizers;

  std::vector<torch::Tensor> base_params = model->parameters_in(Partition::Shared);
  for (auto& p : model->parameters_in(Partition::Landmark)) base_params.push_back(p);
  std::unique_ptr<torch::optim::Optimizer> base_opt;
  if (config.base_optimizer == "sgd") {
    base_opt = std::make_unique<torch::optim::SGD>(
        base_params, torch::optim::SGDOptions(config.base_lr).momentum(config.base_momentum));
  } else {
    base_opt = std::make_unique<torch::optim::Adam>(base_params, torch::optim::AdamOptions(config.base_lr));
  }
  torch::optim::Adam disc_opt(
      disc->parameters(),
      torch::optim::AdamOptions(config.adversary_lr).betas({config.adversary_beta1, config.adversary_beta2}));

  model->train(false);
  set_training(model->modules_in(Partition::Shared), true);
  set_training(model->modules_in(Partition::Landmark), true);
  disc->train(true);

  PhaseResult result;
  StepLog log(out, "landmarks");
  EpochCheckpoints ckpt{out.dir, "landmarks", std::numeric_limits<double>::infinity(), &result};
  std::mt19937_64 rng(config.seed ^ 0x5EEDULL);
  const auto t0 = std::chrono::steady_clock::now();
  int step = 0;
  for (int epoch = 0; epoch < config.landmark_epochs; ++epoch) {
    const bool regularize = regularizers && epoch >= config.regularizer_warmup_epochs;
    // Losses before and after the warmup are not comparable.
    if (regularizers && epoch == config.regularizer_warmup_epochs) ckpt.best = std::numeric_limits<double>::infinity();
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (const auto& idx : epoch_batches(pool, config.landmark_batch, rng)) {
      auto batch = make_batch(data, idx);
      auto truth = render_batch_heatmaps(data, idx, mcfg.sigma);
      auto pred = model->detect_landmarks(batch.images);

      auto l2 = selective_l2(pred, truth, batch.selection).to(torch::kFloat64);
      auto zero = torch::zeros({}, torch::kFloat64);
      torch::Tensor coord = zero;
      torch::Tensor adv = zero;
      torch::Tensor fake_in;
      auto keep = batch.selection.to(pred.scalar_type()).unsqueeze(-1).unsqueeze(-1);
      if (regularize) {
        coord = coordinate_loss(pred, batch.coords, batch.selection, config.threshold).to(torch::kFloat64);
        fake_in = pred * keep;
        adv = adversarial_generator_loss(disc->forward(batch.images, fake_in)).to(torch::kFloat64);
      }
      auto total = combined_landmark_loss(l2, coord, adv, config.weights);
      check_finite(total, "landmark", step);

      base_opt->zero_grad();
      disc_opt.zero_grad();
      total.backward();
      base_opt->step();

      StepRecord rec;
      rec.phase = "landmarks";
      rec.step = step++;
      rec.epoch = epoch;
      rec.l2 = l2.item<double>();
      rec.coord = coord.item<double>();
      rec.adv = adv.item<double>();
      rec.combined = total.item<double>();
      rec.lr = config.base_lr;

      if (regularize) {
        disc_opt.zero_grad();
        auto real = disc->forward(batch.images, truth * keep);
        auto fake = disc->forward(batch.images, fake_in.detach());
        auto d_loss = discriminator_loss(real, fake);
        check_finite(d_loss, "discriminator", step);
        d_loss.backward();
        disc_opt.step();
        rec.discriminator = d_loss.item<double>();
      }
      rec.timestamp = seconds_since(t0);
      log.write(rec);
      result.steps.push_back(rec);
      epoch_sum += rec.combined;
      ++epoch_steps;
    }
    const double mean = epoch_sum / std::max(1, epoch_steps);
    result.epoch_mean_loss.push_back(mean);
    ckpt.save(model, &disc, epoch, mean, config);
    if (out.on_epoch) out.on_epoch(epoch, mean);
  }
  model->eval();
  disc->eval();
  return result;
}

PhaseResult train_view_phase(MultiTaskModel& model, const Dataset& data, const TrainConfig& config,
                             const PhaseOutput& out) {
  config.validate();
  auto pool = data.manifest.indices(Split::Train);
  if (pool.empty()) throw std::invalid_argument("view phase: empty train split");
  prepare_determinism(config);

  // Stem and shared stages are locked; the landmark branch is never run.
  for (auto p : {Partition::Shared, Partition::Landmark}) {
    for (auto& t : model->parameters_in(p)) t.set_requires_grad(false);
  }
  auto cls_params = model->parameters_in(Partition::Classification);
  torch::optim::Adam opt(cls_params,
                         torch::optim::AdamOptions(config.view_lr).betas({config.view_beta1, config.view_beta2}));

  model->eval();
  set_training(model->modules_in(Partition::Classification), true);

  PhaseResult result;
  StepLog log(out, "views");
  EpochCheckpoints ckpt{out.dir, "views", std::numeric_limits<double>::infinity(), &result};
  std::mt19937_64 rng(config.seed ^ 0x71E3ULL);
  const auto t0 = std::chrono::steady_clock::now();
  int step = 0;
  for (int epoch = 0; epoch < config.view_epochs; ++epoch) {
    double epoch_sum = 0.0;
    int epoch_steps = 0;
    for (const auto& idx : epoch_batches(pool, config.view_batch, rng)) {
      auto batch = make_batch(data, idx);
      SharedFeatures features;
      {
        torch::NoGradGuard no_grad;
        features = model->shared(batch.masked_images);
      }
      auto loss = cross_entropy_view_logits(model->classify_from(features), batch.views);
      check_finite(loss, "view", step);
      opt.zero_grad();
      loss.backward();
      opt.step();

      StepRecord rec;
      rec.phase = "views";
      rec.step = step++;
      rec.epoch = epoch;
      rec.cross_entropy = loss.item<double>();
      rec.lr = config.view_lr;
      rec.timestamp = seconds_since(t0);
      log.write(rec);
      result.steps.push_back(rec);
      epoch_sum += rec.cross_entropy;
      ++epoch_steps;
    }
    const double mean = epoch_sum / std::max(1, epoch_steps);
    result.epoch_mean_loss.push_back(mean);
    ckpt.save(model, nullptr, epoch, mean, config);
    if (out.on_epoch) out.on_epoch(epoch, mean);
  }

  for (auto p : {Partition::Shared, Partition::Landmark}) {
    for (auto& t : model->parameters_in(p)) t.set_requires_grad(true);
  }
  model->eval();
  return result;
}

PhaseResult train_view_phase(const std::filesystem::path& phase1_checkpoint, const Dataset& data,
                             const TrainConfig& config, MultiTaskModel& model_out, const PhaseOutput& out) {
  if (!std::filesystem::exists(phase1_checkpoint)) {
    throw std::runtime_error("view phase: landmark checkpoint " + phase1_checkpoint.string() + " not found");
  }
  auto ck = load_checkpoint(phase1_checkpoint);
  model_out = ck.model;
  return train_view_phase(model_out, data, config, out);
}

}  // namespace usmtl
