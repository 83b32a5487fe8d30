#include "usmtl/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "usmtl/evaluation.hpp"
#include "usmtl/synthetic_data.hpp"

namespace usmtl {
namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

void validate_run_config(const RunConfig& c) {
  try {
    c.model.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

DatasetOptions checked_preset(std::string_view name) {
  try {
    return dataset_preset(name);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

nlohmann::ordered_json digests(const fs::path& dir, const std::vector<std::string>& names) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& n : names) {
    if (fs::exists(dir / n)) j[n] = file_sha256(dir / n);
  }
  return j;
}

nlohmann::ordered_json argv_json(int argc, const char* const* argv) {
  auto j = nlohmann::ordered_json::array();
  for (int i = 0; i < argc; ++i) j.push_back(argv[i]);
  return j;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw UsageError("--split must be train, test or all");
}

Dataset load_checked_dataset(const fs::path& manifest) {
  if (!fs::exists(manifest)) throw std::runtime_error("manifest " + manifest.string() + " not found");
  auto ds = load_dataset(manifest);
  if (ds.frames.empty()) throw std::runtime_error("manifest " + manifest.string() + " lists no frames");
  const auto rows = ds.frames.front().image.rows;
  const auto cols = ds.frames.front().image.cols;
  for (const auto& f : ds.frames) {
    if (f.image.rows != rows || f.image.cols != cols) throw std::runtime_error("frames differ in size");
  }
  if (rows % 32 != 0 || cols % 32 != 0) throw std::runtime_error("frame size must be a multiple of 32");
  return ds;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  fs::path out;
  std::string preset = "desk";
  int per_view = 0;
  int per_task = 0;
  int patients = 0;
  double spleen_trans = -1.0;
  double split = 0.8;
  std::uint64_t seed = 0;
  int size = 0;
  double spacing = 0.0;
  std::vector<int> frames_per_patient;
  bool force = false;
};

int cmd_gen_data(const GenDataArgs& a, int argc, const char* const* argv, std::ostream& out) {
  auto d = checked_preset(a.preset);
  const int modes = (a.per_view > 0) + (a.per_task > 0) + (a.patients > 0);
  if (modes > 1) throw UsageError("choose one of --per-view, --per-task, --patients");
  if (!(a.split > 0.0 && a.split < 1.0)) throw UsageError("--split must lie in (0, 1)");
  if (a.spleen_trans >= 0.0 && !(a.spleen_trans > 0.0 && a.spleen_trans < 1.0)) {
    throw UsageError("--spleen-trans-fraction must lie in (0, 1)");
  }
  if (a.size < 0 || a.size % 32 != 0) throw UsageError("--size must be a positive multiple of 32");
  if (a.spacing < 0.0) throw UsageError("--spacing must be positive");

  d.seed = a.seed;
  d.train_fraction = a.split;
  if (a.size > 0) d.target_size = a.size;
  if (a.spacing > 0.0) d.target_spacing = a.spacing;
  if (!a.frames_per_patient.empty()) {
    if (a.frames_per_patient.size() != 2 || a.frames_per_patient[0] < 1 ||
        a.frames_per_patient[1] < a.frames_per_patient[0]) {
      throw UsageError("--frames-per-patient takes MIN MAX with 1 <= MIN <= MAX");
    }
    d.min_frames_per_patient = a.frames_per_patient[0];
    d.max_frames_per_patient = a.frames_per_patient[1];
  }
  if (a.per_view > 0) {
    d.view_counts = a.spleen_trans > 0 ? counts_with_spleen_trans_fraction(a.per_view, a.spleen_trans)
                                       : counts_per_view(a.per_view);
  } else if (a.per_task > 0) {
    if (a.spleen_trans > 0) throw UsageError("--spleen-trans-fraction needs --per-view or --patients");
    d.view_counts = counts_per_task(a.per_task);
  } else {
    d.patients = a.patients > 0 ? a.patients : 200;
    d.spleen_trans_fraction = a.spleen_trans;
  }
  if (fs::exists(a.out / "manifest.tsv") && !a.force) {
    throw UsageError(a.out.string() + " already holds a dataset (pass --force to overwrite)");
  }

  Dataset ds;
  try {
    ds = build_dataset(d);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  save_dataset(ds, a.out);

  nlohmann::ordered_json run;
  run["command"] = "gen-data";
  run["argv"] = argv_json(argc, argv);
  run["options"] = {{"preset", a.preset},
                    {"seed", d.seed},
                    {"train_fraction", d.train_fraction},
                    {"target_size", d.target_size},
                    {"target_spacing_mm", d.target_spacing},
                    {"patients", d.patients},
                    {"view_counts", d.view_counts},
                    {"spleen_trans_fraction", d.spleen_trans_fraction},
                    {"frames_per_patient", {d.min_frames_per_patient, d.max_frames_per_patient}}};
  run["frames"] = ds.frames.size();
  run["train_frames"] = ds.manifest.indices(Split::Train).size();
  run["test_frames"] = ds.manifest.indices(Split::Test).size();
  run["digests"] = digests(a.out, {"manifest.tsv"});
  write_text(a.out / "run.json", run.dump(2) + "\n");
  out << "wrote " << ds.frames.size() << " frames (" << run["train_frames"] << " train, " << run["test_frames"]
      << " test) to " << (a.out / "manifest.tsv").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  fs::path data;
  fs::path out;
  std::string profile = "desk";
  std::string ablation;
  std::string phase = "both";
  fs::path config_file;
  std::vector<std::string> settings;
  fs::path init;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a, int argc, const char* const* argv, std::ostream& out) {
  auto cfg = default_run_config(a.profile);
  if (!a.config_file.empty()) {
    if (!fs::exists(a.config_file)) throw UsageError("config file " + a.config_file.string() + " not found");
    apply_config_text(cfg, read_text(a.config_file));
  }
  for (const auto& s : a.settings) apply_setting(cfg, s);
  if (!a.ablation.empty()) {
    try {
      cfg.model.apply_ablation(parse_ablation(a.ablation));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (a.seed) cfg.train.seed = *a.seed;
  validate_run_config(cfg);
  if (a.phase != "landmarks" && a.phase != "views" && a.phase != "both") {
    throw UsageError("--phase must be landmarks, views or both");
  }
  if (a.phase == "views" && a.init.empty()) throw UsageError("--phase views needs --init <landmark checkpoint>");

  auto ds = load_checked_dataset(a.data);
  const auto size = ds.frames.front().image.rows;
  const auto spacing = ds.frames.front().spacing;

  prepare_determinism(cfg.train);
  MultiTaskModel model{nullptr};
  PatchDiscriminator disc{nullptr};
  if (!a.init.empty()) {
    if (!fs::exists(a.init)) throw std::runtime_error("checkpoint " + a.init.string() + " not found");
    auto ck = load_checkpoint(a.init);
    try {
      check_config_match(cfg.model, ck.config);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    model = ck.model;
    disc = ck.discriminator;
  } else {
    model = build_model(cfg.model);
  }
  if (!disc) disc = PatchDiscriminator(cfg.model.width, cfg.model.num_landmarks);

  fs::create_directories(a.out);
  PhaseOutput po;
  po.dir = a.out;
  nlohmann::ordered_json summary;
  if (a.phase != "views") {
    auto r = train_landmark_phase(model, disc, ds, cfg.train, po);
    summary["landmark_epoch_loss"] = r.epoch_mean_loss;
    out << "landmark phase: " << r.steps.size() << " steps";
    if (!r.epoch_mean_loss.empty()) out << ", final epoch loss " << r.epoch_mean_loss.back();
    out << "\n";
  }
  if (a.phase != "landmarks") {
    auto r = train_view_phase(model, ds, cfg.train, po);
    summary["view_epoch_loss"] = r.epoch_mean_loss;
    out << "view phase: " << r.steps.size() << " steps";
    if (!r.epoch_mean_loss.empty()) out << ", final epoch loss " << r.epoch_mean_loss.back();
    out << "\n";
  }

  nlohmann::json meta = {{"input", {{"size", size}, {"spacing", spacing}}},
                         {"ablation", ablation_name(cfg.model.ablation())},
                         {"phase", a.phase},
                         {"train", cfg.train}};
  save_checkpoint(a.out / "model.ckpt", model, &disc, meta);

  nlohmann::ordered_json run;
  run["command"] = "train";
  run["argv"] = argv_json(argc, argv);
  run["config"] = run_config_json(cfg);
  run["phase"] = a.phase;
  run["data"] = {{"manifest", a.data.string()}, {"sha256", file_sha256(a.data)}};
  if (!a.init.empty()) run["init"] = {{"path", a.init.string()}, {"sha256", file_sha256(a.init)}};
  run["summary"] = summary;
  run["digests"] = digests(a.out, {"model.ckpt", "landmarks_last.ckpt", "landmarks_best.ckpt", "views_last.ckpt",
                                   "views_best.ckpt", "landmarks_log.jsonl", "views_log.jsonl"});
  write_text(a.out / "run.json", run.dump(2) + "\n");
  out << "model written to " << (a.out / "model.ckpt").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  fs::path model;
  fs::path data;
  std::string split = "test";
  std::string format = "json";
  fs::path output;
  std::optional<double> threshold;
  std::string method;
};

int cmd_eval(const EvalArgs& a, int argc, const char* const* argv, std::ostream& out) {
  if (a.format != "json" && a.format != "table") throw UsageError("--format must be json or table");
  if (a.split != "all") (void)parse_split(a.split);
  if (a.threshold && !(*a.threshold >= 0.0 && *a.threshold < 1.0)) throw UsageError("--threshold must lie in [0, 1)");
  if (!fs::exists(a.model)) throw std::runtime_error("checkpoint " + a.model.string() + " not found");

  auto ck = load_checkpoint(a.model);
  auto ds = load_checked_dataset(a.data);
  EvalOptions opts;
  opts.threshold = a.threshold.value_or(ck.config.threshold);
  std::vector<std::size_t> idx;
  if (a.split == "all") {
    idx.resize(ds.frames.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  } else {
    idx = ds.manifest.indices(parse_split(a.split));
  }
  if (idx.empty()) throw std::runtime_error("split '" + a.split + "' has no frames");
  auto report = evaluate(ck.model, ds, idx, a.split, opts);
  const auto method = a.method.empty() ? std::string(ablation_name(ck.config.ablation())) : a.method;
  const auto text = a.format == "json" ? report_json(report).dump(2) + "\n" : report_table(report, method);

  if (a.output.empty()) {
    out << text;
    return kExitOk;
  }
  if (a.output.has_parent_path()) fs::create_directories(a.output.parent_path());
  write_text(a.output, text);
  nlohmann::ordered_json run;
  run["command"] = "eval";
  run["argv"] = argv_json(argc, argv);
  run["model"] = {{"path", a.model.string()},
                  {"sha256", file_sha256(a.model)},
                  {"config", nlohmann::ordered_json::parse(nlohmann::json(ck.config).dump())}};
  run["data"] = {{"manifest", a.data.string()}, {"sha256", file_sha256(a.data)}};
  run["split"] = a.split;
  run["threshold"] = opts.threshold;
  run["report_sha256"] = file_sha256(a.output);
  write_text(fs::path(a.output.string() + ".run.json"), run.dump(2) + "\n");
  out << "report written to " << a.output.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  fs::path model;
  std::vector<fs::path> images;
  std::optional<double> spacing;
  std::vector<int> icon;
  fs::path dump_heatmaps;
  std::optional<double> threshold;
};

int cmd_infer(const InferArgs& a, std::ostream& out) {
  if (a.spacing && !(*a.spacing > 0.0)) throw UsageError("--spacing must be positive");
  if (!a.icon.empty() && (a.icon.size() != 4 || a.icon[2] <= 0 || a.icon[3] <= 0)) {
    throw UsageError("--icon takes ROW COL ROWS COLS");
  }
  if (a.threshold && !(*a.threshold >= 0.0 && *a.threshold < 1.0)) throw UsageError("--threshold must lie in [0, 1)");
  if (!fs::exists(a.model)) throw std::runtime_error("checkpoint " + a.model.string() + " not found");
  for (const auto& img : a.images) {
    if (!fs::exists(img)) throw std::runtime_error("image " + img.string() + " not found");
  }

  auto ck = load_checkpoint(a.model);
  if (!ck.meta.contains("input")) throw std::runtime_error("checkpoint lacks input geometry metadata");
  const int size = ck.meta["input"].at("size").get<int>();
  const double target_spacing = ck.meta["input"].at("spacing").get<double>();
  const double threshold = a.threshold.value_or(ck.config.threshold);
  if (!a.dump_heatmaps.empty()) fs::create_directories(a.dump_heatmaps);

  auto& model = ck.model;
  model->eval();
  torch::NoGradGuard no_grad;
  for (const auto& path : a.images) {
    const auto t0 = std::chrono::steady_clock::now();
    UltrasoundFrame raw;
    raw.image = read_pgm16(path);
    raw.spacing = a.spacing.value_or(target_spacing);
    if (!a.icon.empty()) raw.icon = IconRegion{a.icon[0], a.icon[1], a.icon[2], a.icon[3]};
    const auto map = preprocess_map(raw.image.rows, raw.image.cols, raw.spacing, target_spacing, size);
    auto frame = mask_icon(preprocess(raw, target_spacing, size));
    auto x = torch::from_blob(frame.image.pixels.data(), {1, 1, size, size}, torch::kFloat32).clone();
    auto res = model->forward_all(x);
    auto probs = torch::softmax(res.logits[0], 0);
    const int view = static_cast<int>(probs.argmax().item<int64_t>());

    nlohmann::ordered_json j;
    j["image"] = path.string();
    j["view"] = kViewNames[view];
    nlohmann::ordered_json pj;
    for (int v = 0; v < kNumViews; ++v) pj[std::string(kViewNames[v])] = probs[v].item<double>();
    j["probabilities"] = pj;
    auto task = task_for_view(static_cast<View>(view));
    j["task"] = task ? nlohmann::ordered_json(task_name(*task)) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json lms = nlohmann::ordered_json::array();
    nlohmann::ordered_json ms = nlohmann::ordered_json::object();
    if (task) {
      const auto& spec = task_spec(*task);
      auto est = soft_argmax(res.heatmaps[0].to(torch::kFloat64), threshold);
      std::array<LandmarkPoint, kNumLandmarks> pts{};
      for (int c = spec.first_channel; c < spec.first_channel + spec.num_channels; ++c) {
        pts[c] = {est.coords[c][0].item<double>(), est.coords[c][1].item<double>()};
        const auto native = map.inverse(pts[c]);
        lms.push_back({{"channel", c},
                       {"s", native.s},
                       {"t", native.t},
                       {"fallback", est.fallback[c].item<bool>()}});
      }
      for (const auto& p : spec.pairs()) {
        ms[std::string(kMeasurementNames[p.measurement])] = measurement_from_pair(pts[p.first], pts[p.second],
                                                                                  target_spacing);
      }
    }
    j["landmarks"] = lms;
    j["measurements_mm"] = ms;
    if (!a.dump_heatmaps.empty()) {
      auto maps = res.heatmaps[0].contiguous();
      for (int c = 0; c < kNumLandmarks; ++c) {
        Image img(size, size);
        auto ch = maps[c].contiguous();
        std::copy_n(ch.data_ptr<float>(), img.pixels.size(), img.pixels.begin());
        char name[32];
        std::snprintf(name, sizeof(name), "_ch%02d.pgm", c);
        write_pgm16(img, a.dump_heatmaps / (path.stem().string() + name));
      }
    }
    j["time_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out << j.dump() << "\n";
  }
  return kExitOk;
}

}  // namespace

RunConfig default_run_config(std::string_view profile) {
  RunConfig c;
  try {
    c.train = TrainConfig::for_profile(profile);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (profile == "desk") {
    c.model.width = 0.25;
    c.model.gcn_kernel = 3;
  }
  return c;
}

void apply_setting(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw UsageError("expected key = value, got '" + std::string(assignment) + "'");
  const auto key = trim(assignment.substr(0, eq));
  const auto value_text = trim(assignment.substr(eq + 1));
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw UsageError("setting '" + key + "' needs a section (model. or train.)");
  const auto section = key.substr(0, dot);
  const auto field = key.substr(dot + 1);
  if (section != "model" && section != "train") throw UsageError("unknown section '" + section + "'");

  nlohmann::json doc = section == "model" ? nlohmann::json(config.model) : nlohmann::json(config.train);
  if (!doc.contains(field)) throw UsageError("unknown setting '" + key + "'");
  auto value = nlohmann::json::parse(value_text, nullptr, false);
  if (value.is_discarded()) value = value_text;

  const auto& current = doc[field];
  const bool ok = (current.is_number_integer() && value.is_number_integer()) ||
                  (current.is_number_float() && value.is_number()) ||
                  (current.is_boolean() && value.is_boolean()) || (current.is_string() && value.is_string()) ||
                  (current.is_array() && value.is_array() && value.size() == current.size());
  if (!ok) throw UsageError("setting '" + key + "' has the wrong type: " + value_text);
  if (current.is_number_integer() && value.is_number_integer() && current.is_number_unsigned() &&
      value.get<std::int64_t>() < 0) {
    throw UsageError("setting '" + key + "' must be non-negative");
  }
  doc[field] = value;
  try {
    if (section == "model") {
      config.model = doc.get<ModelConfig>();
    } else {
      config.train = doc.get<TrainConfig>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("setting '" + key + "': " + e.what());
  }
}

void apply_config_text(RunConfig& config, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      apply_setting(config, line);
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
}

nlohmann::ordered_json run_config_json(const RunConfig& config) {
  nlohmann::ordered_json j;
  j["model"] = nlohmann::json(config.model);
  j["train"] = nlohmann::json(config.train);
  return j;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task ultrasound view classification and landmark measurement"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "synthesise a phantom dataset with a patient-disjoint split");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--preset", gen.preset, "desk (96 px) or faithful (512 px at 0.5 mm)");
  g->add_option("--per-view", gen.per_view, "frames per view");
  g->add_option("--per-task", gen.per_task, "frames per landmark task, no unlabelled views");
  g->add_option("--patients", gen.patients, "synthetic patients with 5-20 random frames each (default 200)");
  g->add_option("--spleen-trans-fraction", gen.spleen_trans, "share of landmark frames that are spleen_trans");
  g->add_option("--split", gen.split, "train fraction of patients");
  g->add_option("--seed", gen.seed);
  g->add_option("--size", gen.size, "network input size in px");
  g->add_option("--spacing", gen.spacing, "network input spacing in mm/px");
  g->add_option("--frames-per-patient", gen.frames_per_patient, "MIN MAX")->expected(2);
  g->add_flag("--force", gen.force, "overwrite an existing dataset");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the landmark phase, the view phase, or both");
  t->add_option("--data", tr.data, "dataset manifest.tsv")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--profile", tr.profile, "desk or faithful");
  t->add_option("--ablation", tr.ablation, "mfcn, mgcn or mgcn_r");
  t->add_option("--phase", tr.phase, "landmarks, views or both");
  t->add_option("--config", tr.config_file, "file of section.key = value lines");
  t->add_option("--set", tr.settings, "section.key=value override");
  t->add_option("--init", tr.init, "checkpoint to start from");
  t->add_option("--seed", tr.seed);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  e->add_option("--model", ev.model, "checkpoint")->required();
  e->add_option("--data", ev.data, "dataset manifest.tsv")->required();
  e->add_option("--split", ev.split, "train, test or all");
  e->add_option("--format", ev.format, "json or table");
  e->add_option("--output", ev.output, "write the report here instead of stdout");
  e->add_option("--threshold", ev.threshold, "soft-argmax threshold");
  e->add_option("--method", ev.method, "row label for --format table");

  InferArgs in;
  auto* i = app.add_subcommand("infer", "classify frames and measure their organ");
  i->add_option("--model", in.model, "checkpoint")->required();
  i->add_option("images", in.images, "16-bit PGM frames")->required();
  i->add_option("--spacing", in.spacing, "native mm/px of the frames");
  i->add_option("--icon", in.icon, "ROW COL ROWS COLS of the body-marker icon to blank")->expected(4);
  i->add_option("--dump-heatmaps", in.dump_heatmaps, "directory for per-channel heatmap PGMs");
  i->add_option("--threshold", in.threshold, "soft-argmax threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, argc, argv, out);
    if (t->parsed()) return cmd_train(tr, argc, argv, out);
    if (e->parsed()) return cmd_eval(ev, argc, argv, out);
    return cmd_infer(in, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& ex) {
    err << "numeric failure: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  }
}

}  // namespace usmtl
