#include "usmtl/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace usmtl {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

enum class Organ { LiverRight, LiverLeft, KidneyRight, KidneyLeft, Spleen };

struct OrganStyle {
  double interior;
  double rim;
  double sinus;  // 0 = no inner echogenic core
  std::array<double, 2> long_axes;   // semi-major, semi-minor (mm)
  std::array<double, 2> trans_axes;
  double lateral_mm;                 // centre column within the field
};

OrganStyle style_of(Organ organ) {
  switch (organ) {
    case Organ::LiverRight:
      return {0.45, 0.80, 0.0, {72, 42}, {62, 46}, 92};
    case Organ::LiverLeft:
      return {0.45, 0.80, 0.0, {48, 32}, {44, 30}, 128};
    case Organ::KidneyRight:
      return {0.20, 0.85, 0.85, {52, 25}, {34, 26}, 92};
    case Organ::KidneyLeft:
      return {0.20, 0.85, 0.85, {52, 25}, {34, 26}, 148};
    case Organ::Spleen:
      return {0.70, 0.95, 0.0, {50, 20}, {36, 22}, 148};
  }
  return {};
}

Organ organ_of(View v) {
  switch (v) {
    case View::LiverRightLong:
    case View::LiverRightTrans:
      return Organ::LiverRight;
    case View::LiverLeftLong:
    case View::LiverLeftTrans:
      return Organ::LiverLeft;
    case View::KidneyRightLong:
    case View::KidneyRightTrans:
      return Organ::KidneyRight;
    case View::KidneyLeftLong:
    case View::KidneyLeftTrans:
      return Organ::KidneyLeft;
    default:
      return Organ::Spleen;
  }
}

// Sector-shaped insonified field with apex above the top edge; returns a
// depth-attenuated background level, or a negative value outside the fan.
double fan_background(double s, double t, int rows, int cols) {
  const double apex_s = -0.08 * rows;
  const double apex_t = 0.5 * cols;
  const double ds = s - apex_s;
  const double dt = t - apex_t;
  const double r = std::hypot(ds, dt);
  const double angle = std::atan2(dt, ds);
  if (std::abs(angle) > 42.0 * kDeg || r < 0.12 * rows || r > 1.06 * rows) return -1.0;
  return 0.32 * (1.0 - 0.35 * r / rows);
}

void burn_icon(Image& img, View view, const IconRegion& icon) {
  // Frame plus four vertical bars encoding (view + 1) in binary.
  const int code = index(view) + 1;
  for (int r = icon.row; r < icon.row + icon.rows; ++r) {
    for (int c = icon.col; c < icon.col + icon.cols; ++c) {
      const int lr = r - icon.row;
      const int lc = c - icon.col;
      const bool border = lr == 0 || lc == 0 || lr == icon.rows - 1 || lc == icon.cols - 1;
      const int bar = std::min(3, lc * 4 / std::max(1, icon.cols));
      const bool on = ((code >> bar) & 1) != 0 && lr > icon.rows / 5 && lr < icon.rows - icon.rows / 5;
      img.at(r, c) = border || on ? 1.0F : 0.0F;
    }
  }
}

float quantize16(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::round(c * 65535.0) / 65535.0);
}

}  // namespace

UltrasoundFrame generate_phantom(View view, std::uint64_t seed, const PhantomOptions& options) {
  std::mt19937_64 rng(splitmix64(seed ^ (0xA5A5ULL + static_cast<std::uint64_t>(index(view)) * 0x10001ULL)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  UltrasoundFrame frame;
  frame.view = view;
  frame.spacing = uniform(options.min_spacing, options.max_spacing);
  const int n = std::max(32, static_cast<int>(std::lround(options.field_mm / frame.spacing)));
  frame.image = Image(n, n);
  const double mm = 1.0 / frame.spacing;  // px per mm

  // Anatomy (in pixels).
  struct Blob {
    int kind;  // 0 rectangle, 1 triangle
    double s0, t0, s1, t1, level;
  };
  std::vector<Blob> distractors;
  OrganStyle style{};
  OrganEllipse organ;
  const bool has_organ = view != View::Others;
  if (has_organ) {
    style = style_of(organ_of(view));
    const bool longv = is_long_view(view);
    const auto& axes = longv ? style.long_axes : style.trans_axes;
    organ.semi_major = axes[0] * uniform(0.9, 1.1) * mm;
    organ.semi_minor = axes[1] * uniform(0.9, 1.1) * mm;
    organ.angle = (longv ? 0.0 : 90.0 * kDeg) + uniform(-30.0, 30.0) * kDeg;
    organ.center = {uniform(100.0, 125.0) * mm, (style.lateral_mm + uniform(-10.0, 10.0)) * mm};
    frame.organ = organ;
  } else {
    const int count = 1 + static_cast<int>(unit(rng) * 3.0);
    for (int i = 0; i < count; ++i) {
      const double s0 = uniform(40, 150) * mm;
      const double t0 = uniform(50, 150) * mm;
      distractors.push_back({static_cast<int>(unit(rng) * 2.0), s0, t0, s0 + uniform(25, 70) * mm,
                             t0 + uniform(25, 70) * mm, uniform(0.1, 0.9)});
    }
  }

  const double cu = std::cos(organ.angle);
  const double su = std::sin(organ.angle);
  const double rim_px = 2.0 * mm;
  std::uniform_real_distribution<double> speckle(0.35, 1.65);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double level = fan_background(r, c, n, n);
      if (level < 0) continue;
      if (has_organ) {
        const double ds = r - organ.center.s;
        const double dt = c - organ.center.t;
        const double along = ds * cu + dt * su;
        const double across = -ds * su + dt * cu;
        const double rho = std::hypot(along / organ.semi_major, across / organ.semi_minor);
        if (rho < 1.0 + rim_px / organ.semi_minor) {
          if (std::abs(rho - 1.0) * organ.semi_minor < rim_px) {
            level = style.rim;
          } else if (style.sinus > 0 && rho < 0.45) {
            level = style.sinus;
          } else if (rho < 1.0) {
            level = style.interior;
          }
        }
      } else {
        for (const auto& b : distractors) {
          if (r < b.s0 || r >= b.s1 || c < b.t0 || c >= b.t1) continue;
          const bool inside = b.kind == 0 || (c - b.t0) * (b.s1 - b.s0) <= (r - b.s0) * (b.t1 - b.t0);
          if (inside) level = b.level;
        }
      }
      frame.image.at(r, c) = quantize16(level * speckle(rng));
    }
  }

  // Landmarks: long-axis endpoints ordered along +u, short-axis along +v.
  if (auto task = task_for_view(view)) {
    const auto& spec = task_spec(*task);
    const LandmarkPoint u{cu, su};
    const LandmarkPoint v{su, -cu};
    auto at = [&](const LandmarkPoint& dir, double k) {
      return LandmarkPoint{organ.center.s + k * dir.s, organ.center.t + k * dir.t};
    };
    frame.landmarks.push_back({spec.first_channel, at(u, -organ.semi_major)});
    frame.landmarks.push_back({spec.first_channel + 1, at(u, organ.semi_major)});
    if (spec.num_channels == 4) {
      frame.landmarks.push_back({spec.first_channel + 2, at(v, -organ.semi_minor)});
      frame.landmarks.push_back({spec.first_channel + 3, at(v, organ.semi_minor)});
    }
  }

  const int icon_px = std::max(4, static_cast<int>(std::lround(options.icon_mm * mm)));
  const int margin = std::max(1, static_cast<int>(std::lround(2.0 * mm)));
  IconRegion icon{margin, margin, icon_px, icon_px};
  burn_icon(frame.image, view, icon);
  frame.icon = icon;
  return frame;
}

AffineMap preprocess_map(int rows, int cols, double spacing, double target_spacing, int target_size) {
  if (!(spacing > 0.0) || !(target_spacing > 0.0)) throw std::invalid_argument("preprocess: spacing must be positive");
  if (target_size <= 0) throw std::invalid_argument("preprocess: target size must be positive");
  const double scale = spacing / target_spacing;
  const auto content_rows = static_cast<int>(std::lround(rows * scale));
  const auto content_cols = static_cast<int>(std::lround(cols * scale));
  auto pad = [&](int content) { return std::floor((target_size - content) / 2.0); };
  return {scale, pad(content_rows), pad(content_cols)};
}

UltrasoundFrame preprocess(const UltrasoundFrame& frame, double target_spacing, int target_size) {
  const auto map = preprocess_map(frame.image.rows, frame.image.cols, frame.spacing, target_spacing, target_size);
  const int content_rows = static_cast<int>(std::lround(frame.image.rows * map.scale));
  const int content_cols = static_cast<int>(std::lround(frame.image.cols * map.scale));

  UltrasoundFrame out = frame;
  out.image = Image(target_size, target_size);
  out.spacing = target_spacing;
  out.cropped = content_rows > target_size || content_cols > target_size;

  const auto& src = frame.image;
  const int r0 = std::max(0, static_cast<int>(map.offset_s));
  const int r1 = std::min(target_size, static_cast<int>(map.offset_s) + content_rows);
  const int c0 = std::max(0, static_cast<int>(map.offset_t));
  const int c1 = std::min(target_size, static_cast<int>(map.offset_t) + content_cols);
  for (int r = r0; r < r1; ++r) {
    const double ss = std::clamp((r - map.offset_s) / map.scale, 0.0, src.rows - 1.0);
    const int sa = static_cast<int>(ss);
    const int sb = std::min(sa + 1, src.rows - 1);
    const double fs = ss - sa;
    for (int c = c0; c < c1; ++c) {
      const double tt = std::clamp((c - map.offset_t) / map.scale, 0.0, src.cols - 1.0);
      const int ta = static_cast<int>(tt);
      const int tb = std::min(ta + 1, src.cols - 1);
      const double ft = tt - ta;
      const double v = (1 - fs) * ((1 - ft) * src.at(sa, ta) + ft * src.at(sa, tb)) +
                       fs * ((1 - ft) * src.at(sb, ta) + ft * src.at(sb, tb));
      out.image.at(r, c) = quantize16(v);
    }
  }

  for (auto& lm : out.landmarks) lm.point = map.forward(lm.point);
  if (out.organ) {
    out.organ->center = map.forward(out.organ->center);
    out.organ->semi_major *= map.scale;
    out.organ->semi_minor *= map.scale;
  }
  if (out.icon) {
    const auto& ic = *frame.icon;
    const int top = std::max(0, static_cast<int>(std::floor(map.scale * ic.row + map.offset_s)));
    const int left = std::max(0, static_cast<int>(std::floor(map.scale * ic.col + map.offset_t)));
    const int bottom = std::min(target_size, static_cast<int>(std::ceil(map.scale * (ic.row + ic.rows) + map.offset_s)));
    const int right = std::min(target_size, static_cast<int>(std::ceil(map.scale * (ic.col + ic.cols) + map.offset_t)));
    out.icon = IconRegion{top, left, std::max(0, bottom - top), std::max(0, right - left)};
  }
  return out;
}

void mask_icon_in_place(Image& image, const std::optional<IconRegion>& icon) {
  if (!icon) return;
  for (int r = std::max(0, icon->row); r < std::min(image.rows, icon->row + icon->rows); ++r) {
    for (int c = std::max(0, icon->col); c < std::min(image.cols, icon->col + icon->cols); ++c) {
      image.at(r, c) = 0.0F;
    }
  }
}

Image icon_probe_image(View view, int size, const IconRegion& icon) {
  if (size <= 0 || icon.row < 0 || icon.col < 0 || icon.row + icon.rows > size || icon.col + icon.cols > size) {
    throw std::invalid_argument("icon_probe_image: icon does not fit the image");
  }
  Image img(size, size);
  burn_icon(img, view, icon);
  return img;
}

UltrasoundFrame mask_icon(const UltrasoundFrame& frame) {
  UltrasoundFrame out = frame;
  mask_icon_in_place(out.image, out.icon);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

std::string_view split_name(Split s) { return s == Split::Train ? "train" : "test"; }

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) out.push_back(i);
  }
  return out;
}

void DatasetManifest::check_patient_disjoint() const {
  std::map<std::string, Split> seen;
  for (const auto& r : records) {
    auto [it, inserted] = seen.emplace(r.patient_id, r.split);
    if (!inserted && it->second != r.split) {
      throw std::logic_error("patient " + r.patient_id + " appears in both splits");
    }
  }
}

DatasetOptions dataset_preset(std::string_view name) {
  DatasetOptions d;
  if (name == "desk") {
    d.target_size = 96;
    d.target_spacing = 256.0 / 96.0;
    d.phantom.field_mm = 256.0;
    d.phantom.min_spacing = 2.0;
    d.phantom.max_spacing = 3.0;
    return d;
  }
  if (name == "faithful") return d;
  throw std::invalid_argument("unknown preset '" + std::string(name) + "' (expected desk or faithful)");
}

std::array<int, kNumViews> counts_per_view(int per_view) {
  std::array<int, kNumViews> out{};
  out.fill(per_view);
  return out;
}

std::array<int, kNumViews> counts_per_task(int per_task) {
  std::array<int, kNumViews> out{};
  for (const auto& spec : kTaskSpecs) {
    std::vector<int> views;
    for (int v = 0; v < kNumViews; ++v) {
      if (task_for_view(static_cast<View>(v)) == spec.task) views.push_back(v);
    }
    for (std::size_t i = 0; i < views.size(); ++i) {
      out[views[i]] = per_task / static_cast<int>(views.size()) +
                      (static_cast<int>(i) < per_task % static_cast<int>(views.size()) ? 1 : 0);
    }
  }
  return out;
}

std::array<int, kNumViews> counts_with_spleen_trans_fraction(int per_view, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("spleen-trans fraction must lie in (0, 1)");
  auto out = counts_per_view(per_view);
  int others = 0;
  for (int v = 0; v < kNumViews; ++v) {
    if (task_for_view(static_cast<View>(v)) && static_cast<View>(v) != View::SpleenTrans) others += out[v];
  }
  out[index(View::SpleenTrans)] = std::max(1, static_cast<int>(std::lround(fraction / (1.0 - fraction) * others)));
  return out;
}

Dataset build_dataset(const DatasetOptions& options) {
  if (!(options.train_fraction > 0.0 && options.train_fraction < 1.0)) {
    throw std::invalid_argument("build_dataset: split fraction must lie in (0, 1)");
  }
  if (options.min_frames_per_patient < 1 || options.max_frames_per_patient < options.min_frames_per_patient) {
    throw std::invalid_argument("build_dataset: invalid frames-per-patient range");
  }
  std::mt19937_64 rng(splitmix64(options.seed));
  auto draw_size = [&] {
    return std::uniform_int_distribution<int>(options.min_frames_per_patient, options.max_frames_per_patient)(rng);
  };

  // Views grouped by patient.
  std::vector<std::vector<View>> patients;
  if (options.patients > 0) {
    std::array<double, kNumViews> weights{};
    weights.fill(1.0);
    if (options.spleen_trans_fraction >= 0.0) {
      const double f = options.spleen_trans_fraction;
      if (f >= 1.0) throw std::invalid_argument("build_dataset: spleen-trans fraction must be < 1");
      weights[index(View::SpleenTrans)] = 6.0 * f / (1.0 - f);
    }
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    for (int p = 0; p < options.patients; ++p) {
      std::vector<View> views(static_cast<std::size_t>(draw_size()));
      for (auto& v : views) v = static_cast<View>(pick(rng));
      patients.push_back(std::move(views));
    }
  } else {
    std::vector<View> all;
    for (int v = 0; v < kNumViews; ++v) {
      if (options.view_counts[v] < 0) throw std::invalid_argument("build_dataset: negative view count");
      all.insert(all.end(), static_cast<std::size_t>(options.view_counts[v]), static_cast<View>(v));
    }
    if (all.empty()) throw std::invalid_argument("build_dataset: frame count must be positive");
    std::shuffle(all.begin(), all.end(), rng);
    std::size_t pos = 0;
    while (pos < all.size()) {
      const auto n = std::min(static_cast<std::size_t>(draw_size()), all.size() - pos);
      patients.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(pos),
                            all.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
    }
    // Fold a short tail into the previous patient.
    if (patients.size() > 1 && static_cast<int>(patients.back().size()) < options.min_frames_per_patient) {
      auto tail = std::move(patients.back());
      patients.pop_back();
      patients.back().insert(patients.back().end(), tail.begin(), tail.end());
    }
  }
  if (patients.size() < 2) throw std::invalid_argument("build_dataset: need at least two patients");

  std::vector<std::size_t> order(patients.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  auto n_train = static_cast<std::size_t>(std::lround(options.train_fraction * static_cast<double>(patients.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, patients.size() - 1);
  std::vector<Split> split_of(patients.size(), Split::Test);
  for (std::size_t i = 0; i < n_train; ++i) split_of[order[i]] = Split::Train;

  Dataset ds;
  std::uint64_t frame_id = 0;
  for (std::size_t p = 0; p < patients.size(); ++p) {
    char pid[16];
    std::snprintf(pid, sizeof(pid), "P%04zu", p);
    for (View v : patients[p]) {
      const std::uint64_t seed = splitmix64(options.seed * 0x100000001B3ULL + frame_id);
      auto frame = preprocess(generate_phantom(v, seed, options.phantom), options.target_spacing,
                              options.target_size);
      frame.patient_id = pid;
      char name[40];
      std::snprintf(name, sizeof(name), "frames/f%06llu.pgm", static_cast<unsigned long long>(frame_id));
      ManifestRecord rec;
      rec.path = name;
      rec.patient_id = pid;
      rec.view = v;
      rec.task = task_for_view(v);
      rec.landmarks = frame.landmarks;
      rec.split = split_of[p];
      rec.spacing = frame.spacing;
      rec.icon = frame.icon;
      rec.seed = seed;
      ds.manifest.records.push_back(std::move(rec));
      ds.frames.push_back(std::move(frame));
      ++frame_id;
    }
  }
  ds.manifest.check_patient_disjoint();
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr std::string_view kManifestHeader =
    "# usmtl-manifest v1\tpath\tpatient\tview\ttask\tlandmarks\tsplit\tspacing_mm\ticon\tseed";

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string format_manifest(const DatasetManifest& manifest) {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  for (const auto& r : manifest.records) {
    out << r.path << '\t' << r.patient_id << '\t' << view_name(r.view) << '\t'
        << (r.task ? std::string(task_name(*r.task)) : "-") << '\t';
    if (r.landmarks.empty()) out << '-';
    for (std::size_t i = 0; i < r.landmarks.size(); ++i) {
      if (i) out << ';';
      out << r.landmarks[i].channel << ':' << fmt_double(r.landmarks[i].point.s) << ':'
          << fmt_double(r.landmarks[i].point.t);
    }
    out << '\t' << split_name(r.split) << '\t' << fmt_double(r.spacing) << '\t';
    if (r.icon) {
      out << r.icon->row << ',' << r.icon->col << ',' << r.icon->rows << ',' << r.icon->cols;
    } else {
      out << '-';
    }
    out << '\t' << r.seed << '\n';
  }
  return out.str();
}

DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto f = split_fields(line, '\t');
    auto fail = [&](const std::string& what) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": " + what);
    };
    if (f.size() != 9) fail("expected 9 tab-separated fields");
    ManifestRecord r;
    r.path = f[0];
    r.patient_id = f[1];
    auto view = parse_view(f[2]);
    if (!view) fail("unknown view '" + f[2] + "'");
    r.view = *view;
    if (f[3] != "-") {
      r.task = parse_task(f[3]);
      if (!r.task) fail("unknown task '" + f[3] + "'");
    }
    if (r.task != task_for_view(r.view)) fail("task does not match view");
    if (f[4] != "-") {
      for (const auto& item : split_fields(f[4], ';')) {
        auto parts = split_fields(item, ':');
        if (parts.size() != 3) fail("malformed landmark '" + item + "'");
        r.landmarks.push_back({std::stoi(parts[0]), {std::stod(parts[1]), std::stod(parts[2])}});
      }
    }
    if (f[5] == "train") {
      r.split = Split::Train;
    } else if (f[5] == "test") {
      r.split = Split::Test;
    } else {
      fail("unknown split '" + f[5] + "'");
    }
    r.spacing = std::stod(f[6]);
    if (f[7] != "-") {
      auto parts = split_fields(f[7], ',');
      if (parts.size() != 4) fail("malformed icon rectangle");
      r.icon = IconRegion{std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2]), std::stoi(parts[3])};
    }
    r.seed = std::stoull(f[8]);
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << format_manifest(manifest);
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str());
}

void write_pgm16(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write image " + path.string());
  out << "P5\n" << image.cols << ' ' << image.rows << "\n65535\n";
  std::string buf;
  buf.reserve(image.pixels.size() * 2);
  for (float v : image.pixels) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 65535.0));
    buf.push_back(static_cast<char>(q >> 8));
    buf.push_back(static_cast<char>(q & 0xFF));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing image " + path.string());
}

Image read_pgm16(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image " + path.string());
  std::string magic;
  int cols = 0;
  int rows = 0;
  int maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  in.get();
  if (magic != "P5" || cols <= 0 || rows <= 0 || maxval <= 0 || maxval > 65535) {
    throw std::runtime_error("unsupported image format in " + path.string());
  }
  Image img(rows, cols);
  const bool wide = maxval > 255;
  std::vector<unsigned char> buf(img.pixels.size() * (wide ? 2 : 1));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("truncated image " + path.string());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const int q = wide ? (buf[2 * i] << 8) | buf[2 * i + 1] : buf[i];
    img.pixels[i] = static_cast<float>(q / static_cast<double>(maxval));
  }
  return img;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "frames");
  for (std::size_t i = 0; i < dataset.frames.size(); ++i) {
    write_pgm16(dataset.frames[i].image, dir / dataset.manifest.records[i].path);
  }
  write_manifest(dataset.manifest, dir / "manifest.tsv");
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  ds.manifest.check_patient_disjoint();
  const auto base = manifest_path.parent_path();
  for (const auto& r : ds.manifest.records) {
    UltrasoundFrame f;
    f.image = read_pgm16(base / r.path);
    f.spacing = r.spacing;
    f.patient_id = r.patient_id;
    f.view = r.view;
    f.landmarks = r.landmarks;
    f.icon = r.icon;
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

}  // namespace usmtl
