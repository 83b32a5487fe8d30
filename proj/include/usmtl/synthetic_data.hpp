#pragma once

// Synthetic abdominal "phantom" frames with known view and landmark ground
// truth, the resample/pad/icon-mask preprocessing chain, and the
// patient-split dataset manifest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "usmtl/heatmap_geometry.hpp"
#include "usmtl/tasks.hpp"

namespace usmtl {

struct Image {
  int rows = 0;
  int cols = 0;
  std::vector<float> pixels;  // row-major, values in [0, 1]

  Image() = default;
  Image(int r, int c, float fill = 0.0F)
      : rows(r), cols(c), pixels(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

  [[nodiscard]] float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * cols + c]; }
  [[nodiscard]] float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * cols + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Half-open pixel rectangle [row, row + rows) x [col, col + cols).
struct IconRegion {
  int row = 0;
  int col = 0;
  int rows = 0;
  int cols = 0;

  friend bool operator==(const IconRegion&, const IconRegion&) = default;
};

/// Organ outline used by the generator, in pixel units of the frame.
struct OrganEllipse {
  LandmarkPoint center;
  double semi_major = 0.0;
  double semi_minor = 0.0;
  double angle = 0.0;  // radians; 0 = major axis along rows

  friend bool operator==(const OrganEllipse&, const OrganEllipse&) = default;
};

struct UltrasoundFrame {
  Image image;
  double spacing = 1.0;  // mm per pixel, isotropic
  std::string patient_id;
  View view = View::Others;
  std::vector<ChannelLandmark> landmarks;
  std::optional<IconRegion> icon;
  std::optional<OrganEllipse> organ;
  bool cropped = false;

  [[nodiscard]] std::optional<Task> task() const { return task_for_view(view); }
};

struct PhantomOptions {
  double min_spacing = 0.5;  // mm/px range for the native acquisition grid
  double max_spacing = 1.0;
  double field_mm = 240.0;   // square field of view
  double icon_mm = 16.0;
};

/// Deterministic in (view, seed, options).
[[nodiscard]] UltrasoundFrame generate_phantom(View view, std::uint64_t seed, const PhantomOptions& options = {});

/// Scale-then-translate map from native to preprocessed pixel coordinates.
struct AffineMap {
  double scale = 1.0;
  double offset_s = 0.0;
  double offset_t = 0.0;

  [[nodiscard]] LandmarkPoint forward(const LandmarkPoint& p) const {
    return {scale * p.s + offset_s, scale * p.t + offset_t};
  }
  [[nodiscard]] LandmarkPoint inverse(const LandmarkPoint& p) const {
    return {(p.s - offset_s) / scale, (p.t - offset_t) / scale};
  }
};

inline constexpr double kTargetSpacing = 0.5;
inline constexpr int kTargetSize = 512;

[[nodiscard]] AffineMap preprocess_map(int rows, int cols, double spacing, double target_spacing, int target_size);

/// Bilinear resample to `target_spacing`, then centre zero-pad (or centre crop,
/// setting `cropped`) to target_size x target_size. Landmarks, icon and organ
/// follow the same map. Throws std::invalid_argument for spacing <= 0.
[[nodiscard]] UltrasoundFrame preprocess(const UltrasoundFrame& frame, double target_spacing = kTargetSpacing,
                                         int target_size = kTargetSize);

/// Zeroes the icon rectangle; no-op without one.
[[nodiscard]] UltrasoundFrame mask_icon(const UltrasoundFrame& frame);
void mask_icon_in_place(Image& image, const std::optional<IconRegion>& icon);

/// Blank size x size image carrying only the icon of `view` at `icon`.
[[nodiscard]] Image icon_probe_image(View view, int size, const IconRegion& icon);

// ---------------------------------------------------------------------------
// Dataset

enum class Split { Train, Test };

[[nodiscard]] std::string_view split_name(Split s);

struct ManifestRecord {
  std::string path;  // relative to the manifest directory
  std::string patient_id;
  View view = View::Others;
  std::optional<Task> task;
  std::vector<ChannelLandmark> landmarks;
  Split split = Split::Train;
  double spacing = kTargetSpacing;
  std::optional<IconRegion> icon;
  std::uint64_t seed = 0;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;

  [[nodiscard]] std::vector<std::size_t> indices(Split s) const;
  /// Throws std::logic_error if a patient appears in both splits.
  void check_patient_disjoint() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct DatasetOptions {
  /// When > 0, synthesise this many patients with random views; otherwise use
  /// `view_counts` exactly.
  int patients = 0;
  std::array<int, kNumViews> view_counts{};
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  /// Fraction of landmark frames drawn as SpleenTrans in patient mode; < 0
  /// keeps views uniform.
  double spleen_trans_fraction = -1.0;
  int min_frames_per_patient = 5;
  int max_frames_per_patient = 20;
  double target_spacing = kTargetSpacing;
  int target_size = kTargetSize;
  PhantomOptions phantom;
};

/// Input geometry of a named preset: "desk" (96 px over a 256 mm field from
/// 2-3 mm native frames) or "faithful" (512 px at 0.5 mm). Throws
/// std::invalid_argument for other names.
[[nodiscard]] DatasetOptions dataset_preset(std::string_view name);

[[nodiscard]] std::array<int, kNumViews> counts_per_view(int per_view);
/// `per_task` frames for each landmark task (split evenly across the views
/// carrying it); views without a task get zero.
[[nodiscard]] std::array<int, kNumViews> counts_per_task(int per_task);
/// Per-view counts where SpleenTrans makes up `fraction` of landmark frames.
[[nodiscard]] std::array<int, kNumViews> counts_with_spleen_trans_fraction(int per_view, double fraction);

struct Dataset {
  DatasetManifest manifest;
  std::vector<UltrasoundFrame> frames;  // preprocessed, parallel to manifest.records
};

/// Throws std::invalid_argument for fewer than two patients or a fraction
/// outside (0, 1).
[[nodiscard]] Dataset build_dataset(const DatasetOptions& options);

/// Writes <dir>/manifest.tsv and 16-bit PGM rasters under <dir>/frames/.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& manifest_path);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
[[nodiscard]] DatasetManifest read_manifest(const std::filesystem::path& path);
[[nodiscard]] std::string format_manifest(const DatasetManifest& manifest);
[[nodiscard]] DatasetManifest parse_manifest(const std::string& text);

/// Binary 16-bit PGM (P5, maxval 65535).
void write_pgm16(const Image& image, const std::filesystem::path& path);
[[nodiscard]] Image read_pgm16(const std::filesystem::path& path);

}  // namespace usmtl
