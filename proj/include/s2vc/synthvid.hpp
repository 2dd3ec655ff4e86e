#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "s2vc/video.hpp"

namespace s2vc {

enum class MotionPattern { horizontal_slide, vertical_slide, diagonal, oscillate, grow_shrink, rotate_square };

std::string_view to_string(MotionPattern pattern);
MotionPattern parse_motion_pattern(std::string_view tag);

/// One action class: a foreground square moving over a static background.
struct ClassSpec {
  MotionPattern pattern = MotionPattern::horizontal_slide;
  double speed = 1.0;      // pixels per frame (slides), angular/phase rate otherwise
  double size = 4.0;       // side length in pixels
  double intensity = 0.95;
};

struct ClipGeometry {
  std::size_t length = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
};

/// The six motion patterns at speed 1, then again at speed 2, ... until
/// `num_classes` specs exist.
std::vector<ClassSpec> default_class_specs(std::size_t num_classes);

/// Procedural static background: even ids are linear gradients, odd ids are
/// bilinear value-noise fields; values lie in [0.05, 0.65]. Returned as an
/// H x W x C tensor.
Tensor render_background(std::size_t background_id, const ClipGeometry& geometry);

/// Fraction of each pixel covered by the foreground at frame t (H x W).
std::vector<float> foreground_coverage(const ClassSpec& spec, std::uint64_t seed, const ClipGeometry& geometry,
                                       std::size_t t);

/// Background blended with the anti-aliased foreground in every frame.
/// Slides move in the positive direction when the whole path fits in the frame
/// and bounce off the borders otherwise; the start position comes from `seed`.
VideoClip gen_clip(const ClassSpec& spec, std::size_t background_id, std::uint64_t seed,
                   const ClipGeometry& geometry = {});

/// Frames reordered by a uniformly random non-identity permutation.
VideoClip shuffle_clip(const VideoClip& clip, std::uint64_t seed);

struct DatasetConfig {
  std::size_t num_classes = 4;
  std::size_t clips_per_class = 16;
  ClipGeometry geometry;
  /// Probability that a clip of class k uses background k mod B; otherwise
  /// one of the other B - 1 backgrounds is drawn uniformly. c = 1/B makes the
  /// background uninformative.
  double confound = 1.0;
  /// Size B of the background library; 0 means one per class.
  std::size_t num_backgrounds = 0;
  std::uint64_t seed = 0;

  std::size_t background_count() const { return num_backgrounds ? num_backgrounds : num_classes; }
};

struct LabeledClip {
  VideoClip clip;
  std::size_t label = 0;
  std::size_t background = 0;
  std::uint64_t seed = 0;
  std::string path;  // relative to the dataset directory
};

struct Dataset {
  std::vector<LabeledClip> clips;
  std::size_t num_classes = 0;
};

Dataset gen_dataset(const DatasetConfig& config);

/// CSV with header clip_path,class,background,seed.
std::string format_manifest(const Dataset& dataset);

inline constexpr std::string_view kManifestName = "manifest.csv";

/// Writes every clip file and the manifest into `dir` (created if needed).
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Reads the manifest in `dir` and every clip it lists.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace s2vc
