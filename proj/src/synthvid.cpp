#include "s2vc/synthvid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

#include "s2vc/checkpoint.hpp"
#include "s2vc/rng.hpp"

namespace s2vc {
namespace {

constexpr std::array<std::pair<MotionPattern, std::string_view>, 6> kPatternNames = {{
    {MotionPattern::horizontal_slide, "horizontal-slide"},
    {MotionPattern::vertical_slide, "vertical-slide"},
    {MotionPattern::diagonal, "diagonal"},
    {MotionPattern::oscillate, "oscillate"},
    {MotionPattern::grow_shrink, "grow-shrink"},
    {MotionPattern::rotate_square, "rotate-square"},
}};

constexpr double kBackgroundLo = 0.05;
constexpr double kBackgroundHi = 0.65;
constexpr double kOscillateAmplitude = 3.0;
constexpr std::size_t kRotateSupersample = 8;

/// Triangle-wave reflection of p into [lo, hi].
double bounce(double p, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double q = std::fmod(p - lo, 2.0 * span);
  if (q < 0.0) q += 2.0 * span;
  return lo + (q <= span ? q : 2.0 * span - q);
}

/// Overlap of [a, b] with pixel [j, j + 1].
double overlap(double a, double b, std::size_t j) {
  return std::max(0.0, std::min(b, double(j) + 1.0) - std::max(a, double(j)));
}

struct Pose {
  double cx, cy, side, angle;
};

/// Start offset for a slide covering `path` pixels inside a range of `room`:
/// a whole-pixel offset keeping the path in range when it fits, anywhere otherwise.
double slide_start(double lo, double room, double path, double u) {
  if (path <= room) return lo + std::floor(u * (room - path + 1.0));
  return lo + u * room;
}

Pose pose_at(const ClassSpec& spec, std::uint64_t seed, const ClipGeometry& g, std::size_t t) {
  const double w = double(g.width), h = double(g.height), s = spec.size;
  Rng rng = Rng(seed).substream("pose");
  const double ux = rng.uniform(), uy = rng.uniform(), uphase = rng.uniform();
  const double v = spec.speed, tt = double(t);
  const double path = std::abs(v) * double(g.length > 0 ? g.length - 1 : 0);
  const double lo = s / 2.0;
  const double room_x = w - s, room_y = h - s;

  switch (spec.pattern) {
    case MotionPattern::horizontal_slide: {
      const double x0 = slide_start(lo, room_x, path, ux);
      const double y0 = lo + std::floor(uy * (room_y + 1.0));
      return {bounce(x0 + v * tt, lo, lo + room_x), y0, s, 0.0};
    }
    case MotionPattern::vertical_slide: {
      const double x0 = lo + std::floor(ux * (room_x + 1.0));
      const double y0 = slide_start(lo, room_y, path, uy);
      return {x0, bounce(y0 + v * tt, lo, lo + room_y), s, 0.0};
    }
    case MotionPattern::diagonal: {
      const double x0 = slide_start(lo, room_x, path, ux);
      const double y0 = slide_start(lo, room_y, path, uy);
      return {bounce(x0 + v * tt, lo, lo + room_x), bounce(y0 + v * tt, lo, lo + room_y), s, 0.0};
    }
    case MotionPattern::oscillate: {
      const double amp = std::min(kOscillateAmplitude, room_x / 2.0);
      const double cx = lo + amp + ux * (room_x - 2.0 * amp);
      const double cy = lo + uy * room_y;
      const double phase = 2.0 * std::numbers::pi * uphase;
      return {cx + amp * std::sin(phase + v * tt * std::numbers::pi / 4.0), cy, s, 0.0};
    }
    case MotionPattern::grow_shrink: {
      const double half_max = 0.75 * s;
      const double cx = half_max + ux * (w - 2.0 * half_max);
      const double cy = half_max + uy * (h - 2.0 * half_max);
      const double phase = 2.0 * std::numbers::pi * uphase;
      return {cx, cy, s * (1.0 + 0.5 * std::sin(phase + v * tt * std::numbers::pi / 4.0)), 0.0};
    }
    case MotionPattern::rotate_square: {
      const double half_diag = s * std::numbers::sqrt2 / 2.0;
      const double cx = half_diag + ux * (w - 2.0 * half_diag);
      const double cy = half_diag + uy * (h - 2.0 * half_diag);
      return {cx, cy, s, uphase * std::numbers::pi / 2.0 + v * tt * std::numbers::pi / 8.0};
    }
  }
  throw Error("unknown motion pattern");
}

void check_fits(const ClassSpec& spec, const ClipGeometry& g) {
  if (!(spec.size > 0.0)) throw Error("shape size must be positive");
  double extent = spec.size;
  if (spec.pattern == MotionPattern::grow_shrink) extent = 1.5 * spec.size;
  if (spec.pattern == MotionPattern::rotate_square) extent = spec.size * std::numbers::sqrt2;
  if (extent > double(std::min(g.width, g.height))) {
    throw Error("shape of extent " + std::to_string(extent) + " does not fit in a " + std::to_string(g.height) +
                "x" + std::to_string(g.width) + " frame");
  }
  if (!std::isfinite(spec.speed)) throw Error("speed must be finite");
  if (spec.intensity < 0.0 || spec.intensity > 1.0) throw Error("intensity must lie in [0, 1]");
}

}  // namespace

std::string_view to_string(MotionPattern pattern) {
  for (const auto& [p, name] : kPatternNames)
    if (p == pattern) return name;
  return "unknown";
}

MotionPattern parse_motion_pattern(std::string_view tag) {
  for (const auto& [p, name] : kPatternNames)
    if (name == tag) return p;
  throw Error("unknown motion pattern '" + std::string(tag) + "'");
}

std::vector<ClassSpec> default_class_specs(std::size_t num_classes) {
  std::vector<ClassSpec> specs;
  for (std::size_t k = 0; k < num_classes; ++k) {
    ClassSpec spec;
    spec.pattern = kPatternNames[k % kPatternNames.size()].first;
    spec.speed = double(1 + k / kPatternNames.size());
    specs.push_back(spec);
  }
  return specs;
}

Tensor render_background(std::size_t background_id, const ClipGeometry& g) {
  Tensor bg({g.height, g.width, g.channels});
  Rng rng = Rng(0x5eedba5eULL).substream("background").substream(std::uint64_t(background_id));
  for (std::size_t c = 0; c < g.channels; ++c) {
    if (background_id % 2 == 0) {
      // Linear gradient along a direction stepped by the golden angle.
      const double angle = double(background_id / 2) * 2.399963229728653 + 0.3 * rng.uniform() + 0.5 * double(c);
      const double dx = std::cos(angle), dy = std::sin(angle);
      const double extent = std::abs(dx) * double(g.width - 1) + std::abs(dy) * double(g.height - 1);
      const double x0 = dx < 0 ? double(g.width - 1) : 0.0, y0 = dy < 0 ? double(g.height - 1) : 0.0;
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) {
          const double proj = extent > 0 ? ((double(x) - x0) * dx + (double(y) - y0) * dy) / extent : 0.0;
          bg.values()[(y * g.width + x) * g.channels + c] =
              static_cast<float>(kBackgroundLo + (kBackgroundHi - kBackgroundLo) * std::clamp(proj, 0.0, 1.0));
        }
    } else {
      // Value noise: random lattice every 4 pixels, bilinearly interpolated.
      constexpr std::size_t cell = 4;
      const std::size_t gh = g.height / cell + 2, gw = g.width / cell + 2;
      std::vector<double> lattice(gh * gw);
      for (auto& v : lattice) v = rng.uniform(kBackgroundLo, kBackgroundHi);
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) {
          const double fy = double(y) / cell, fx = double(x) / cell;
          const std::size_t iy = std::size_t(fy), ix = std::size_t(fx);
          const double ty = fy - double(iy), tx = fx - double(ix);
          const double top = std::lerp(lattice[iy * gw + ix], lattice[iy * gw + ix + 1], tx);
          const double bot = std::lerp(lattice[(iy + 1) * gw + ix], lattice[(iy + 1) * gw + ix + 1], tx);
          bg.values()[(y * g.width + x) * g.channels + c] = static_cast<float>(std::lerp(top, bot, ty));
        }
    }
  }
  return bg;
}

std::vector<float> foreground_coverage(const ClassSpec& spec, std::uint64_t seed, const ClipGeometry& g,
                                       std::size_t t) {
  check_fits(spec, g);
  const Pose p = pose_at(spec, seed, g, t);
  std::vector<float> cov(g.height * g.width, 0.0f);
  if (spec.pattern != MotionPattern::rotate_square) {
    const double half = p.side / 2.0;
    std::vector<double> cx(g.width), cy(g.height);
    for (std::size_t x = 0; x < g.width; ++x) cx[x] = overlap(p.cx - half, p.cx + half, x);
    for (std::size_t y = 0; y < g.height; ++y) cy[y] = overlap(p.cy - half, p.cy + half, y);
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) cov[y * g.width + x] = static_cast<float>(cy[y] * cx[x]);
    return cov;
  }
  // Rotated square: area coverage estimated on a regular sub-pixel grid.
  const double c = std::cos(p.angle), s = std::sin(p.angle), half = p.side / 2.0;
  constexpr std::size_t n = kRotateSupersample;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      std::size_t inside = 0;
      for (std::size_t sy = 0; sy < n; ++sy)
        for (std::size_t sx = 0; sx < n; ++sx) {
          const double px = double(x) + (double(sx) + 0.5) / n - p.cx;
          const double py = double(y) + (double(sy) + 0.5) / n - p.cy;
          const double u = c * px + s * py, v = -s * px + c * py;
          if (std::abs(u) <= half && std::abs(v) <= half) ++inside;
        }
      cov[y * g.width + x] = static_cast<float>(double(inside) / double(n * n));
    }
  return cov;
}

VideoClip gen_clip(const ClassSpec& spec, std::size_t background_id, std::uint64_t seed, const ClipGeometry& g) {
  check_fits(spec, g);
  const Tensor bg = render_background(background_id, g);
  VideoClip clip(g.length, g.height, g.width, g.channels);
  for (std::size_t t = 0; t < g.length; ++t) {
    const auto cov = foreground_coverage(spec, seed, g, t);
    auto frame = clip.frame(t);
    for (std::size_t p = 0; p < g.height * g.width; ++p)
      for (std::size_t c = 0; c < g.channels; ++c) {
        const double a = cov[p], b = bg.values()[p * g.channels + c];
        frame[p * g.channels + c] = static_cast<float>(std::clamp(b * (1.0 - a) + spec.intensity * a, 0.0, 1.0));
      }
  }
  return clip;
}

VideoClip shuffle_clip(const VideoClip& clip, std::uint64_t seed) {
  const std::size_t len = clip.length();
  if (len < 2) throw Error("shuffle_clip needs at least 2 frames, got " + std::to_string(len));
  Rng rng = Rng(seed).substream("shuffle");
  std::vector<std::size_t> perm;
  do {
    perm = rng.permutation(len);
  } while (std::is_sorted(perm.begin(), perm.end()));
  VideoClip out(len, clip.height(), clip.width(), clip.channels());
  out.set_fps(clip.fps());
  for (std::size_t l = 0; l < len; ++l) std::ranges::copy(clip.frame(perm[l]), out.frame(l).begin());
  return out;
}

Dataset gen_dataset(const DatasetConfig& config) {
  if (config.num_classes == 0) throw Error("dataset needs at least one class");
  if (config.confound < 0.0 || config.confound > 1.0) throw Error("confound level must lie in [0, 1]");
  const std::size_t num_bg = config.background_count();
  const auto specs = default_class_specs(config.num_classes);
  const Rng root(config.seed);
  Rng bg_rng = root.substream("backgrounds");
  const Rng seed_rng = root.substream("clips");

  Dataset ds;
  ds.num_classes = config.num_classes;
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    for (std::size_t j = 0; j < config.clips_per_class; ++j) {
      const std::size_t index = ds.clips.size();
      LabeledClip item;
      item.label = k;
      const std::size_t designated = k % num_bg;
      item.background = designated;
      if (num_bg > 1 && !bg_rng.bernoulli(config.confound)) {
        const std::size_t other = bg_rng.below(num_bg - 1);
        item.background = other >= designated ? other + 1 : other;
      }
      item.seed = seed_rng.substream(std::uint64_t(index)).next_u64();
      char name[32];
      std::snprintf(name, sizeof name, "clip_%05zu.s2vc", index);
      item.path = name;
      item.clip = gen_clip(specs[k], item.background, item.seed, config.geometry);
      ds.clips.push_back(std::move(item));
    }
  }
  return ds;
}

std::string format_manifest(const Dataset& dataset) {
  std::string out = "clip_path,class,background,seed\n";
  for (const auto& c : dataset.clips) {
    out += c.path + "," + std::to_string(c.label) + "," + std::to_string(c.background) + "," +
           std::to_string(c.seed) + "\n";
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  for (const auto& c : dataset.clips) write_clip(dir / c.path, c.clip);
  write_text_file(dir / std::string(kManifestName), format_manifest(dataset));
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const std::string text = read_text_file(dir / std::string(kManifestName));
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "clip_path,class,background,seed") throw Error("unexpected manifest header in " + dir.string());
  Dataset ds;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string path, label, bg, seed;
    if (!std::getline(row, path, ',') || !std::getline(row, label, ',') || !std::getline(row, bg, ',') ||
        !std::getline(row, seed)) {
      throw Error("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    LabeledClip item;
    try {
      item.label = std::stoul(label);
      item.background = std::stoul(bg);
      item.seed = std::stoull(seed);
    } catch (const std::exception&) {
      throw Error("manifest line " + std::to_string(line_no) + ": malformed number");
    }
    item.path = path;
    item.clip = read_clip(dir / path);
    ds.num_classes = std::max(ds.num_classes, item.label + 1);
    ds.clips.push_back(std::move(item));
  }
  return ds;
}

}  // namespace s2vc
