#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "s2vc/rng.hpp"
#include "s2vc/synthvid.hpp"

using namespace s2vc;

namespace {

/// Foreground weight per pixel recovered from the known background.
std::vector<double> recover_coverage(const VideoClip& clip, const Tensor& bg, double intensity, std::size_t l) {
  std::vector<double> a(clip.height() * clip.width());
  for (std::size_t p = 0; p < a.size(); ++p) {
    const double b = bg.values()[p * clip.channels()];
    a[p] = (clip.frame(l)[p * clip.channels()] - b) / (intensity - b);
  }
  return a;
}

double centroid_column(const std::vector<double>& a, std::size_t width) {
  double num = 0.0, den = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    num += (double(p % width) + 0.5) * a[p];
    den += a[p];
  }
  return num / den;
}

std::vector<float> frame_of(const VideoClip& c, std::size_t l) {
  return {c.frame(l).begin(), c.frame(l).end()};
}

}  // namespace

TEST_CASE("motion pattern tags round-trip through their names") {
  for (const auto& spec : default_class_specs(6)) CHECK(parse_motion_pattern(to_string(spec.pattern)) == spec.pattern);
  CHECK_THROWS_AS(parse_motion_pattern("teleport"), Error);
}

TEST_CASE("default class specs cycle patterns and raise the speed") {
  const auto specs = default_class_specs(10);
  REQUIRE(specs.size() == 10);
  CHECK(specs[0].pattern == MotionPattern::horizontal_slide);
  CHECK(specs[6].pattern == MotionPattern::horizontal_slide);
  CHECK(specs[0].speed == 1.0);
  CHECK(specs[6].speed == 2.0);
}

TEST_CASE("speed zero gives identical frames") {
  for (const auto& base : default_class_specs(6)) {
    ClassSpec spec = base;
    spec.speed = 0.0;
    const auto clip = gen_clip(spec, 1, 42);
    for (std::size_t l = 1; l < clip.length(); ++l) CHECK(frame_of(clip, l) == frame_of(clip, 0));
  }
}

TEST_CASE("horizontal slide at speed 1 moves the centroid one column per frame") {
  const ClipGeometry g{4, 16, 16, 1};
  const ClassSpec spec{MotionPattern::horizontal_slide, 1.0, 4.0, 0.95};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto clip = gen_clip(spec, seed % 4, seed, g);
    const Tensor bg = render_background(seed % 4, g);
    double prev = centroid_column(recover_coverage(clip, bg, spec.intensity, 0), g.width);
    for (std::size_t l = 1; l < g.length; ++l) {
      const double c = centroid_column(recover_coverage(clip, bg, spec.intensity, l), g.width);
      CHECK(c - prev == doctest::Approx(1.0).epsilon(1e-5));
      prev = c;
    }
  }
}

TEST_CASE("generated clips are deterministic, in range, and of the requested size") {
  const ClipGeometry g{8, 16, 16, 3};
  for (const auto& spec : default_class_specs(12)) {
    const auto a = gen_clip(spec, 3, 7, g);
    const auto b = gen_clip(spec, 3, 7, g);
    CHECK(a == b);
    CHECK(a.in_unit_range());
    CHECK(a.length() == 8);
    CHECK(a.height() == 16);
    CHECK(a.width() == 16);
    CHECK(a.channels() == 3);
    CHECK_FALSE(a == gen_clip(spec, 3, 8, g));
  }
}

TEST_CASE("distinct motion tags give distinct frame differences on the same background") {
  const auto specs = default_class_specs(6);
  std::vector<std::vector<float>> fields;
  for (const auto& spec : specs) {
    const auto clip = gen_clip(spec, 0, 5);
    std::vector<float> diff;
    for (std::size_t l = 1; l < clip.length(); ++l)
      for (std::size_t p = 0; p < clip.frame_size(); ++p) diff.push_back(clip.frame(l)[p] - clip.frame(l - 1)[p]);
    fields.push_back(diff);
  }
  for (std::size_t i = 0; i < fields.size(); ++i)
    for (std::size_t j = i + 1; j < fields.size(); ++j) CHECK(fields[i] != fields[j]);
}

TEST_CASE("shapes that cannot fit are rejected") {
  const ClipGeometry g{4, 8, 8, 1};
  CHECK_THROWS_AS(gen_clip({MotionPattern::horizontal_slide, 1.0, 9.0, 0.9}, 0, 0, g), Error);
  CHECK_THROWS_AS(gen_clip({MotionPattern::rotate_square, 1.0, 6.0, 0.9}, 0, 0, g), Error);
  CHECK_THROWS_AS(gen_clip({MotionPattern::grow_shrink, 1.0, 6.0, 0.9}, 0, 0, g), Error);
  CHECK_THROWS_AS(gen_clip({MotionPattern::diagonal, 1.0, 0.0, 0.9}, 0, 0, g), Error);
}

TEST_CASE("fast slides bounce instead of leaving the frame") {
  const ClipGeometry g{8, 16, 16, 1};
  const ClassSpec spec{MotionPattern::diagonal, 5.0, 4.0, 0.95};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (std::size_t t = 0; t < g.length; ++t) {
      const auto cov = foreground_coverage(spec, seed, g, t);
      double area = 0.0;
      for (const float a : cov) area += a;
      CHECK(area == doctest::Approx(16.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("backgrounds are static, in range, and differ by id") {
  const ClipGeometry g;
  std::set<std::vector<float>> seen;
  for (std::size_t id = 0; id < 8; ++id) {
    const Tensor bg = render_background(id, g);
    for (const float v : bg.values()) {
      CHECK(v >= 0.05f - 1e-6f);
      CHECK(v <= 0.65f + 1e-6f);
    }
    seen.insert(bg.values());
    CHECK(render_background(id, g) == bg);
  }
  CHECK(seen.size() == 8);
}

TEST_CASE("shuffle_clip with two frames swaps them") {
  const auto clip = gen_clip(default_class_specs(1)[0], 0, 1, {2, 8, 8, 1});
  const auto s = shuffle_clip(clip, 99);
  CHECK(frame_of(s, 0) == frame_of(clip, 1));
  CHECK(frame_of(s, 1) == frame_of(clip, 0));
}

TEST_CASE("shuffle_clip permutes frames and never returns the identity order") {
  const auto clip = gen_clip(default_class_specs(1)[0], 0, 1);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = shuffle_clip(clip, seed);
    std::multiset<std::vector<float>> a, b;
    bool identical = true;
    for (std::size_t l = 0; l < clip.length(); ++l) {
      a.insert(frame_of(clip, l));
      b.insert(frame_of(s, l));
      identical = identical && frame_of(clip, l) == frame_of(s, l);
    }
    CHECK(a == b);
    CHECK_FALSE(identical);
  }
  CHECK(shuffle_clip(clip, 3) == shuffle_clip(clip, 3));
}

TEST_CASE("shuffling a constant clip leaves its content unchanged") {
  const VideoClip flat(5, 4, 4, 1, 0.3f);
  CHECK(shuffle_clip(flat, 1) == flat);
  CHECK_THROWS_AS(shuffle_clip(VideoClip(1, 4, 4, 1), 0), Error);
}

TEST_CASE("full confounding assigns each class its own background") {
  DatasetConfig cfg;
  cfg.confound = 1.0;
  const auto ds = gen_dataset(cfg);
  REQUIRE(ds.clips.size() == 64);
  for (const auto& c : ds.clips) CHECK(c.background == c.label);
}

TEST_CASE("background match rate follows the confound level") {
  DatasetConfig cfg;
  cfg.num_classes = 4;
  cfg.clips_per_class = 2500;
  cfg.confound = 0.25;
  cfg.geometry = {2, 8, 8, 1};
  const auto ds = gen_dataset(cfg);
  REQUIRE(ds.clips.size() == 10000);
  std::size_t match = 0;
  std::map<std::size_t, std::size_t> used;
  for (const auto& c : ds.clips) {
    match += c.background == c.label;
    ++used[c.background];
  }
  CHECK(double(match) / 1e4 == doctest::Approx(0.25).epsilon(0.02 / 0.25));
  CHECK(used.size() == 4);
}

TEST_CASE("dataset generation is reproducible by seed") {
  DatasetConfig cfg;
  cfg.confound = 0.5;
  cfg.seed = 11;
  const auto a = gen_dataset(cfg), b = gen_dataset(cfg);
  CHECK(format_manifest(a) == format_manifest(b));
  for (std::size_t i = 0; i < a.clips.size(); ++i) CHECK(a.clips[i].clip == b.clips[i].clip);
  cfg.seed = 12;
  CHECK(format_manifest(gen_dataset(cfg)) != format_manifest(a));
}

TEST_CASE("motion alone identifies the class better than chance") {
  // Nearest neighbour on frame-difference energy profiles, backgrounds drawn
  // independently of class.
  DatasetConfig cfg;
  cfg.num_classes = 4;
  cfg.clips_per_class = 20;
  cfg.confound = 0.25;
  cfg.seed = 3;
  const auto ds = gen_dataset(cfg);
  const auto profile = [](const VideoClip& c) {
    // Energy of each frame difference, then the spatial spread of all
    // difference energy along x and along y.
    std::vector<double> p;
    double mass = 0.0, mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0;
    for (std::size_t l = 1; l < c.length(); ++l) {
      double energy = 0.0;
      for (std::size_t y = 0; y < c.height(); ++y)
        for (std::size_t x = 0; x < c.width(); ++x) {
          const double e = std::abs(c.at(l, y, x) - c.at(l - 1, y, x));
          energy += e;
          mass += e;
          mx += e * double(x);
          my += e * double(y);
          mxx += e * double(x * x);
          myy += e * double(y * y);
        }
      p.push_back(energy);
    }
    mx /= mass;
    my /= mass;
    p.push_back(mxx / mass - mx * mx);
    p.push_back(myy / mass - my * my);
    return p;
  };
  std::vector<std::vector<double>> feats;
  for (const auto& c : ds.clips) feats.push_back(profile(c.clip));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    double best = INFINITY;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < feats.size(); ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (std::size_t k = 0; k < feats[i].size(); ++k) dist += (feats[i][k] - feats[j][k]) * (feats[i][k] - feats[j][k]);
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    correct += ds.clips[i].label == ds.clips[best_j].label;
  }
  CHECK(double(correct) / double(feats.size()) > 0.25 + 0.1);
}

TEST_CASE("clip files round-trip bit for bit") {
  const auto clip = gen_clip(default_class_specs(5)[4], 2, 9, {8, 16, 16, 2});
  const std::string bytes = encode_clip_file(clip);
  CHECK(bytes.substr(0, 4) == "S2VC");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(static_cast<unsigned char>(bytes[6]) == 8);
  CHECK(bytes.size() == 22 + 4 * clip.pixels().size());
  CHECK(decode_clip_file(bytes) == clip);
  CHECK_THROWS_AS(decode_clip_file("S2VX" + bytes.substr(4)), Error);
  CHECK_THROWS_AS(decode_clip_file(bytes.substr(0, bytes.size() - 1)), Error);
}

TEST_CASE("datasets written to disk read back identically") {
  DatasetConfig cfg;
  cfg.clips_per_class = 3;
  cfg.confound = 0.5;
  const auto ds = gen_dataset(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "s2vc_test_dataset";
  std::filesystem::remove_all(dir);
  write_dataset(dir, ds);
  const auto back = read_dataset(dir);
  REQUIRE(back.clips.size() == ds.clips.size());
  CHECK(back.num_classes == 4);
  for (std::size_t i = 0; i < ds.clips.size(); ++i) {
    CHECK(back.clips[i].clip == ds.clips[i].clip);
    CHECK(back.clips[i].label == ds.clips[i].label);
    CHECK(back.clips[i].background == ds.clips[i].background);
    CHECK(back.clips[i].seed == ds.clips[i].seed);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("PGM export rounds half up") {
  GrayImage img{1, 4, {0.0f, 1.0f, 127.5f / 255.0f, 2.0f}};
  const std::string pgm = encode_pgm(img);
  const std::string header = "P5\n4 1\n255\n";
  REQUIRE(pgm.size() == header.size() + 4);
  CHECK(pgm.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(pgm[header.size() + 0]) == 0);
  CHECK(static_cast<unsigned char>(pgm[header.size() + 1]) == 255);
  CHECK(static_cast<unsigned char>(pgm[header.size() + 2]) == 128);
  CHECK(static_cast<unsigned char>(pgm[header.size() + 3]) == 255);
}

TEST_CASE("frame strips tile frames left to right and clips top to bottom") {
  const VideoClip a(3, 2, 2, 1, 0.25f), b(3, 2, 2, 1, 0.75f);
  const std::vector<VideoClip> clips{a, b};
  const auto img = frame_strip(clips);
  CHECK(img.width == 6);
  CHECK(img.height == 4);
  CHECK(img.pixels[0] == 0.25f);
  CHECK(img.pixels[2 * 6 + 5] == 0.75f);
}
