#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "s2vc/tensor.hpp"

namespace s2vc {

/// L frames of H x W x C pixels in [0, 1], stored frame-major, then row-major,
/// channels interleaved.
class VideoClip {
 public:
  VideoClip() = default;
  VideoClip(std::size_t length, std::size_t height, std::size_t width, std::size_t channels, float fill = 0.0f);
  /// `frames` must have shape {L, H, W, C}.
  explicit VideoClip(Tensor frames, double fps = 25.0);

  std::size_t length() const { return dims_[0]; }
  std::size_t height() const { return dims_[1]; }
  std::size_t width() const { return dims_[2]; }
  std::size_t channels() const { return dims_[3]; }
  std::size_t frame_size() const { return dims_[1] * dims_[2] * dims_[3]; }

  double fps() const { return fps_; }
  void set_fps(double fps) { fps_ = fps; }

  float& at(std::size_t l, std::size_t y, std::size_t x, std::size_t c = 0) {
    return data_[((l * dims_[1] + y) * dims_[2] + x) * dims_[3] + c];
  }
  float at(std::size_t l, std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data_[((l * dims_[1] + y) * dims_[2] + x) * dims_[3] + c];
  }

  std::span<float> frame(std::size_t l) { return std::span<float>(data_).subspan(l * frame_size(), frame_size()); }
  std::span<const float> frame(std::size_t l) const {
    return std::span<const float>(data_).subspan(l * frame_size(), frame_size());
  }

  std::span<const float> pixels() const { return data_; }
  std::span<float> pixels() { return data_; }

  /// Frames as an L x (H*W*C) matrix.
  Tensor as_matrix() const;

  bool same_dims(const VideoClip& other) const { return dims_ == other.dims_; }
  bool in_unit_range() const;

  friend bool operator==(const VideoClip& a, const VideoClip& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  std::array<std::size_t, 4> dims_{};
  std::vector<float> data_;
  double fps_ = 25.0;
};

/// Maximum absolute pixel difference; dimensions must agree.
double max_abs_diff(const VideoClip& a, const VideoClip& b);

/// Binary clip file: "S2VC", u16 version 1, L/H/W/C as u32, then the pixels
/// as 32-bit floats; all little-endian.
std::string encode_clip_file(const VideoClip& clip);
VideoClip decode_clip_file(std::string_view bytes);
void write_clip(const std::filesystem::path& path, const VideoClip& clip);
VideoClip read_clip(const std::filesystem::path& path);

/// Single-channel 8-bit image for PGM export.
struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<float> pixels;  // [0, 1], row-major
};

/// Frames laid side by side, first channel only; each row of `clips` becomes
/// one horizontal strip, stacked vertically.
GrayImage frame_strip(std::span<const VideoClip> clips);

/// Binary P5, maxval 255, value = floor(p * 255 + 0.5) after clamping to [0, 1].
std::string encode_pgm(const GrayImage& image);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

}  // namespace s2vc
