#include "s2vc/video.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "s2vc/checkpoint.hpp"

namespace s2vc {
namespace {

constexpr char kClipMagic[4] = {'S', '2', 'V', 'C'};
constexpr std::uint16_t kClipVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::string_view in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

}  // namespace

VideoClip::VideoClip(std::size_t length, std::size_t height, std::size_t width, std::size_t channels, float fill)
    : dims_{length, height, width, channels}, data_(length * height * width * channels, fill) {}

VideoClip::VideoClip(Tensor frames, double fps) : fps_(fps) {
  if (frames.rank() != 4) throw ShapeError("VideoClip expects an L x H x W x C tensor");
  for (int i = 0; i < 4; ++i) dims_[i] = frames.shape()[i];
  data_ = std::move(frames.values());
}

Tensor VideoClip::as_matrix() const { return Tensor({length(), frame_size()}, data_); }

bool VideoClip::in_unit_range() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

double max_abs_diff(const VideoClip& a, const VideoClip& b) {
  if (!a.same_dims(b)) throw ShapeError("clip dimensions differ");
  double m = 0.0;
  const auto pa = a.pixels(), pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) m = std::max(m, std::abs(double(pa[i]) - double(pb[i])));
  return m;
}

std::string encode_clip_file(const VideoClip& clip) {
  std::string out(kClipMagic, 4);
  put_u16(out, kClipVersion);
  for (const auto d : {clip.length(), clip.height(), clip.width(), clip.channels()}) {
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * clip.pixels().size());
  for (const float v : clip.pixels()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

VideoClip decode_clip_file(std::string_view bytes) {
  constexpr std::size_t header = 4 + 2 + 16;
  if (bytes.size() < header || std::memcmp(bytes.data(), kClipMagic, 4) != 0) {
    throw Error("not an S2VC clip file");
  }
  const auto version = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[4]) |
                                                  (static_cast<unsigned char>(bytes[5]) << 8));
  if (version != kClipVersion) throw Error("unsupported clip version " + std::to_string(version));
  const std::size_t l = get_u32(bytes, 6), h = get_u32(bytes, 10), w = get_u32(bytes, 14), c = get_u32(bytes, 18);
  const std::size_t count = l * h * w * c;
  if (bytes.size() != header + 4 * count) {
    throw Error("clip file size " + std::to_string(bytes.size()) + " does not match header");
  }
  VideoClip clip(l, h, w, c);
  auto px = clip.pixels();
  for (std::size_t i = 0; i < count; ++i) px[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
  return clip;
}

void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  write_text_file(path, encode_clip_file(clip));
}

VideoClip read_clip(const std::filesystem::path& path) { return decode_clip_file(read_text_file(path)); }

GrayImage frame_strip(std::span<const VideoClip> clips) {
  GrayImage img;
  if (clips.empty()) return img;
  const std::size_t h = clips[0].height(), w = clips[0].width();
  std::size_t max_len = 0;
  for (const auto& c : clips) {
    if (c.height() != h || c.width() != w) throw ShapeError("frame_strip: clips differ in frame size");
    max_len = std::max(max_len, c.length());
  }
  img.height = h * clips.size();
  img.width = w * max_len;
  img.pixels.assign(img.height * img.width, 0.0f);
  for (std::size_t k = 0; k < clips.size(); ++k) {
    for (std::size_t l = 0; l < clips[k].length(); ++l)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) img.pixels[(k * h + y) * img.width + l * w + x] = clips[k].at(l, y, x, 0);
  }
  return img;
}

std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (const float p : image.pixels) {
    const double v = std::clamp(static_cast<double>(p), 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(v * 255.0 + 0.5))));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) { write_text_file(path, encode_pgm(image)); }

}  // namespace s2vc
