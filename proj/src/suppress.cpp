#include "s2vc/suppress.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "s2vc/rng.hpp"

namespace s2vc {
namespace {

constexpr std::array<std::pair<Strategy, std::string_view>, 4> kStrategyNames = {{
    {Strategy::set_to_zero, "set-to-zero"},
    {Strategy::random_noise, "random-noise"},
    {Strategy::shuffle_in_clip, "shuffle-in-clip"},
    {Strategy::shuffle_in_frame, "shuffle-in-frame"},
}};

constexpr float kMidGray = 0.5f;

bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

VideoClip pool_half(const VideoClip& clip) {
  const std::size_t h = clip.height() / 2, w = clip.width() / 2, ch = clip.channels();
  VideoClip out(clip.length(), h, w, ch);
  out.set_fps(clip.fps());
  for (std::size_t l = 0; l < clip.length(); ++l)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < ch; ++c) {
          const double s = double(clip.at(l, 2 * y, 2 * x, c)) + clip.at(l, 2 * y, 2 * x + 1, c) +
                           clip.at(l, 2 * y + 1, 2 * x, c) + clip.at(l, 2 * y + 1, 2 * x + 1, c);
          out.at(l, y, x, c) = static_cast<float>(s / 4.0);
        }
  return out;
}

}  // namespace

std::string_view to_string(Strategy strategy) {
  for (const auto& [s, name] : kStrategyNames)
    if (s == strategy) return name;
  return "unknown";
}

Strategy parse_strategy(std::string_view tag) {
  for (const auto& [s, name] : kStrategyNames)
    if (name == tag) return s;
  throw Error("unknown suppression strategy '" + std::string(tag) + "'");
}

LatentClip encode_clip(const VideoClip& clip, const FlowModel& model) {
  const std::size_t d = clip.frame_size();
  if (d != model.dim()) {
    throw ShapeError("clip frame size " + std::to_string(d) + " (H*W*C) does not match flow dimension " +
                     std::to_string(model.dim()));
  }
  LatentClip out{Tensor({clip.length(), d}), model.fingerprint()};
  std::vector<double> x(d);
  for (std::size_t l = 0; l < clip.length(); ++l) {
    const auto frame = clip.frame(l);
    for (std::size_t i = 0; i < d; ++i) x[i] = PixelNormalization::normalize(frame[i]);
    const auto z = flow_forward_f64(x, model).first;
    for (std::size_t i = 0; i < d; ++i) out.latents.at(l, i) = static_cast<float>(z[i]);
  }
  return out;
}

TemporalStats temporal_std(const LatentClip& latent) {
  const std::size_t len = latent.length(), d = latent.dim();
  if (len < 2) throw Error("temporal statistics need at least 2 frames, got " + std::to_string(len));
  TemporalStats stats{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < d; ++i) {
    double mean = 0.0;
    for (std::size_t l = 0; l < len; ++l) mean += latent.latents.at(l, i);
    mean /= double(len);
    double var = 0.0;
    for (std::size_t l = 0; l < len; ++l) {
      const double dev = latent.latents.at(l, i) - mean;
      var += dev * dev;
    }
    stats.mean[i] = mean;
    stats.std[i] = std::sqrt(var / double(len));
  }
  return stats;
}

std::vector<std::size_t> select_static(const TemporalStats& stats, double alpha) {
  if (!(alpha >= 0.0)) throw Error("alpha must be non-negative");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < stats.std.size(); ++i)
    if (stats.std[i] < alpha) out.push_back(i);
  return out;
}

SuppressionPlan make_plan(const TemporalStats& stats, double alpha, Strategy strategy, std::uint64_t seed) {
  return SuppressionPlan{alpha, strategy, select_static(stats, alpha), seed};
}

LatentClip apply_strategy(const LatentClip& latent, const SuppressionPlan& plan) {
  const std::size_t len = latent.length(), d = latent.dim();
  for (const auto i : plan.static_set)
    if (i >= d) throw Error("static index " + std::to_string(i) + " outside latent dimension " + std::to_string(d));
  LatentClip out = latent;
  auto& z = out.latents;
  const auto& cs = plan.static_set;
  Rng rng = Rng(plan.seed).substream(to_string(plan.strategy));

  switch (plan.strategy) {
    case Strategy::set_to_zero:
      for (const auto i : cs)
        for (std::size_t l = 0; l < len; ++l) z.at(l, i) = 0.0f;
      break;
    case Strategy::random_noise:
      for (const auto i : cs) {
        const auto v = static_cast<float>(rng.normal());
        for (std::size_t l = 0; l < len; ++l) z.at(l, i) = v;
      }
      break;
    case Strategy::shuffle_in_clip:
      for (const auto i : cs) {
        const auto perm = rng.permutation(len);
        for (std::size_t l = 0; l < len; ++l) z.at(l, i) = latent.latents.at(perm[l], i);
      }
      break;
    case Strategy::shuffle_in_frame:
      for (std::size_t l = 0; l < len; ++l) {
        const auto perm = rng.permutation(cs.size());
        for (std::size_t k = 0; k < cs.size(); ++k) z.at(l, cs[k]) = latent.latents.at(l, cs[perm[k]]);
      }
      break;
  }
  return out;
}

VideoClip generate_clip(const LatentClip& zp, const FlowModel& model, std::size_t height, std::size_t width,
                        std::size_t channels) {
  const std::size_t d = zp.dim();
  if (d != model.dim() || height * width * channels != d) {
    throw ShapeError("latent dimension " + std::to_string(d) + " does not match flow dimension " +
                     std::to_string(model.dim()) + " and frame " + std::to_string(height) + "x" +
                     std::to_string(width) + "x" + std::to_string(channels));
  }
  VideoClip out(zp.length(), height, width, channels);
  for (std::size_t l = 0; l < zp.length(); ++l) {
    const auto row = zp.latents.row(l);
    const Tensor x = flow_inverse(Tensor({d}, std::vector<float>(row.begin(), row.end())), model);
    auto frame = out.frame(l);
    for (std::size_t i = 0; i < d; ++i) {
      frame[i] = static_cast<float>(std::clamp(PixelNormalization::denormalize(x.values()[i]), 0.0, 1.0));
    }
  }
  return out;
}

VideoClip tfd_suppress(const VideoClip& clip, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw Error("keep_fraction must lie in (0, 1]");
  const std::size_t len = clip.length(), d = clip.frame_size();
  if (len < 2) throw Error("tfd_suppress needs at least 2 frames, got " + std::to_string(len));
  std::vector<double> sd(d);
  for (std::size_t i = 0; i < d; ++i) {
    double mean = 0.0;
    for (std::size_t l = 0; l < len; ++l) mean += clip.frame(l)[i];
    mean /= double(len);
    double var = 0.0;
    for (std::size_t l = 0; l < len; ++l) var += (clip.frame(l)[i] - mean) * (clip.frame(l)[i] - mean);
    sd[i] = std::sqrt(var / double(len));
  }
  const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * double(d) - 1e-9));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sd[a] > sd[b]; });
  std::vector<bool> kept(d, false);
  for (std::size_t k = 0; k < std::min(keep, d); ++k) kept[order[k]] = true;

  VideoClip out = clip;
  for (std::size_t l = 0; l < len; ++l) {
    auto frame = out.frame(l);
    for (std::size_t i = 0; i < d; ++i)
      if (!kept[i]) frame[i] = kMidGray;
  }
  return out;
}

VideoClip average_pool(const VideoClip& clip, std::size_t factor) {
  if (!is_power_of_two(factor)) throw Error("pooling factor must be a power of two, got " + std::to_string(factor));
  if (clip.height() % factor || clip.width() % factor) {
    throw Error("frame " + std::to_string(clip.height()) + "x" + std::to_string(clip.width()) +
                " is not divisible by " + std::to_string(factor));
  }
  VideoClip out = clip;
  for (std::size_t f = factor; f > 1; f /= 2) out = pool_half(out);
  return out;
}

VideoClip bilinear_upsample(const VideoClip& clip, std::size_t factor) {
  if (factor == 0) throw Error("upsampling factor must be positive");
  if (factor == 1) return clip;
  const std::size_t h = clip.height(), w = clip.width(), ch = clip.channels();
  VideoClip out(clip.length(), h * factor, w * factor, ch);
  out.set_fps(clip.fps());
  // Source coordinate of an output pixel centre, with the two taps and weight.
  struct Tap {
    std::size_t lo, hi;
    double t;
  };
  const auto taps = [factor](std::size_t n_out, std::size_t n_in) {
    std::vector<Tap> out(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      const double src = std::clamp((double(i) + 0.5) / double(factor) - 0.5, 0.0, double(n_in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      out[i] = {lo, std::min(lo + 1, n_in - 1), src - double(lo)};
    }
    return out;
  };
  const auto ty = taps(h * factor, h), tx = taps(w * factor, w);
  for (std::size_t l = 0; l < clip.length(); ++l)
    for (std::size_t y = 0; y < h * factor; ++y)
      for (std::size_t x = 0; x < w * factor; ++x)
        for (std::size_t c = 0; c < ch; ++c) {
          const auto& a = ty[y];
          const auto& b = tx[x];
          const double top = std::lerp(double(clip.at(l, a.lo, b.lo, c)), double(clip.at(l, a.lo, b.hi, c)), b.t);
          const double bot = std::lerp(double(clip.at(l, a.hi, b.lo, c)), double(clip.at(l, a.hi, b.hi, c)), b.t);
          out.at(l, y, x, c) = static_cast<float>(std::lerp(top, bot, a.t));
        }
  return out;
}

std::size_t resolution_factor(const VideoClip& clip, const FlowModel& model) {
  const std::size_t fs = clip.frame_size(), d = model.dim();
  if (d == 0 || fs % d) {
    throw Error("frame size " + std::to_string(fs) + " is not a multiple of flow dimension " + std::to_string(d));
  }
  const std::size_t area = fs / d;
  const auto factor = static_cast<std::size_t>(std::llround(std::sqrt(double(area))));
  if (factor * factor != area || !is_power_of_two(factor) || clip.height() % factor || clip.width() % factor) {
    throw Error("frame " + std::to_string(clip.height()) + "x" + std::to_string(clip.width()) +
                " is not a power-of-two multiple of the flow frame");
  }
  return factor;
}

VideoClip full_pipeline(const VideoClip& clip, const FlowModel& model, const SuppressionPlan& plan) {
  const std::size_t factor = resolution_factor(clip, model);
  const VideoClip down = average_pool(clip, factor);
  const LatentClip zp = apply_strategy(encode_clip(down, model), plan);
  const VideoClip small_p = generate_clip(zp, model, down.height(), down.width(), down.channels());
  if (factor == 1) return small_p;

  const VideoClip up = bilinear_upsample(down, factor);
  const VideoClip up_p = bilinear_upsample(small_p, factor);
  VideoClip out(clip.length(), clip.height(), clip.width(), clip.channels());
  out.set_fps(clip.fps());
  const auto src = clip.pixels(), base = up.pixels(), gen = up_p.pixels();
  auto dst = out.pixels();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const double residual = double(src[i]) - double(base[i]);
    dst[i] = static_cast<float>(std::clamp(double(gen[i]) + residual, 0.0, 1.0));
  }
  return out;
}

S2vcResult s2vc_run(const VideoClip& clip, const FlowModel& model, double alpha, Strategy strategy,
                    std::uint64_t seed) {
  const std::size_t factor = resolution_factor(clip, model);
  const VideoClip down = factor == 1 ? clip : average_pool(clip, factor);
  S2vcResult result;
  result.stats = temporal_std(encode_clip(down, model));
  result.plan = make_plan(result.stats, alpha, strategy, seed);
  result.clip = full_pipeline(clip, model, result.plan);
  return result;
}

VideoClip s2vc_algorithm(const VideoClip& clip, const FlowModel& model, double alpha, Strategy strategy,
                         std::uint64_t seed) {
  return s2vc_run(clip, model, alpha, strategy, seed).clip;
}

}  // namespace s2vc
