#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "s2vc/flow.hpp"
#include "s2vc/video.hpp"

namespace s2vc {

/// Per-frame flow latents of a clip: row l is f(normalize(frame l)).
struct LatentClip {
  Tensor latents;           // L x d
  std::string fingerprint;  // of the model that produced the latents

  std::size_t length() const { return latents.rows(); }
  std::size_t dim() const { return latents.cols(); }
};

struct TemporalStats {
  std::vector<double> std;   // population standard deviation over frames
  std::vector<double> mean;
};

enum class Strategy { set_to_zero, random_noise, shuffle_in_clip, shuffle_in_frame };

std::string_view to_string(Strategy strategy);
Strategy parse_strategy(std::string_view tag);

struct SuppressionPlan {
  double alpha = 0.5;
  Strategy strategy = Strategy::set_to_zero;
  std::vector<std::size_t> static_set;  // sorted ascending
  std::uint64_t seed = 0;
};

/// Rejects clips whose flattened frame size differs from the model dimension.
LatentClip encode_clip(const VideoClip& clip, const FlowModel& model);

/// Requires at least two frames.
TemporalStats temporal_std(const LatentClip& latent);

/// {i : std[i] < alpha}, ascending. Ties at the threshold count as motion.
std::vector<std::size_t> select_static(const TemporalStats& stats, double alpha);

/// Plan with the static set selected from `stats` at `alpha`.
SuppressionPlan make_plan(const TemporalStats& stats, double alpha, Strategy strategy, std::uint64_t seed);

/// Z_p: columns in the static set are replaced according to the strategy;
/// every other column is copied bit for bit.
LatentClip apply_strategy(const LatentClip& latent, const SuppressionPlan& plan);

/// Inverse flow of every latent row, denormalized and clamped to [0, 1].
VideoClip generate_clip(const LatentClip& zp, const FlowModel& model, std::size_t height, std::size_t width,
                        std::size_t channels);

/// Keeps the ceil(keep_fraction * d) pixels with the largest temporal standard
/// deviation (ties to the lower index) and paints every other pixel 0.5.
VideoClip tfd_suppress(const VideoClip& clip, double keep_fraction = 0.2);

/// Spatial reduction by repeated 2x2 average pooling; `factor` is a power of two.
VideoClip average_pool(const VideoClip& clip, std::size_t factor);
/// Bilinear enlargement by `factor` with half-pixel sample centres and
/// edge clamping.
VideoClip bilinear_upsample(const VideoClip& clip, std::size_t factor);

/// Ratio between the clip's spatial size and the model's frame size; rejects
/// anything that is not a power-of-two multiple.
std::size_t resolution_factor(const VideoClip& clip, const FlowModel& model);

/// Down-sample to the flow resolution, suppress there with `plan` as given,
/// up-sample, and add back the residual lost by the down/up round trip.
VideoClip full_pipeline(const VideoClip& clip, const FlowModel& model, const SuppressionPlan& plan);

struct S2vcResult {
  VideoClip clip;
  SuppressionPlan plan;
  TemporalStats stats;
};

/// encode -> temporal_std -> select_static -> apply_strategy -> generate,
/// going through full_pipeline when the clip is larger than the flow frame.
S2vcResult s2vc_run(const VideoClip& clip, const FlowModel& model, double alpha, Strategy strategy,
                    std::uint64_t seed);
VideoClip s2vc_algorithm(const VideoClip& clip, const FlowModel& model, double alpha, Strategy strategy,
                         std::uint64_t seed);

}  // namespace s2vc
