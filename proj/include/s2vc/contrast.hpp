#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s2vc/checkpoint.hpp"
#include "s2vc/flow.hpp"
#include "s2vc/graph.hpp"
#include "s2vc/suppress.hpp"
#include "s2vc/video.hpp"

namespace s2vc {

struct AugmentConfig {
  double crop_min = 0.7;  // side fraction of the crop window
  double crop_max = 1.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.2;  // additive offset drawn from [-b, b]
  double contrast = 0.2;    // gain drawn from [1 - c, 1 + c], pivot 0.5
  double blur_p = 0.5;
  std::size_t blur_kernel = 3;  // odd box-filter width
};

/// One parameter draw per clip, applied identically to every frame: crop
/// (resized back with bilinear sampling), horizontal flip, brightness/contrast
/// jitter, box blur; pixels clamped to [0, 1].
VideoClip augment(const VideoClip& clip, const AugmentConfig& config, std::uint64_t seed);

struct EncoderConfig {
  std::size_t frame_dim = 256;  // H * W * C
  std::size_t hidden = 32;
  std::size_t features = 32;
  std::size_t embed_dim = 16;
  /// Append frame_l - frame_{l-1} (zero for the first frame) to every frame.
  bool use_difference = true;
  /// First-layer weights are drawn with sd init_gain / sqrt(fan_in). Encoder
  /// inputs are small (centred pixels, sparse differences), so a gain above 1
  /// keeps the tanh units out of their linear range.
  double init_gain = 3.0;

  std::size_t input_dim() const { return use_difference ? 2 * frame_dim : frame_dim; }
};

/// Named tensors in a fixed order: w1, b1, w2, b2, wp, bp.
struct EncoderParams {
  std::vector<NamedTensor> tensors;

  Tensor& get(std::string_view name);
  const Tensor& get(std::string_view name) const;
  std::size_t scalar_count() const;
};

EncoderParams init_encoder_params(const EncoderConfig& config, std::uint64_t seed);

/// Query encoder F (trained) and momentum encoder F' (moving average of F).
struct EncoderState {
  EncoderConfig config;
  EncoderParams query;
  EncoderParams key;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;

  static EncoderState create(const EncoderConfig& config, std::uint64_t seed);
};

enum class EncoderSide { query, key };

/// Per-frame rows fed to the encoder: pixels centred on 0.5, optionally
/// followed by the difference to the previous frame. L x input_dim.
Tensor encoder_input(const VideoClip& clip, const EncoderConfig& config);

/// Pooled per-frame features before the projection head (the "backbone"
/// output used for probing).
std::vector<double> backbone_features(const VideoClip& clip, const EncoderConfig& config,
                                      const EncoderParams& params);

/// Unit-norm embedding: tanh MLP per frame, temporal mean, projection head,
/// L2 normalization.
std::vector<double> encode_features(const VideoClip& clip, const EncoderState& state,
                                    EncoderSide side = EncoderSide::query);
std::vector<double> encode_features(const VideoClip& clip, const EncoderConfig& config, const EncoderParams& params);

/// FIFO ring of unit-norm vectors.
class FeatureQueue {
 public:
  FeatureQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {}

  /// Appends in order, evicting the oldest entries beyond capacity. Rejects
  /// vectors whose norm differs from 1 by more than 1e-4.
  void push(std::span<const std::vector<double>> batch);
  void push(const std::vector<double>& v) { push(std::span<const std::vector<double>>(&v, 1)); }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return entries_.empty(); }
  const std::deque<std::vector<double>>& entries() const { return entries_; }
  /// Entries as a dim x size matrix (one column per entry), oldest first.
  Tensor transposed() const;

 private:
  std::size_t capacity_, dim_;
  std::deque<std::vector<double>> entries_;
};

struct InfoNceResult {
  double loss = 0.0;
  std::vector<double> grad_v;  // d loss / d v
};

/// -log( exp(v.vp/tau) / (exp(v.vp/tau) + sum_j exp(v.n_j/tau)) ) with the
/// analytic gradient with respect to v.
InfoNceResult info_nce(std::span<const double> v, std::span<const double> vp, const FeatureQueue& queue, double tau);

/// F' <- m F' + (1 - m) F.
void momentum_update(EncoderState& state, double m);

/// Graph computing the batch-mean InfoNCE loss of the query encoder. Inputs:
/// "x" (B*L x input_dim encoder rows), "pool" (B x B*L averaging matrix),
/// "keys" (B x embed positives) and "queue_t" (embed x K negatives).
class ContrastiveGraph {
 public:
  ContrastiveGraph(const EncoderConfig& config, const EncoderParams& params, double tau, bool with_negatives = true);

  Graph& graph() { return graph_; }
  Graph::NodeId embeddings() const { return embeddings_; }

  static std::map<std::string, Tensor> make_inputs(std::span<const VideoClip> clips, const EncoderConfig& config,
                                                   std::span<const std::vector<double>> keys,
                                                   const FeatureQueue* queue);
  void load(const EncoderParams& params);
  void store(EncoderParams& params) const;

 private:
  Graph graph_;
  Graph::NodeId embeddings_ = 0;
};

struct PretrainConfig {
  EncoderConfig encoder;
  AugmentConfig augment;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double learning_rate = 0.03;
  double clip_norm = 5.0;
  double momentum = 0.97;
  std::size_t queue_size = 256;
  double tau = 0.07;
  /// S2VC positives: the second view is passed through suppression.
  bool suppress = true;
  double alpha = 0.5;
  Strategy strategy = Strategy::set_to_zero;
  std::uint64_t seed = 0;
};

class PretrainError : public Error {
 public:
  PretrainError(std::size_t step, const std::string& what)
      : Error("pretraining aborted at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Contrastive pretraining. For each sampled clip V: v = F(augment1(V)),
/// v_p = F'(s2vc(augment2(V))) (or F'(augment2(V)) when suppression is off);
/// SGD on the query encoder, then momentum update and queue push.
/// `flow` may be null only when suppression is off.
EncoderState pretrain(std::span<const VideoClip> clips, const FlowModel* flow, const PretrainConfig& config,
                      const std::function<void(std::size_t, double)>& on_step = {});

inline constexpr std::string_view kEncoderMagic = "S2VC-ENC v1";
std::string format_encoder_checkpoint(const EncoderState& state);
EncoderState parse_encoder_checkpoint(std::string_view text);
void save_encoder(const EncoderState& state, const std::filesystem::path& path);
EncoderState load_encoder(const std::filesystem::path& path);

}  // namespace s2vc
