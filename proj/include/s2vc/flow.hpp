#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "s2vc/checkpoint.hpp"
#include "s2vc/graph.hpp"
#include "s2vc/tensor.hpp"

namespace s2vc {

/// Affine coupling: coordinates with mask == 1 pass through; the rest become
/// y_b = x_b * exp(s(x_a)) + t(x_a), with s = s_max * tanh(raw).
///
/// Conditioner: hidden = tanh(x_a w1 + b1); [raw | t] = hidden w2 + b2, where
/// x_a lists the pass-through coordinates in ascending index order and the
/// output columns follow the transformed coordinates in ascending order.
struct CouplingLayer {
  std::vector<std::uint8_t> mask;
  Tensor w1, b1, w2, b2;  // b1: 1 x hidden, b2: 1 x 2*transformed
  double s_max = 2.0;

  std::size_t dim() const { return mask.size(); }
  std::vector<std::size_t> pass_indices() const;
  std::vector<std::size_t> transformed_indices() const;
};

/// Fixed permutation y[i] = x[perm[i]]; contributes nothing to the log-det.
struct PermutationLayer {
  std::vector<std::size_t> perm;
};

using FlowLayer = std::variant<CouplingLayer, PermutationLayer>;

/// Half-mask with floor(d/2) ones: layer parity 0 keeps the first floor(d/2)
/// even indices, parity 1 the odd indices.
std::vector<std::uint8_t> alternating_mask(std::size_t dim, std::size_t parity);

struct FlowArchitecture {
  std::size_t dim = 256;
  std::size_t couplings = 6;
  std::size_t hidden = 64;
  double s_max = 2.0;
};

/// Pixel <-> flow-space mapping. Frames are dequantized as
/// (p * 255 + u) / 256 - 0.5, with u ~ U(0,1) while training and u = 0.5 at
/// inference.
struct PixelNormalization {
  static constexpr double kLevels = 256.0;
  static double normalize(double pixel, double u = 0.5) { return (pixel * 255.0 + u) / kLevels - 0.5; }
  static double denormalize(double v) { return ((v + 0.5) * kLevels - 0.5) / 255.0; }
  /// Amplitude of the training-time noise in flow space.
  static constexpr double kDequantAmplitude = 1.0 / 256.0;
};

class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(std::size_t dim, std::vector<FlowLayer> layers, std::uint64_t seed = 0);

  /// Coupling stack with alternating masks whose conditioners end in zero
  /// weights, so the model is exactly the identity until trained.
  static FlowModel identity(const FlowArchitecture& arch, std::uint64_t seed);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<FlowLayer>& layers() const { return layers_; }
  std::vector<FlowLayer>& layers() {
    fingerprint_cache_.clear();
    return layers_;
  }

  /// Every trainable tensor, named "layer<i>.<w1|b1|w2|b2>".
  std::vector<std::pair<std::string, Tensor*>> named_parameters();

  /// FNV-1a digest of the checkpoint text, in hex. Cached until the layers
  /// are next accessed mutably.
  std::string fingerprint() const;

 private:
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<FlowLayer> layers_;
  mutable std::string fingerprint_cache_;
};

/// Non-finite values inside a layer.
class FlowError : public Error {
 public:
  FlowError(std::size_t layer, const std::string& what)
      : Error("flow layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const { return layer_; }

 private:
  std::size_t layer_;
};

struct LayerOutput {
  Tensor y;
  double logdet = 0.0;
};

LayerOutput coupling_forward(const Tensor& x, const CouplingLayer& layer, std::size_t layer_index = 0);
Tensor coupling_inverse(const Tensor& y, const CouplingLayer& layer, std::size_t layer_index = 0);

/// z = f(x) and the accumulated log|det J|, summed in layer order.
LayerOutput flow_forward(const Tensor& x, const FlowModel& model);
Tensor flow_inverse(const Tensor& z, const FlowModel& model);

/// Double-precision forward pass, for callers that difference the output.
std::pair<std::vector<double>, double> flow_forward_f64(std::span<const double> x, const FlowModel& model);

/// log N(z; 0, I) = -d/2 log(2 pi) - |z|^2 / 2.
double standard_normal_log_density(std::span<const double> z);

/// log p_Z(f(x)) + log|det J| for a normalized frame vector.
double log_likelihood(const Tensor& x, const FlowModel& model);

/// Mean negative log-likelihood over the rows of `data` (n x d).
double mean_nll(const Tensor& data, const FlowModel& model);

/// Graph computing the batch-mean NLL of input "x" (rows are samples). Flow
/// parameters become graph parameters under their checkpoint names; the input
/// columns must be supplied in `column_order()` order.
class NllGraph {
 public:
  explicit NllGraph(const FlowModel& model);

  Graph& graph() { return graph_; }
  /// Column p of the graph input holds coordinate column_order()[p].
  const std::vector<std::size_t>& column_order() const { return input_order_; }
  Tensor arrange(const Tensor& batch) const;
  /// Copies graph parameters back into `model`.
  void store(FlowModel& model) const;

 private:
  Graph graph_;
  std::vector<std::size_t> input_order_;
  std::vector<std::size_t> order_;  // column layout of the graph output
};

struct TrainConfig {
  FlowArchitecture arch;
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  double clip_norm = 5.0;
  double dequant_amplitude = PixelNormalization::kDequantAmplitude;
  std::uint64_t seed = 0;
  /// Save a checkpoint every n epochs when `checkpoint_path` is set (0 = never).
  std::size_t checkpoint_every = 0;
  std::optional<std::filesystem::path> checkpoint_path;
  /// Epoch number reported for the first epoch (for resumed runs).
  std::size_t first_epoch = 1;
};

struct TrainResult {
  FlowModel model;
  /// Mean NLL of each epoch's minibatches (with dequantization noise).
  std::vector<double> epoch_nll;
  /// Noise-free mean NLL on the dataset before and after training.
  double initial_nll = 0.0;
  double final_nll = 0.0;
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t epoch, std::size_t batch, FlowModel last_good, const std::string& what)
      : Error("training aborted at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) +
              ": " + what),
        epoch_(epoch),
        batch_(batch),
        last_good_(std::move(last_good)) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }
  const FlowModel& last_good() const { return last_good_; }

 private:
  std::size_t epoch_, batch_;
  FlowModel last_good_;
};

/// Maximum-likelihood training by gradient ascent on the mean log-likelihood
/// (descent on NLL) with global gradient-norm clipping. `data` rows are
/// normalized frame vectors; uniform noise of width `dequant_amplitude`
/// centred on zero is added per sample and epoch.
TrainResult train_mle(const Tensor& data, const TrainConfig& config);
TrainResult train_mle(const Tensor& data, FlowModel initial, const TrainConfig& config);

std::string format_flow_checkpoint(const FlowModel& model);
FlowModel parse_flow_checkpoint(std::string_view text);
void save_flow(const FlowModel& model, const std::filesystem::path& path);
FlowModel load_flow(const std::filesystem::path& path);

}  // namespace s2vc
