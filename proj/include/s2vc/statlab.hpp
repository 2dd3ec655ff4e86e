#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "s2vc/tensor.hpp"
#include "s2vc/video.hpp"

namespace s2vc {

/// Standard normal CDF.
double normal_cdf(double x);

struct KsOptions {
  /// Standardize with the sample mean and (n-1) standard deviation before
  /// comparing with N(0, 1); when false the samples are tested as given.
  bool standardize = true;
  /// Asymptotic 5% critical value is coefficient / sqrt(n).
  double critical_coefficient = 1.358;
};

struct KsResult {
  double statistic = 0.0;  // sup |ECDF - Phi|
  double critical = 0.0;
  bool reject = false;
  bool degenerate = false;  // zero variance: no test performed
  std::size_t n = 0;
};

/// One-sample Kolmogorov-Smirnov test against the standard normal. Needs at
/// least 5 samples.
KsResult ks_test(std::span<const double> samples, const KsOptions& options = {});

struct NormalFitResult {
  double mse = 0.0;
  bool degenerate = false;
};

/// Histogram of the samples over [min, max] in `bins` equal bins, scaled to a
/// density, against the pdf of N(mean, variance) at the bin centres.
NormalFitResult normal_fit_mse(std::span<const double> samples, std::size_t bins = 20);

/// Per latent dimension: normal-fit MSE and KS test of the column values.
struct DimensionFit {
  std::size_t dimension = 0;
  double mse = 0.0;
  KsResult ks;
};

std::vector<DimensionFit> fit_report(const Tensor& samples, std::size_t bins = 20, const KsOptions& options = {});
double reject_rate(const std::vector<DimensionFit>& fits);
/// dimension,mse,ks_statistic,ks_critical,reject,degenerate
std::string format_fit_csv(const std::vector<DimensionFit>& fits);

/// cos(a, b) on raw (not mean-subtracted) vectors; 0 when either is zero.
double cosine(std::span<const float> a, std::span<const float> b);

enum class SimilarityMode { intra_class, intra_video, inter_class };
std::string_view to_string(SimilarityMode mode);
SimilarityMode parse_similarity_mode(std::string_view tag);

/// Latent trajectories of one clip before (z) and after (zp) suppression.
struct LatentPair {
  Tensor z, zp;  // L x d each
  std::size_t label = 0;
};

struct ClassSimilarity {
  SimilarityMode mode = SimilarityMode::intra_class;
  std::size_t label = 0;
  std::size_t pairs = 0;  // frame pairs averaged
  double z = 0.0;
  double zp = 0.0;
};

struct SimilarityReport {
  std::vector<ClassSimilarity> rows;
  std::vector<std::string> notices;  // modes or classes skipped for lack of samples
};

/// Mean frame-level cosine similarity per class:
///   intra-class: frame l of clip a against frame l of clip b, a != b, same class;
///   intra-video: frame l against frame l + 1 of the same clip;
///   inter-class: frame l of a clip of the class against frame l of a clip of
///   another class.
SimilarityReport cosine_suite(std::span<const LatentPair> items, SimilarityMode mode);
/// mode,class,pairs,similarity_z,similarity_zp
std::string format_similarity_csv(const SimilarityReport& report);

/// Rows of `embeddings` with one label per row.
struct LabeledEmbeddings {
  Tensor embeddings;
  std::vector<std::size_t> labels;
};

/// Fraction of queries whose label appears among the K gallery items with the
/// smallest cosine distance; equal distances rank by gallery index.
double recall_at_k(const LabeledEmbeddings& gallery, const LabeledEmbeddings& queries, std::size_t k);

struct ProbeConfig {
  std::size_t epochs = 300;
  double learning_rate = 0.5;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

/// Softmax regression trained by full-batch gradient descent on standardized
/// training features; returns held-out accuracy.
double linear_probe(const LabeledEmbeddings& train, const LabeledEmbeddings& test, const ProbeConfig& config = {});

/// Product-moment correlation; lengths >= 3 and nonzero variances.
double pearson(std::span<const double> x, std::span<const double> y);

/// Mean over consecutive frame pairs of the fraction of pixels whose largest
/// absolute channel difference exceeds `threshold`.
double motion_proportion(const VideoClip& clip, double threshold);

/// Formats a double with nine significant digits for CSV output.
std::string csv_number(double v);

}  // namespace s2vc
