#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "s2vc/contrast.hpp"
#include "s2vc/flow.hpp"
#include "s2vc/statlab.hpp"
#include "s2vc/suppress.hpp"
#include "s2vc/synthvid.hpp"

namespace s2vc::cli {

struct SuppressSettings {
  double alpha = 0.5;
  /// One of the four latent strategies, or "tfd" for the pixel-space baseline.
  std::string strategy = "set-to-zero";
  double tfd_keep = 0.2;
  std::vector<double> alpha_sweep{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
};

struct FlowSettings {
  TrainConfig train;
  /// Clips are average-pooled by this power-of-two factor before the flow.
  std::size_t downsample = 1;
};

struct EvalSettings {
  ProbeConfig probe;
  std::vector<std::size_t> recall_k{1, 5, 10};
  std::size_t fit_bins = 20;
  double ks_coefficient = 1.358;
  std::size_t strip_clips = 4;
};

/// Every setting of a run, with defaults for anything the config omits. The
/// single run seed feeds every stage.
struct RunConfig {
  std::uint64_t seed = 0;
  DatasetConfig data;
  FlowSettings flow;
  SuppressSettings suppress;
  PretrainConfig contrast;
  EvalSettings eval;

  RunConfig();
  /// Copies the run seed into every stage and derives the flow dimension.
  void resolve();
};

/// INI text: optional root `seed`, then [data], [flow], [suppress], [contrast]
/// and [eval] sections. Unknown sections or keys and malformed values throw.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every key with its resolved value, in a fixed order; parses back to the
/// same configuration.
std::string format_run_config(const RunConfig& config);
/// FNV-1a 64-bit hash of the formatted configuration, as 16 hex digits.
std::string config_hash(const RunConfig& config);

}  // namespace s2vc::cli
