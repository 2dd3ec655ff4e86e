#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "s2vc/contrast.hpp"
#include "s2vc/statlab.hpp"
#include "s2vc/synthvid.hpp"

namespace s2vc {

/// Gallery/query partition of a labelled feature set. The gallery doubles as
/// the probe training set and the queries as the held-out probe set.
struct FeatureSplit {
  LabeledEmbeddings gallery;
  LabeledEmbeddings queries;
};

/// Within each class, the first half of its clips (in dataset order) go to the
/// gallery and the rest are queries. Needs at least two clips per class.
std::vector<bool> gallery_mask(const Dataset& dataset);

/// Frozen backbone features of every clip, labelled by class.
FeatureSplit retrieval_features(const Dataset& dataset, const EncoderState& encoder);

/// Every clip twice: natural (label 0) and temporally shuffled with the clip's
/// seed (label 1).
FeatureSplit shuffle_probe_features(const Dataset& dataset, const EncoderState& encoder);

struct RecallRow {
  std::size_t k = 0;
  double recall = 0.0;
};

struct EvalReport {
  std::vector<RecallRow> recall;
  double shuffle_probe_accuracy = 0.0;
  std::size_t gallery_size = 0;
  std::size_t query_count = 0;
};

EvalReport evaluate_encoder(const Dataset& dataset, const EncoderState& encoder, const ProbeConfig& probe = {},
                            const std::vector<std::size_t>& ks = {1, 5, 10});

/// metric,k,value
std::string format_eval_csv(const EvalReport& report);
/// metric,k,s2vc,baseline
std::string format_paired_csv(const EvalReport& s2vc, const EvalReport& baseline);

}  // namespace s2vc
