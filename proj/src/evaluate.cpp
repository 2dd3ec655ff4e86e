#include "s2vc/evaluate.hpp"

#include <algorithm>

namespace s2vc {
namespace {

LabeledEmbeddings to_embeddings(const std::vector<std::vector<double>>& rows, std::vector<std::size_t> labels) {
  if (rows.empty()) throw Error("feature split is empty");
  Tensor t({rows.size(), rows.front().size()});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < rows[r].size(); ++j) t.at(r, j) = static_cast<float>(rows[r][j]);
  return {std::move(t), std::move(labels)};
}

struct SplitBuilder {
  std::vector<std::vector<double>> gallery, queries;
  std::vector<std::size_t> gallery_labels, query_labels;

  void add(bool in_gallery, std::vector<double> features, std::size_t label) {
    (in_gallery ? gallery : queries).push_back(std::move(features));
    (in_gallery ? gallery_labels : query_labels).push_back(label);
  }

  FeatureSplit finish() {
    return {to_embeddings(gallery, std::move(gallery_labels)), to_embeddings(queries, std::move(query_labels))};
  }
};

}  // namespace

std::vector<bool> gallery_mask(const Dataset& dataset) {
  std::vector<std::size_t> totals(dataset.num_classes, 0), seen(dataset.num_classes, 0);
  for (const auto& c : dataset.clips) {
    if (c.label >= dataset.num_classes) throw Error("clip label " + std::to_string(c.label) + " out of range");
    ++totals[c.label];
  }
  for (std::size_t k = 0; k < totals.size(); ++k)
    if (totals[k] < 2) throw Error("class " + std::to_string(k) + " needs at least two clips for a gallery/query split");
  std::vector<bool> mask;
  mask.reserve(dataset.clips.size());
  for (const auto& c : dataset.clips) mask.push_back(seen[c.label]++ < totals[c.label] / 2);
  return mask;
}

FeatureSplit retrieval_features(const Dataset& dataset, const EncoderState& encoder) {
  const auto mask = gallery_mask(dataset);
  SplitBuilder b;
  for (std::size_t i = 0; i < dataset.clips.size(); ++i) {
    const auto& c = dataset.clips[i];
    b.add(mask[i], backbone_features(c.clip, encoder.config, encoder.query), c.label);
  }
  return b.finish();
}

FeatureSplit shuffle_probe_features(const Dataset& dataset, const EncoderState& encoder) {
  const auto mask = gallery_mask(dataset);
  SplitBuilder b;
  for (std::size_t i = 0; i < dataset.clips.size(); ++i) {
    const auto& c = dataset.clips[i];
    b.add(mask[i], backbone_features(c.clip, encoder.config, encoder.query), 0);
    b.add(mask[i], backbone_features(shuffle_clip(c.clip, c.seed), encoder.config, encoder.query), 1);
  }
  return b.finish();
}

EvalReport evaluate_encoder(const Dataset& dataset, const EncoderState& encoder, const ProbeConfig& probe,
                            const std::vector<std::size_t>& ks) {
  EvalReport report;
  const auto retrieval = retrieval_features(dataset, encoder);
  report.gallery_size = retrieval.gallery.labels.size();
  report.query_count = retrieval.queries.labels.size();
  for (const std::size_t k : ks) report.recall.push_back({k, recall_at_k(retrieval.gallery, retrieval.queries, k)});
  const auto shuffled = shuffle_probe_features(dataset, encoder);
  report.shuffle_probe_accuracy = linear_probe(shuffled.gallery, shuffled.queries, probe);
  return report;
}

std::string format_eval_csv(const EvalReport& report) {
  std::string out = "metric,k,value\n";
  for (const auto& r : report.recall) out += "recall," + std::to_string(r.k) + "," + csv_number(r.recall) + "\n";
  out += "shuffle_probe_accuracy,," + csv_number(report.shuffle_probe_accuracy) + "\n";
  return out;
}

std::string format_paired_csv(const EvalReport& s2vc, const EvalReport& baseline) {
  if (s2vc.recall.size() != baseline.recall.size()) throw Error("paired reports use different recall cut-offs");
  std::string out = "metric,k,s2vc,baseline\n";
  for (std::size_t i = 0; i < s2vc.recall.size(); ++i) {
    if (s2vc.recall[i].k != baseline.recall[i].k) throw Error("paired reports use different recall cut-offs");
    out += "recall," + std::to_string(s2vc.recall[i].k) + "," + csv_number(s2vc.recall[i].recall) + "," +
           csv_number(baseline.recall[i].recall) + "\n";
  }
  out += "shuffle_probe_accuracy,," + csv_number(s2vc.shuffle_probe_accuracy) + "," +
         csv_number(baseline.shuffle_probe_accuracy) + "\n";
  return out;
}

}  // namespace s2vc
