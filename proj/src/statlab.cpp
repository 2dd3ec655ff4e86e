#include "s2vc/statlab.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "s2vc/rng.hpp"

namespace s2vc {
namespace {

constexpr std::array<std::pair<SimilarityMode, std::string_view>, 3> kModeNames = {{
    {SimilarityMode::intra_class, "intra-class"},
    {SimilarityMode::intra_video, "intra-video"},
    {SimilarityMode::inter_class, "inter-class"},
}};

struct Moments {
  double mean = 0.0, variance = 0.0;  // variance with n - 1
};

Moments moments(std::span<const double> x) {
  Moments m;
  for (const double v : x) m.mean += v;
  m.mean /= double(x.size());
  for (const double v : x) m.variance += (v - m.mean) * (v - m.mean);
  m.variance /= double(x.size() - 1);
  return m;
}

/// Mean cosine over frames l of a[l] . b[l + offset].
double frame_cosine_sum(const Tensor& a, const Tensor& b, std::size_t offset, std::size_t& count) {
  double s = 0.0;
  const std::size_t len = std::min(a.rows(), b.rows());
  for (std::size_t l = 0; l + offset < len; ++l) {
    s += cosine(a.row(l), b.row(l + offset));
    ++count;
  }
  return s;
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

KsResult ks_test(std::span<const double> samples, const KsOptions& options) {
  const std::size_t n = samples.size();
  if (n < 5) throw Error("ks_test needs at least 5 samples, got " + std::to_string(n));
  KsResult r;
  r.n = n;
  r.critical = options.critical_coefficient / std::sqrt(double(n));
  const Moments m = moments(samples);
  if (!(m.variance > 0.0)) {
    r.degenerate = true;
    r.statistic = std::nan("");
    return r;
  }
  std::vector<double> x(samples.begin(), samples.end());
  if (options.standardize) {
    const double sd = std::sqrt(m.variance);
    for (auto& v : x) v = (v - m.mean) / sd;
  }
  std::sort(x.begin(), x.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = normal_cdf(x[i]);
    d = std::max({d, double(i + 1) / double(n) - cdf, cdf - double(i) / double(n)});
  }
  r.statistic = d;
  r.reject = d > r.critical;
  return r;
}

NormalFitResult normal_fit_mse(std::span<const double> samples, std::size_t bins) {
  const std::size_t n = samples.size();
  if (bins < 2 || n < bins) {
    throw Error("normal_fit_mse needs n >= bins >= 2 (n=" + std::to_string(n) + ", bins=" + std::to_string(bins) + ")");
  }
  NormalFitResult r;
  const Moments m = moments(samples);
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(m.variance > 0.0) || !(hi > lo)) {
    r.degenerate = true;
    r.mse = std::nan("");
    return r;
  }
  const double width = (hi - lo) / double(bins);
  std::vector<double> counts(bins, 0.0);
  for (const double v : samples) {
    const auto b = static_cast<std::size_t>((v - lo) / width);
    ++counts[std::min(b, bins - 1)];
  }
  const double sd = std::sqrt(m.variance);
  double mse = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double density = counts[b] / (double(n) * width);
    const double centre = lo + (double(b) + 0.5) * width;
    const double u = (centre - m.mean) / sd;
    const double pdf = std::exp(-0.5 * u * u) / (sd * std::sqrt(2.0 * std::numbers::pi));
    mse += (density - pdf) * (density - pdf);
  }
  r.mse = mse / double(bins);
  return r;
}

std::vector<DimensionFit> fit_report(const Tensor& samples, std::size_t bins, const KsOptions& options) {
  std::vector<DimensionFit> out;
  std::vector<double> col(samples.rows());
  for (std::size_t j = 0; j < samples.cols(); ++j) {
    for (std::size_t r = 0; r < samples.rows(); ++r) col[r] = samples.at(r, j);
    DimensionFit f;
    f.dimension = j;
    f.ks = ks_test(col, options);
    f.mse = f.ks.degenerate ? std::nan("") : normal_fit_mse(col, bins).mse;
    out.push_back(f);
  }
  return out;
}

double reject_rate(const std::vector<DimensionFit>& fits) {
  std::size_t tested = 0, rejected = 0;
  for (const auto& f : fits) {
    if (f.ks.degenerate) continue;
    ++tested;
    rejected += f.ks.reject;
  }
  return tested ? double(rejected) / double(tested) : std::nan("");
}

std::string format_fit_csv(const std::vector<DimensionFit>& fits) {
  std::string out = "dimension,mse,ks_statistic,ks_critical,reject,degenerate\n";
  for (const auto& f : fits) {
    out += std::to_string(f.dimension) + "," + csv_number(f.mse) + "," + csv_number(f.ks.statistic) + "," +
           csv_number(f.ks.critical) + "," + (f.ks.reject ? "1" : "0") + "," + (f.ks.degenerate ? "1" : "0") + "\n";
  }
  return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: vector lengths differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::string_view to_string(SimilarityMode mode) {
  for (const auto& [m, name] : kModeNames)
    if (m == mode) return name;
  return "unknown";
}

SimilarityMode parse_similarity_mode(std::string_view tag) {
  for (const auto& [m, name] : kModeNames)
    if (name == tag) return m;
  throw Error("unknown similarity mode '" + std::string(tag) + "'");
}

SimilarityReport cosine_suite(std::span<const LatentPair> items, SimilarityMode mode) {
  SimilarityReport report;
  std::size_t num_classes = 0;
  for (const auto& it : items) {
    if (!it.z.same_shape(it.zp)) throw ShapeError("cosine_suite: z and zp shapes differ");
    num_classes = std::max(num_classes, it.label + 1);
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<std::size_t> members, others;
    for (std::size_t i = 0; i < items.size(); ++i) (items[i].label == k ? members : others).push_back(i);
    if (members.empty()) continue;

    ClassSimilarity row{mode, k, 0, 0.0, 0.0};
    std::size_t count_zp = 0;
    switch (mode) {
      case SimilarityMode::intra_class:
        for (std::size_t a = 0; a < members.size(); ++a)
          for (std::size_t b = a + 1; b < members.size(); ++b) {
            const auto& x = items[members[a]];
            const auto& y = items[members[b]];
            row.z += frame_cosine_sum(x.z, y.z, 0, row.pairs);
            row.zp += frame_cosine_sum(x.zp, y.zp, 0, count_zp);
          }
        break;
      case SimilarityMode::intra_video:
        for (const auto i : members) {
          row.z += frame_cosine_sum(items[i].z, items[i].z, 1, row.pairs);
          row.zp += frame_cosine_sum(items[i].zp, items[i].zp, 1, count_zp);
        }
        break;
      case SimilarityMode::inter_class:
        for (const auto a : members)
          for (const auto b : others) {
            row.z += frame_cosine_sum(items[a].z, items[b].z, 0, row.pairs);
            row.zp += frame_cosine_sum(items[a].zp, items[b].zp, 0, count_zp);
          }
        break;
    }
    if (row.pairs == 0) {
      report.notices.push_back(std::string(to_string(mode)) + ": class " + std::to_string(k) +
                               " skipped (not enough clips or frames)");
      continue;
    }
    row.z /= double(row.pairs);
    row.zp /= double(count_zp);
    report.rows.push_back(row);
  }
  return report;
}

std::string format_similarity_csv(const SimilarityReport& report) {
  std::string out = "mode,class,pairs,similarity_z,similarity_zp\n";
  for (const auto& r : report.rows) {
    out += std::string(to_string(r.mode)) + "," + std::to_string(r.label) + "," + std::to_string(r.pairs) + "," +
           csv_number(r.z) + "," + csv_number(r.zp) + "\n";
  }
  return out;
}

double recall_at_k(const LabeledEmbeddings& gallery, const LabeledEmbeddings& queries, std::size_t k) {
  const std::size_t g = gallery.embeddings.rows();
  if (g == 0 || gallery.labels.empty()) throw Error("recall_at_k: empty gallery");
  if (k == 0) throw Error("recall_at_k: K must be at least 1");
  if (gallery.labels.size() != g || queries.labels.size() != queries.embeddings.rows()) {
    throw ShapeError("recall_at_k: label count does not match embedding rows");
  }
  if (queries.labels.empty()) return std::nan("");
  std::size_t hits = 0;
  std::vector<double> dist(g);
  std::vector<std::size_t> order(g);
  for (std::size_t q = 0; q < queries.labels.size(); ++q) {
    for (std::size_t i = 0; i < g; ++i) dist[i] = 1.0 - cosine(queries.embeddings.row(q), gallery.embeddings.row(i));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    const std::size_t top = std::min(k, g);
    for (std::size_t r = 0; r < top; ++r) {
      if (gallery.labels[order[r]] == queries.labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return double(hits) / double(queries.labels.size());
}

double linear_probe(const LabeledEmbeddings& train, const LabeledEmbeddings& test, const ProbeConfig& config) {
  const std::size_t n = train.embeddings.rows(), e = train.embeddings.cols();
  if (train.labels.size() != n || test.labels.size() != test.embeddings.rows()) {
    throw ShapeError("linear_probe: label count does not match feature rows");
  }
  if (test.embeddings.rows() && test.embeddings.cols() != e) throw ShapeError("linear_probe: feature widths differ");
  std::size_t classes = 0;
  for (const auto l : train.labels) classes = std::max(classes, l + 1);
  for (const auto l : test.labels) classes = std::max(classes, l + 1);
  {
    std::vector<bool> seen(classes, false);
    for (const auto l : train.labels) seen[l] = true;
    if (std::count(seen.begin(), seen.end(), true) < 2) throw Error("linear_probe needs at least 2 classes");
  }

  // Standardize with training statistics; constant features become zero.
  std::vector<double> mean(e, 0.0), scale(e, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < e; ++j) mean[j] += train.embeddings.at(r, j);
  for (auto& m : mean) m /= double(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < e; ++j) scale[j] += std::pow(train.embeddings.at(r, j) - mean[j], 2);
  for (auto& s : scale) s = s > 0.0 ? 1.0 / std::sqrt(s / double(n)) : 0.0;
  const auto standardized = [&](const Tensor& t) {
    std::vector<double> out(t.rows() * e);
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t j = 0; j < e; ++j) out[r * e + j] = (t.at(r, j) - mean[j]) * scale[j];
    return out;
  };
  const auto x = standardized(train.embeddings);

  Rng rng = Rng(config.seed).substream("probe");
  std::vector<double> w(e * classes), b(classes, 0.0), gw(e * classes), gb(classes), p(classes);
  for (auto& v : w) v = 0.01 * rng.normal();

  const auto logits = [&](const double* row, std::vector<double>& out) {
    for (std::size_t c = 0; c < classes; ++c) {
      double s = b[c];
      for (std::size_t j = 0; j < e; ++j) s += row[j] * w[j * classes + c];
      out[c] = s;
    }
  };
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double* row = &x[r * e];
      logits(row, p);
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0.0;
      for (auto& v : p) z += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = p[c] / z - (train.labels[r] == c ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t j = 0; j < e; ++j) gw[j * classes + c] += g * row[j];
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config.learning_rate * (gw[i] / double(n) + config.weight_decay * w[i]);
    for (std::size_t c = 0; c < classes; ++c) b[c] -= config.learning_rate * gb[c] / double(n);
  }

  const auto xt = standardized(test.embeddings);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < test.labels.size(); ++r) {
    logits(&xt[r * e], p);
    const auto pred = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    correct += pred == test.labels[r];
  }
  return test.labels.empty() ? std::nan("") : double(correct) / double(test.labels.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error("pearson: lengths differ");
  if (x.size() < 3) throw Error("pearson needs at least 3 points");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double motion_proportion(const VideoClip& clip, double threshold) {
  if (clip.length() < 2) throw Error("motion_proportion needs at least 2 frames");
  if (threshold < 0.0) throw Error("motion_proportion threshold must be non-negative");
  const std::size_t pixels = clip.height() * clip.width(), ch = clip.channels();
  double total = 0.0;
  for (std::size_t l = 1; l < clip.length(); ++l) {
    const auto a = clip.frame(l - 1), b = clip.frame(l);
    std::size_t moving = 0;
    for (std::size_t p = 0; p < pixels; ++p) {
      double mx = 0.0;
      for (std::size_t c = 0; c < ch; ++c) mx = std::max(mx, std::abs(double(b[p * ch + c]) - a[p * ch + c]));
      moving += mx > threshold;
    }
    total += double(moving) / double(pixels);
  }
  return total / double(clip.length() - 1);
}

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace s2vc
