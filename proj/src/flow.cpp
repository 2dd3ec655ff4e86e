#include "s2vc/flow.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "s2vc/rng.hpp"

namespace s2vc {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

using Vec = std::vector<double>;

Vec widen(const Tensor& t) { return Vec(t.values().begin(), t.values().end()); }

Tensor narrow(const Vec& v) {
  Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
  return t;
}

void check_dim(const Tensor& x, std::size_t d, const char* what) {
  if (x.size() != d) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(d) + " values, got " +
                     std::to_string(x.size()));
  }
}

struct Conditioned {
  Vec s;  // bounded log-scales
  Vec t;
};

Conditioned condition(const CouplingLayer& layer, const Vec& xa, std::size_t layer_index) {
  const std::size_t h_in = xa.size();
  const std::size_t hidden = layer.w1.cols();
  const std::size_t out = layer.w2.cols();
  const std::size_t nb = out / 2;
  Vec h(hidden);
  for (std::size_t j = 0; j < hidden; ++j) h[j] = layer.b1[j];
  for (std::size_t i = 0; i < h_in; ++i) {
    const double xi = xa[i];
    const float* wr = layer.w1.data().data() + i * hidden;
    for (std::size_t j = 0; j < hidden; ++j) h[j] += xi * static_cast<double>(wr[j]);
  }
  for (auto& v : h) v = std::tanh(v);
  Vec o(out);
  for (std::size_t j = 0; j < out; ++j) o[j] = layer.b2[j];
  for (std::size_t i = 0; i < hidden; ++i) {
    const double hi = h[i];
    const float* wr = layer.w2.data().data() + i * out;
    for (std::size_t j = 0; j < out; ++j) o[j] += hi * static_cast<double>(wr[j]);
  }
  Conditioned c{Vec(nb), Vec(nb)};
  for (std::size_t j = 0; j < nb; ++j) {
    c.s[j] = layer.s_max * std::tanh(o[j]);
    c.t[j] = o[nb + j];
    if (!std::isfinite(c.s[j]) || !std::isfinite(c.t[j])) {
      throw FlowError(layer_index, "non-finite conditioner output");
    }
  }
  return c;
}

void check_layer(const CouplingLayer& layer, std::size_t layer_index) {
  const auto pass = layer.pass_indices().size();
  const auto trans = layer.dim() - pass;
  if (layer.w1.rows() != pass || layer.b1.size() != layer.w1.cols() || layer.w2.rows() != layer.w1.cols() ||
      layer.w2.cols() != 2 * trans || layer.b2.size() != 2 * trans) {
    throw FlowError(layer_index, "conditioner shapes do not match mask");
  }
}

double coupling_forward_inplace(Vec& x, const CouplingLayer& layer, std::size_t layer_index) {
  const auto pass = layer.pass_indices();
  const auto trans = layer.transformed_indices();
  Vec xa(pass.size());
  for (std::size_t i = 0; i < pass.size(); ++i) xa[i] = x[pass[i]];
  const auto c = condition(layer, xa, layer_index);
  double logdet = 0.0;
  for (std::size_t j = 0; j < trans.size(); ++j) {
    x[trans[j]] = x[trans[j]] * std::exp(c.s[j]) + c.t[j];
    logdet += c.s[j];
  }
  return logdet;
}

void coupling_inverse_inplace(Vec& y, const CouplingLayer& layer, std::size_t layer_index) {
  const auto pass = layer.pass_indices();
  const auto trans = layer.transformed_indices();
  Vec ya(pass.size());
  for (std::size_t i = 0; i < pass.size(); ++i) ya[i] = y[pass[i]];
  const auto c = condition(layer, ya, layer_index);
  for (std::size_t j = 0; j < trans.size(); ++j) {
    y[trans[j]] = (y[trans[j]] - c.t[j]) * std::exp(-c.s[j]);
  }
}

void check_finite(const Vec& v, std::size_t layer_index) {
  for (const double x : v) {
    if (!std::isfinite(x)) throw FlowError(layer_index, "non-finite intermediate");
  }
}

// Stays in double between layers; only the public entry points narrow.
double forward_inplace(Vec& v, const FlowModel& model) {
  double logdet = 0.0;
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const auto* c = std::get_if<CouplingLayer>(&layers[i])) {
      logdet += coupling_forward_inplace(v, *c, i);
    } else {
      const auto& perm = std::get<PermutationLayer>(layers[i]).perm;
      Vec next(v.size());
      for (std::size_t k = 0; k < perm.size(); ++k) next[k] = v[perm[k]];
      v.swap(next);
    }
    check_finite(v, i);
  }
  return logdet;
}

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

}  // namespace

std::vector<std::size_t> CouplingLayer::pass_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> CouplingLayer::transformed_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) out.push_back(i);
  return out;
}

std::vector<std::uint8_t> alternating_mask(std::size_t dim, std::size_t parity) {
  std::vector<std::uint8_t> mask(dim, 0);
  std::size_t ones = 0;
  for (std::size_t i = parity % 2; i < dim && ones < dim / 2; i += 2, ++ones) mask[i] = 1;
  return mask;
}

FlowModel::FlowModel(std::size_t dim, std::vector<FlowLayer> layers, std::uint64_t seed)
    : dim_(dim), seed_(seed), layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (const auto* c = std::get_if<CouplingLayer>(&layers_[i])) {
      if (c->dim() != dim_) throw FlowError(i, "mask length differs from model dimension");
      check_layer(*c, i);
    } else {
      const auto& p = std::get<PermutationLayer>(layers_[i]);
      std::vector<bool> seen(dim_, false);
      if (p.perm.size() != dim_) throw FlowError(i, "permutation length differs from model dimension");
      for (const auto v : p.perm) {
        if (v >= dim_ || seen[v]) throw FlowError(i, "not a permutation");
        seen[v] = true;
      }
    }
  }
}

FlowModel FlowModel::identity(const FlowArchitecture& arch, std::uint64_t seed) {
  if (arch.dim < 2) throw Error("flow dimension must be at least 2");
  Rng rng = Rng(seed).substream("flow-init");
  std::vector<FlowLayer> layers;
  for (std::size_t k = 0; k < arch.couplings; ++k) {
    CouplingLayer c;
    c.mask = alternating_mask(arch.dim, k % 2);
    c.s_max = arch.s_max;
    const std::size_t pass = c.pass_indices().size();
    const std::size_t trans = arch.dim - pass;
    c.w1 = random_matrix(rng, pass, arch.hidden, 1.0 / std::sqrt(static_cast<double>(pass)));
    c.b1 = Tensor({1, arch.hidden});
    c.w2 = Tensor({arch.hidden, 2 * trans});
    c.b2 = Tensor({1, 2 * trans});
    layers.emplace_back(std::move(c));
  }
  return FlowModel(arch.dim, std::move(layers), seed);
}

std::vector<std::pair<std::string, Tensor*>> FlowModel::named_parameters() {
  fingerprint_cache_.clear();
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* c = std::get_if<CouplingLayer>(&layers_[i])) {
      const std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "w1", &c->w1);
      out.emplace_back(p + "b1", &c->b1);
      out.emplace_back(p + "w2", &c->w2);
      out.emplace_back(p + "b2", &c->b2);
    }
  }
  return out;
}

std::string FlowModel::fingerprint() const {
  if (!fingerprint_cache_.empty()) return fingerprint_cache_;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(format_flow_checkpoint(*this))));
  fingerprint_cache_ = buf;
  return fingerprint_cache_;
}

LayerOutput coupling_forward(const Tensor& x, const CouplingLayer& layer, std::size_t layer_index) {
  check_dim(x, layer.dim(), "coupling_forward");
  check_layer(layer, layer_index);
  Vec v = widen(x);
  LayerOutput out;
  out.logdet = coupling_forward_inplace(v, layer, layer_index);
  check_finite(v, layer_index);
  out.y = narrow(v);
  return out;
}

Tensor coupling_inverse(const Tensor& y, const CouplingLayer& layer, std::size_t layer_index) {
  check_dim(y, layer.dim(), "coupling_inverse");
  check_layer(layer, layer_index);
  Vec v = widen(y);
  coupling_inverse_inplace(v, layer, layer_index);
  check_finite(v, layer_index);
  return narrow(v);
}

LayerOutput flow_forward(const Tensor& x, const FlowModel& model) {
  check_dim(x, model.dim(), "flow_forward");
  Vec v = widen(x);
  const double logdet = forward_inplace(v, model);
  return {narrow(v), logdet};
}

std::pair<std::vector<double>, double> flow_forward_f64(std::span<const double> x, const FlowModel& model) {
  if (x.size() != model.dim()) throw ShapeError("flow_forward_f64: dimension mismatch");
  Vec v(x.begin(), x.end());
  const double logdet = forward_inplace(v, model);
  return {std::move(v), logdet};
}

Tensor flow_inverse(const Tensor& z, const FlowModel& model) {
  check_dim(z, model.dim(), "flow_inverse");
  Vec v = widen(z);
  const auto& layers = model.layers();
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (const auto* c = std::get_if<CouplingLayer>(&layers[i])) {
      coupling_inverse_inplace(v, *c, i);
    } else {
      const auto& perm = std::get<PermutationLayer>(layers[i]).perm;
      Vec prev(v.size());
      for (std::size_t k = 0; k < perm.size(); ++k) prev[perm[k]] = v[k];
      v.swap(prev);
    }
    check_finite(v, i);
  }
  return narrow(v);
}

double standard_normal_log_density(std::span<const double> z) {
  double sq = 0.0;
  for (const double v : z) sq += v * v;
  return -0.5 * static_cast<double>(z.size()) * kLog2Pi - 0.5 * sq;
}

double log_likelihood(const Tensor& x, const FlowModel& model) {
  check_dim(x, model.dim(), "log_likelihood");
  Vec v = widen(x);
  const double logdet = forward_inplace(v, model);
  return standard_normal_log_density(v) + logdet;
}

double mean_nll(const Tensor& data, const FlowModel& model) {
  const std::size_t n = data.rows(), d = data.cols();
  if (d != model.dim()) throw ShapeError("mean_nll: data has " + std::to_string(d) + " columns");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    Tensor x({d}, std::vector<float>(data.row(r).begin(), data.row(r).end()));
    total -= log_likelihood(x, model);
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------

NllGraph::NllGraph(const FlowModel& model) {
  const std::size_t d = model.dim();
  Graph& g = graph_;
  const auto& layers = model.layers();

  // Choose the input column order so the first coupling splits into two
  // contiguous ranges; alternating masks then stay contiguous throughout.
  order_.resize(d);
  for (std::size_t i = 0; i < d; ++i) order_[i] = i;
  for (const auto& layer : layers) {
    if (const auto* c = std::get_if<CouplingLayer>(&layer)) {
      order_ = c->pass_indices();
      for (const auto t : c->transformed_indices()) order_.push_back(t);
      break;
    }
  }

  input_order_ = order_;
  auto x = g.input("x");
  std::vector<Graph::NodeId> log_scales;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    if (const auto* perm = std::get_if<PermutationLayer>(&layers[li])) {
      std::vector<std::size_t> inverse(d);
      for (std::size_t k = 0; k < d; ++k) inverse[perm->perm[k]] = k;
      for (auto& o : order_) o = inverse[o];
      continue;
    }
    const auto& c = std::get<CouplingLayer>(layers[li]);
    const auto pass = c.pass_indices();
    const auto trans = c.transformed_indices();

    std::vector<std::size_t> position(d);
    for (std::size_t p = 0; p < d; ++p) position[order_[p]] = p;
    auto contiguous = [&](const std::vector<std::size_t>& idx) {
      for (std::size_t k = 1; k < idx.size(); ++k)
        if (position[idx[k]] != position[idx[0]] + k) return false;
      return true;
    };
    if (!contiguous(pass) || !contiguous(trans)) {
      // Reorder columns to [pass | trans] with a constant permutation matrix.
      std::vector<std::size_t> next = pass;
      next.insert(next.end(), trans.begin(), trans.end());
      Tensor64 p({d, d});
      for (std::size_t col = 0; col < d; ++col) p[position[next[col]] * d + col] = 1.0;
      x = g.matmul(x, g.constant(std::move(p)));
      order_ = next;
      for (std::size_t q = 0; q < d; ++q) position[order_[q]] = q;
    }
    const std::size_t pa = position[pass.front()];
    const std::size_t pb = position[trans.front()];
    const auto xa = g.slice(x, pa, pa + pass.size());
    const auto xb = g.slice(x, pb, pb + trans.size());

    const std::string prefix = "layer" + std::to_string(li) + ".";
    const auto w1 = g.parameter(prefix + "w1", c.w1);
    const auto b1 = g.parameter(prefix + "b1", c.b1);
    const auto w2 = g.parameter(prefix + "w2", c.w2);
    const auto b2 = g.parameter(prefix + "b2", c.b2);
    const auto hidden = g.tanh(g.add(g.matmul(xa, w1), b1));
    const auto o = g.add(g.matmul(hidden, w2), b2);
    const std::size_t nb = trans.size();
    const auto s = g.scale(g.tanh(g.slice(o, 0, nb)), c.s_max);
    const auto t = g.slice(o, nb, 2 * nb);
    const auto yb = g.add(g.mul(xb, g.exp(s)), t);
    log_scales.push_back(g.sum(s, Graph::Axis::cols));
    x = pa < pb ? g.concat({xa, yb}) : g.concat({yb, xa});
  }

  // Per-sample NLL (n x 1) so the batch mean does not depend on a fixed n.
  auto per_row = g.scale(g.sum(g.mul(x, x), Graph::Axis::cols), 0.5);
  for (const auto s : log_scales) per_row = g.add(per_row, g.scale(s, -1.0));
  const auto nll = g.mean(per_row);
  graph_.set_output(g.add(nll, g.constant(Tensor64::scalar(0.5 * static_cast<double>(d) * kLog2Pi))));
}

Tensor NllGraph::arrange(const Tensor& batch) const {
  const std::size_t n = batch.rows(), d = batch.cols();
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t p = 0; p < d; ++p) out[r * d + p] = batch[r * d + input_order_[p]];
  return out;
}

void NllGraph::store(FlowModel& model) const {
  for (auto& [name, tensor] : model.named_parameters()) *tensor = graph_.parameter_value(name);
}


// ---------------------------------------------------------------------------

TrainResult train_mle(const Tensor& data, const TrainConfig& config) {
  FlowArchitecture arch = config.arch;
  arch.dim = data.cols();
  return train_mle(data, FlowModel::identity(arch, config.seed), config);
}

TrainResult train_mle(const Tensor& data, FlowModel initial, const TrainConfig& config) {
  const std::size_t n = data.rows(), d = data.cols();
  if (d != initial.dim()) {
    throw ShapeError("train_mle: data has " + std::to_string(d) + " columns, model expects " +
                     std::to_string(initial.dim()));
  }
  if (config.batch_size == 0 || config.learning_rate <= 0.0 || config.clip_norm <= 0.0) {
    throw Error("train_mle: batch size, learning rate and clip norm must be positive");
  }
  if (config.epochs > 0 && n < 2 * config.batch_size) {
    throw Error("train_mle: need at least " + std::to_string(2 * config.batch_size) + " samples, got " +
                std::to_string(n));
  }

  TrainResult result;
  try {
    result.initial_nll = mean_nll(data, initial);
  } catch (const FlowError&) {
    // Non-finite samples; the first affected batch reports where.
    result.initial_nll = std::numeric_limits<double>::quiet_NaN();
  }
  result.model = std::move(initial);
  if (config.epochs == 0) {
    result.final_nll = result.initial_nll;
    return result;
  }

  NllGraph nll(result.model);
  Graph& g = nll.graph();
  const auto arranged = nll.arrange(data);
  const auto names = g.parameter_names();
  Rng rng = Rng(config.seed).substream("train-mle");
  FlowModel last_good = result.model;

  for (std::size_t e = 0; e < config.epochs; ++e) {
    const std::size_t epoch = config.first_epoch + e;
    Rng epoch_rng = rng.substream(static_cast<std::uint64_t>(epoch));
    const auto order = epoch_rng.permutation(n);
    double epoch_total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
      const std::size_t bs = std::min(config.batch_size, n - start);
      Tensor batch({bs, d});
      for (std::size_t r = 0; r < bs; ++r) {
        const auto src = arranged.row(order[start + r]);
        for (std::size_t c = 0; c < d; ++c) {
          batch[r * d + c] =
              static_cast<float>(src[c] + (epoch_rng.uniform() - 0.5) * config.dequant_amplitude);
        }
      }
      std::map<std::string, Tensor64> grads;
      double loss = 0.0;
      try {
        g.eval({{"x", batch}});
        loss = g.scalar_output();
        if (!std::isfinite(loss)) throw Error("non-finite loss");
        grads = g.backward();
      } catch (const Error& err) {
        throw TrainingError(epoch, batch_index, last_good, err.what());
      }
      epoch_total += loss * static_cast<double>(bs);

      double sq = 0.0;
      for (const auto& [name, grad] : grads)
        for (const double v : grad.values()) sq += v * v;
      const double gnorm = std::sqrt(sq);
      if (!std::isfinite(gnorm)) throw TrainingError(epoch, batch_index, last_good, "non-finite gradient");
      const double factor = config.learning_rate * (gnorm > config.clip_norm ? config.clip_norm / gnorm : 1.0);
      for (const auto& name : names) {
        Tensor& p = g.parameter_value(name);
        const auto& grad = grads.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<float>(p[i] - factor * grad[i]);
      }
    }
    result.epoch_nll.push_back(epoch_total / static_cast<double>(n));
    nll.store(result.model);
    last_good = result.model;
    if (config.checkpoint_path && config.checkpoint_every > 0 && (e + 1) % config.checkpoint_every == 0) {
      save_flow(result.model, *config.checkpoint_path);
    }
  }
  result.final_nll = mean_nll(data, result.model);
  return result;
}

// ---------------------------------------------------------------------------

std::string format_flow_checkpoint(const FlowModel& model) {
  ParamFile file;
  file.magic = "S2VC-FLOW v1";
  file.dim = model.dim();
  file.layers = model.layers().size();
  file.seed = model.seed();
  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    if (const auto* c = std::get_if<CouplingLayer>(&layers[i])) {
      Tensor mask({1, c->dim()});
      for (std::size_t k = 0; k < c->dim(); ++k) mask[k] = c->mask[k];
      file.params.push_back({p + "mask", std::move(mask)});
      file.params.push_back({p + "s_max", Tensor({1, 1}, std::vector<float>{static_cast<float>(c->s_max)})});
      for (const auto& [name, t] : {std::pair{"w1", &c->w1}, {"b1", &c->b1}, {"w2", &c->w2}, {"b2", &c->b2}}) {
        file.params.push_back({p + name, t->reshaped({t->rows(), t->cols()})});
      }
    } else {
      const auto& perm = std::get<PermutationLayer>(layers[i]).perm;
      Tensor t({1, perm.size()});
      for (std::size_t k = 0; k < perm.size(); ++k) t[k] = static_cast<float>(perm[k]);
      file.params.push_back({p + "perm", std::move(t)});
    }
  }
  return format_param_file(file);
}

FlowModel parse_flow_checkpoint(std::string_view text) {
  const ParamFile file = parse_param_file(text, "S2VC-FLOW v1");
  std::vector<FlowLayer> layers;
  for (std::size_t i = 0; i < file.layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    if (file.has(p + "perm")) {
      const Tensor& t = file.get(p + "perm");
      PermutationLayer perm;
      for (const float v : t.values()) {
        if (v < 0 || v != std::floor(v)) throw CheckpointError(0, p + "perm holds a non-index value");
        perm.perm.push_back(static_cast<std::size_t>(v));
      }
      layers.emplace_back(std::move(perm));
      continue;
    }
    CouplingLayer c;
    for (const float v : file.get(p + "mask").values()) {
      if (v != 0.0f && v != 1.0f) throw CheckpointError(0, p + "mask must be binary");
      c.mask.push_back(static_cast<std::uint8_t>(v));
    }
    c.s_max = file.get(p + "s_max")[0];
    c.w1 = file.get(p + "w1");
    c.b1 = file.get(p + "b1");
    c.w2 = file.get(p + "w2");
    c.b2 = file.get(p + "b2");
    layers.emplace_back(std::move(c));
  }
  if (file.params.size() != [&] {
        std::size_t expected = 0;
        for (const auto& l : layers) expected += std::holds_alternative<CouplingLayer>(l) ? 6 : 1;
        return expected;
      }()) {
    throw CheckpointError(0, "unexpected parameters beyond the declared layers");
  }
  try {
    return FlowModel(file.dim, std::move(layers), file.seed);
  } catch (const FlowError& e) {
    throw CheckpointError(0, e.what());
  }
}

void save_flow(const FlowModel& model, const std::filesystem::path& path) {
  write_text_file(path, format_flow_checkpoint(model));
}

FlowModel load_flow(const std::filesystem::path& path) { return parse_flow_checkpoint(read_text_file(path)); }

}  // namespace s2vc
