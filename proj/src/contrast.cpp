#include "s2vc/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2vc/rng.hpp"

namespace s2vc {
namespace {

constexpr const char* kParamNames[] = {"w1", "b1", "w2", "b2", "wp", "bp"};

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = static_cast<float>(sd * rng.normal());
  return t;
}

void check_augment(const AugmentConfig& c) {
  if (!(c.crop_min > 0.0 && c.crop_min <= c.crop_max && c.crop_max <= 1.0)) {
    throw Error("crop fraction range must satisfy 0 < min <= max <= 1");
  }
  for (const double p : {c.flip_p, c.jitter_p, c.blur_p})
    if (!(p >= 0.0 && p <= 1.0)) throw Error("augmentation probabilities must lie in [0, 1]");
  if (c.blur_kernel == 0 || c.blur_kernel % 2 == 0) throw Error("blur kernel must be odd");
  if (c.brightness < 0.0 || c.contrast < 0.0 || c.contrast > 1.0) throw Error("jitter amplitudes out of range");
}

/// Bilinear resample of the window [y0, y0 + ch) x [x0, x0 + cw) to the full frame.
VideoClip crop_resize(const VideoClip& clip, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw) {
  const std::size_t h = clip.height(), w = clip.width(), c = clip.channels();
  if (ch == h && cw == w) return clip;
  struct Tap {
    std::size_t lo, hi;
    double t;
  };
  const auto taps = [](std::size_t n_out, std::size_t origin, std::size_t n_in) {
    std::vector<Tap> out(n_out);
    const double ratio = double(n_in) / double(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      const double src = std::clamp((double(i) + 0.5) * ratio - 0.5, 0.0, double(n_in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      out[i] = {origin + lo, origin + std::min(lo + 1, n_in - 1), src - double(lo)};
    }
    return out;
  };
  const auto ty = taps(h, y0, ch), tx = taps(w, x0, cw);
  VideoClip out(clip.length(), h, w, c);
  out.set_fps(clip.fps());
  for (std::size_t l = 0; l < clip.length(); ++l)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < c; ++k) {
          const auto& a = ty[y];
          const auto& b = tx[x];
          const double top = std::lerp(double(clip.at(l, a.lo, b.lo, k)), double(clip.at(l, a.lo, b.hi, k)), b.t);
          const double bot = std::lerp(double(clip.at(l, a.hi, b.lo, k)), double(clip.at(l, a.hi, b.hi, k)), b.t);
          out.at(l, y, x, k) = static_cast<float>(std::lerp(top, bot, a.t));
        }
  return out;
}

VideoClip box_blur(const VideoClip& clip, std::size_t kernel) {
  const std::size_t h = clip.height(), w = clip.width(), c = clip.channels();
  const auto r = static_cast<long>(kernel / 2);
  VideoClip out(clip.length(), h, w, c);
  out.set_fps(clip.fps());
  for (std::size_t l = 0; l < clip.length(); ++l)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < c; ++k) {
          double s = 0.0;
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const auto yy = static_cast<std::size_t>(std::clamp(long(y) + dy, 0L, long(h) - 1));
              const auto xx = static_cast<std::size_t>(std::clamp(long(x) + dx, 0L, long(w) - 1));
              s += clip.at(l, yy, xx, k);
            }
          out.at(l, y, x, k) = static_cast<float>(s / double(kernel * kernel));
        }
  return out;
}

/// rows x cols = a (rows x inner) * b (inner x cols) + bias (1 x cols), in double.
std::vector<double> affine(const std::vector<double>& a, std::size_t rows, std::size_t inner, const Tensor& b,
                           const Tensor& bias) {
  const std::size_t cols = b.cols();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = &out[r * cols];
    for (std::size_t j = 0; j < cols; ++j) o[j] = bias.values()[j];
    for (std::size_t k = 0; k < inner; ++k) {
      const double v = a[r * inner + k];
      if (v == 0.0) continue;
      const float* brow = &b.values()[k * cols];
      for (std::size_t j = 0; j < cols; ++j) o[j] += v * brow[j];
    }
  }
  return out;
}

void check_unit(std::span<const double> v, const char* what) {
  double n = 0.0;
  for (const double x : v) n += x * x;
  if (std::abs(std::sqrt(n) - 1.0) > 1e-4) throw Error(std::string(what) + " must be unit-norm");
}

void apply_tanh(std::vector<double>& v) {
  for (auto& x : v) x = std::tanh(x);
}

}  // namespace

VideoClip augment(const VideoClip& clip, const AugmentConfig& config, std::uint64_t seed) {
  check_augment(config);
  Rng rng = Rng(seed).substream("augment");
  const double frac = rng.uniform(config.crop_min, config.crop_max);
  const std::size_t h = clip.height(), w = clip.width();
  const auto ch = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * double(h))), 1, h);
  const auto cw = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * double(w))), 1, w);
  const std::size_t y0 = rng.below(h - ch + 1), x0 = rng.below(w - cw + 1);
  const bool flip = rng.bernoulli(config.flip_p);
  const bool jitter = rng.bernoulli(config.jitter_p);
  const double bright = rng.uniform(-config.brightness, config.brightness);
  const double gain = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast);
  const bool blur = rng.bernoulli(config.blur_p);

  VideoClip out = crop_resize(clip, y0, x0, ch, cw);
  if (flip) {
    for (std::size_t l = 0; l < out.length(); ++l)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x)
          for (std::size_t k = 0; k < out.channels(); ++k) std::swap(out.at(l, y, x, k), out.at(l, y, w - 1 - x, k));
  }
  if (jitter) {
    for (auto& v : out.pixels()) v = static_cast<float>((double(v) - 0.5) * gain + 0.5 + bright);
  }
  if (blur && config.blur_kernel > 1) out = box_blur(out, config.blur_kernel);
  for (auto& v : out.pixels()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Tensor& EncoderParams::get(std::string_view name) {
  for (auto& t : tensors)
    if (t.name == name) return t.value;
  throw Error("encoder has no parameter '" + std::string(name) + "'");
}

const Tensor& EncoderParams::get(std::string_view name) const {
  return const_cast<EncoderParams*>(this)->get(name);
}

std::size_t EncoderParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

EncoderParams init_encoder_params(const EncoderConfig& c, std::uint64_t seed) {
  if (c.frame_dim == 0 || c.hidden == 0 || c.features == 0 || c.embed_dim == 0) {
    throw Error("encoder dimensions must be positive");
  }
  if (!(c.init_gain > 0.0)) throw Error("encoder init gain must be positive");
  Rng rng = Rng(seed).substream("encoder-init");
  EncoderParams p;
  const std::size_t in = c.input_dim();
  p.tensors.push_back({"w1", gaussian(rng, in, c.hidden, c.init_gain / std::sqrt(double(in)))});
  p.tensors.push_back({"b1", Tensor({1, c.hidden})});
  p.tensors.push_back({"w2", gaussian(rng, c.hidden, c.features, 1.0 / std::sqrt(double(c.hidden)))});
  p.tensors.push_back({"b2", Tensor({1, c.features})});
  p.tensors.push_back({"wp", gaussian(rng, c.features, c.embed_dim, 1.0 / std::sqrt(double(c.features)))});
  p.tensors.push_back({"bp", Tensor({1, c.embed_dim})});
  return p;
}

EncoderState EncoderState::create(const EncoderConfig& config, std::uint64_t seed) {
  EncoderState s;
  s.config = config;
  s.query = init_encoder_params(config, seed);
  s.key = s.query;
  s.seed = seed;
  return s;
}

Tensor encoder_input(const VideoClip& clip, const EncoderConfig& config) {
  if (clip.frame_size() != config.frame_dim) {
    throw ShapeError("clip frame size " + std::to_string(clip.frame_size()) + " does not match encoder input " +
                     std::to_string(config.frame_dim));
  }
  const std::size_t d = config.frame_dim, in = config.input_dim();
  Tensor x({clip.length(), in});
  for (std::size_t l = 0; l < clip.length(); ++l) {
    const auto f = clip.frame(l);
    for (std::size_t i = 0; i < d; ++i) {
      x.at(l, i) = f[i] - 0.5f;
      if (config.use_difference) x.at(l, d + i) = l == 0 ? 0.0f : f[i] - clip.frame(l - 1)[i];
    }
  }
  return x;
}

std::vector<double> backbone_features(const VideoClip& clip, const EncoderConfig& config,
                                      const EncoderParams& params) {
  const Tensor x = encoder_input(clip, config);
  const std::size_t len = x.rows(), in = x.cols();
  std::vector<double> h(x.values().begin(), x.values().end());
  h = affine(h, len, in, params.get("w1"), params.get("b1"));
  apply_tanh(h);
  h = affine(h, len, config.hidden, params.get("w2"), params.get("b2"));
  apply_tanh(h);
  std::vector<double> pooled(config.features, 0.0);
  for (std::size_t l = 0; l < len; ++l)
    for (std::size_t j = 0; j < config.features; ++j) pooled[j] += h[l * config.features + j];
  for (auto& v : pooled) v /= double(len);
  return pooled;
}

std::vector<double> encode_features(const VideoClip& clip, const EncoderConfig& config, const EncoderParams& params) {
  const auto pooled = backbone_features(clip, config, params);
  auto p = affine(pooled, 1, config.features, params.get("wp"), params.get("bp"));
  double sq = 0.0;
  for (const double v : p) sq += v * v;
  if (!(sq > 0.0) || !std::isfinite(sq)) throw Error("projection output has no finite direction");
  const double inv = std::exp(-0.5 * std::log(sq));
  for (auto& v : p) v *= inv;
  return p;
}

std::vector<double> encode_features(const VideoClip& clip, const EncoderState& state, EncoderSide side) {
  return encode_features(clip, state.config, side == EncoderSide::query ? state.query : state.key);
}

void FeatureQueue::push(std::span<const std::vector<double>> batch) {
  for (const auto& v : batch) {
    if (v.size() != dim_) throw ShapeError("queue entry has dimension " + std::to_string(v.size()));
    check_unit(v, "queue entries");
  }
  for (const auto& v : batch) {
    entries_.push_back(v);
    if (entries_.size() > capacity_) entries_.pop_front();
  }
}

Tensor FeatureQueue::transposed() const {
  Tensor t({dim_, entries_.size()});
  for (std::size_t j = 0; j < entries_.size(); ++j)
    for (std::size_t i = 0; i < dim_; ++i) t.at(i, j) = static_cast<float>(entries_[j][i]);
  return t;
}

InfoNceResult info_nce(std::span<const double> v, std::span<const double> vp, const FeatureQueue& queue, double tau) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  if (v.size() != vp.size() || (queue.size() && queue.dim() != v.size())) {
    throw ShapeError("info_nce: embedding dimensions differ");
  }
  check_unit(v, "v");
  check_unit(vp, "v_p");
  const auto dot = [&](std::span<const double> a) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * a[i];
    return s / tau;
  };
  std::vector<double> logits{dot(vp)};
  for (const auto& n : queue.entries()) logits.push_back(dot(n));
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (const double a : logits) z += std::exp(a - mx);
  InfoNceResult r;
  r.loss = std::max(0.0, mx + std::log(z) - logits[0]);
  // d loss / d v = (sum_k p_k u_k - vp) / tau with u_0 = vp and u_j = n_j.
  r.grad_v.assign(v.size(), 0.0);
  const double p0 = std::exp(logits[0] - mx) / z;
  for (std::size_t i = 0; i < v.size(); ++i) r.grad_v[i] = (p0 - 1.0) * vp[i];
  std::size_t j = 1;
  for (const auto& n : queue.entries()) {
    const double pj = std::exp(logits[j++] - mx) / z;
    for (std::size_t i = 0; i < v.size(); ++i) r.grad_v[i] += pj * n[i];
  }
  for (auto& g : r.grad_v) g /= tau;
  return r;
}

void momentum_update(EncoderState& state, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw Error("momentum must lie in [0, 1]");
  for (std::size_t t = 0; t < state.key.tensors.size(); ++t) {
    auto& k = state.key.tensors[t].value.values();
    const auto& q = state.query.tensors[t].value.values();
    if (k.size() != q.size()) throw ShapeError("momentum_update: encoder shapes differ");
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<float>(m * k[i] + (1.0 - m) * q[i]);
  }
}

ContrastiveGraph::ContrastiveGraph(const EncoderConfig& config, const EncoderParams& params, double tau,
                                   bool with_negatives) {
  if (!(tau > 0.0)) throw Error("temperature must be positive");
  auto& g = graph_;
  const auto x = g.input("x");
  const auto pool = g.input("pool");
  const auto keys = g.input("keys");
  const auto w1 = g.parameter("w1", params.get("w1"));
  const auto b1 = g.parameter("b1", params.get("b1"));
  const auto w2 = g.parameter("w2", params.get("w2"));
  const auto b2 = g.parameter("b2", params.get("b2"));
  const auto wp = g.parameter("wp", params.get("wp"));
  const auto bp = g.parameter("bp", params.get("bp"));
  (void)config;

  const auto h1 = g.tanh(g.add(g.matmul(x, w1), b1));
  const auto h2 = g.tanh(g.add(g.matmul(h1, w2), b2));
  const auto pooled = g.matmul(pool, h2);
  const auto proj = g.add(g.matmul(pooled, wp), bp);
  const auto inv_norm = g.exp(g.scale(g.log(g.sum(g.mul(proj, proj), Graph::Axis::cols)), -0.5));
  embeddings_ = g.mul(proj, inv_norm);

  const auto pos = g.scale(g.sum(g.mul(embeddings_, keys), Graph::Axis::cols), 1.0 / tau);
  auto logits = pos;
  if (with_negatives) {
    const auto neg = g.scale(g.matmul(embeddings_, g.input("queue_t")), 1.0 / tau);
    logits = g.concat({pos, neg});
  }
  const auto lse = g.log(g.sum(g.exp(logits), Graph::Axis::cols));
  g.set_output(g.mean(g.add(lse, g.scale(pos, -1.0))));
}

std::map<std::string, Tensor> ContrastiveGraph::make_inputs(std::span<const VideoClip> clips,
                                                            const EncoderConfig& config,
                                                            std::span<const std::vector<double>> keys,
                                                            const FeatureQueue* queue) {
  if (clips.empty() || clips.size() != keys.size()) throw Error("contrastive batch needs one key per clip");
  const std::size_t b = clips.size(), len = clips[0].length(), in = config.input_dim();
  Tensor x({b * len, in}), pool({b, b * len}), k({b, config.embed_dim});
  for (std::size_t i = 0; i < b; ++i) {
    if (clips[i].length() != len) throw ShapeError("contrastive batch clips differ in length");
    const Tensor xi = encoder_input(clips[i], config);
    std::copy(xi.values().begin(), xi.values().end(), x.values().begin() + long(i * len * in));
    for (std::size_t l = 0; l < len; ++l) pool.at(i, i * len + l) = static_cast<float>(1.0 / double(len));
    if (keys[i].size() != config.embed_dim) throw ShapeError("key dimension mismatch");
    for (std::size_t j = 0; j < config.embed_dim; ++j) k.at(i, j) = static_cast<float>(keys[i][j]);
  }
  std::map<std::string, Tensor> inputs{{"x", std::move(x)}, {"pool", std::move(pool)}, {"keys", std::move(k)}};
  if (queue) inputs.emplace("queue_t", queue->transposed());
  return inputs;
}

void ContrastiveGraph::load(const EncoderParams& params) {
  for (const auto& t : params.tensors) graph_.parameter_value(t.name) = t.value;
}

void ContrastiveGraph::store(EncoderParams& params) const {
  for (auto& t : params.tensors) t.value = graph_.parameter_value(t.name);
}

EncoderState pretrain(std::span<const VideoClip> clips, const FlowModel* flow, const PretrainConfig& cfg,
                      const std::function<void(std::size_t, double)>& on_step) {
  if (clips.empty()) throw Error("pretraining needs at least one clip");
  if (cfg.suppress && !flow) throw Error("suppressed positives need a trained flow");
  if (cfg.batch_size == 0) throw Error("batch size must be positive");
  if (!(cfg.tau > 0.0)) throw Error("temperature must be positive");
  if (cfg.queue_size == 0) throw Error("queue size must be positive");
  check_augment(cfg.augment);

  EncoderState state = EncoderState::create(cfg.encoder, cfg.seed);
  const Rng root(cfg.seed);

  // The dictionary starts full of random unit vectors.
  FeatureQueue queue(cfg.queue_size, cfg.encoder.embed_dim);
  {
    Rng qrng = root.substream("queue-init");
    std::vector<std::vector<double>> init;
    for (std::size_t i = 0; i < cfg.queue_size; ++i) {
      std::vector<double> v(cfg.encoder.embed_dim);
      double n = 0.0;
      for (auto& x : v) {
        x = qrng.normal();
        n += x * x;
      }
      for (auto& x : v) x /= std::sqrt(n);
      init.push_back(std::move(v));
    }
    queue.push(init);
  }

  ContrastiveGraph cg(cfg.encoder, state.query, cfg.tau, true);
  Rng rng = root.substream("pretrain");
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const auto train_step = [&](std::size_t step) {
    std::vector<VideoClip> views;
    std::vector<std::vector<double>> keys;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        order = rng.permutation(clips.size());
        cursor = 0;
      }
      const VideoClip& clip = clips[order[cursor++]];
      const std::uint64_t s1 = rng.next_u64(), s2 = rng.next_u64(), s3 = rng.next_u64();
      views.push_back(augment(clip, cfg.augment, s1));
      VideoClip positive = augment(clip, cfg.augment, s2);
      if (cfg.suppress) positive = s2vc_algorithm(positive, *flow, cfg.alpha, cfg.strategy, s3);
      keys.push_back(encode_features(positive, state.config, state.key));
    }

    cg.graph().eval(ContrastiveGraph::make_inputs(views, cfg.encoder, keys, &queue));
    const double loss = cg.graph().scalar_output();
    const auto grads = cg.graph().backward();
    if (!std::isfinite(loss)) throw PretrainError(step, "loss is not finite");

    double norm_sq = 0.0;
    for (const auto& [name, g] : grads)
      for (const double v : g.values()) norm_sq += v * v;
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw PretrainError(step, "gradient is not finite");
    const double factor = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    for (const auto& [name, g] : grads) {
      auto& p = cg.graph().parameter_value(name).values();
      for (std::size_t i = 0; i < p.size(); ++i)
        p[i] = static_cast<float>(p[i] - cfg.learning_rate * factor * g.values()[i]);
    }
    cg.store(state.query);
    momentum_update(state, cfg.momentum);
    queue.push(keys);
    state.loss_history.push_back(loss);
    if (on_step) on_step(step, loss);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    try {
      train_step(step);
    } catch (const PretrainError&) {
      throw;
    } catch (const Error& e) {
      throw PretrainError(step, e.what());
    }
  }
  return state;
}

std::string format_encoder_checkpoint(const EncoderState& state) {
  ParamFile file;
  file.magic = std::string(kEncoderMagic);
  file.dim = state.config.frame_dim;
  file.layers = 2;
  file.seed = state.seed;
  for (const auto& t : state.query.tensors) file.params.push_back({"query." + t.name, t.value});
  for (const auto& t : state.key.tensors) file.params.push_back({"key." + t.name, t.value});
  return format_param_file(file);
}

EncoderState parse_encoder_checkpoint(std::string_view text) {
  const ParamFile file = parse_param_file(text, kEncoderMagic);
  EncoderState state;
  state.seed = file.seed;
  for (const auto* side : {"query.", "key."}) {
    EncoderParams& p = std::string(side) == "query." ? state.query : state.key;
    for (const auto* name : kParamNames) {
      const std::string full = std::string(side) + name;
      if (!file.has(full)) throw CheckpointError(0, "missing parameter '" + full + "'");
      p.tensors.push_back({name, file.get(full)});
    }
  }
  auto& c = state.config;
  c.frame_dim = file.dim;
  const Tensor& w1 = state.query.get("w1");
  if (w1.rows() == 2 * file.dim) {
    c.use_difference = true;
  } else if (w1.rows() == file.dim) {
    c.use_difference = false;
  } else {
    throw CheckpointError(0, "w1 has " + std::to_string(w1.rows()) + " rows for frame dimension " +
                                 std::to_string(file.dim));
  }
  c.hidden = w1.cols();
  c.features = state.query.get("w2").cols();
  c.embed_dim = state.query.get("wp").cols();
  const auto expect = [&](const EncoderParams& p, const char* name, std::size_t r, std::size_t cols) {
    const Tensor& t = p.get(name);
    if (t.rows() != r || t.cols() != cols) throw CheckpointError(0, std::string("parameter ") + name + " has the wrong shape");
  };
  for (const auto* p : {&state.query, &state.key}) {
    expect(*p, "w1", c.input_dim(), c.hidden);
    expect(*p, "b1", 1, c.hidden);
    expect(*p, "w2", c.hidden, c.features);
    expect(*p, "b2", 1, c.features);
    expect(*p, "wp", c.features, c.embed_dim);
    expect(*p, "bp", 1, c.embed_dim);
  }
  return state;
}

void save_encoder(const EncoderState& state, const std::filesystem::path& path) {
  write_text_file(path, format_encoder_checkpoint(state));
}

EncoderState load_encoder(const std::filesystem::path& path) { return parse_encoder_checkpoint(read_text_file(path)); }

}  // namespace s2vc
