#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "s2vc/contrast.hpp"
#include "s2vc/rng.hpp"
#include "s2vc/synthvid.hpp"
#include "trained_flow.hpp"

using namespace s2vc;

namespace {

// Loss-drop ratio (last ten steps / first ten steps) of the default pretraining
// run on the 64-clip fixture, recorded as a regression value. The halving
// target is met by only some seeds (see README); the bound below guards
// against regressions rather than asserting it.
constexpr double kPinnedLossRatio = 0.534390;
constexpr double kLossRatioBound = 0.6;

VideoClip random_clip(std::uint64_t seed, std::size_t len, std::size_t h, std::size_t w, std::size_t c = 1) {
  Rng rng(seed);
  VideoClip clip(len, h, w, c);
  for (auto& v : clip.pixels()) v = static_cast<float>(rng.uniform());
  return clip;
}

AugmentConfig identity_augment() {
  AugmentConfig cfg;
  cfg.crop_min = cfg.crop_max = 1.0;
  cfg.flip_p = cfg.jitter_p = cfg.blur_p = 0.0;
  return cfg;
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (const double x : v) n += x * x;
  for (auto& x : v) x /= std::sqrt(n);
  return v;
}

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return unit(v);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

EncoderConfig small_encoder(std::size_t frame_dim, bool diff = true) {
  EncoderConfig cfg;
  cfg.frame_dim = frame_dim;
  cfg.hidden = 6;
  cfg.features = 5;
  cfg.embed_dim = 4;
  cfg.use_difference = diff;
  return cfg;
}

std::vector<VideoClip> fixture_clips() {
  std::vector<VideoClip> clips;
  for (const auto& c : gen_dataset(testing::small_dataset_config()).clips) clips.push_back(c.clip);
  return clips;
}

PretrainConfig fixture_pretrain() {
  PretrainConfig cfg;
  cfg.encoder.frame_dim = 64;
  return cfg;
}

}  // namespace

TEST_CASE("augment with every option off returns the input") {
  const auto clip = random_clip(1, 4, 8, 8, 3);
  CHECK(augment(clip, identity_augment(), 7) == clip);
}

TEST_CASE("certain flip reverses columns and is an involution") {
  auto cfg = identity_augment();
  cfg.flip_p = 1.0;
  const auto clip = random_clip(2, 3, 5, 6);
  const auto flipped = augment(clip, cfg, 1);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t y = 0; y < 5; ++y)
      for (std::size_t x = 0; x < 6; ++x) CHECK(flipped.at(l, y, x, 0) == clip.at(l, y, 5 - x, 0));
  CHECK(augment(flipped, cfg, 99) == clip);
}

TEST_CASE("augment draws one parameter set per clip") {
  // A clip whose frames are all equal must stay constant over time.
  auto clip = random_clip(3, 1, 8, 8);
  VideoClip still(5, 8, 8, 1);
  for (std::size_t l = 0; l < 5; ++l)
    std::copy(clip.frame(0).begin(), clip.frame(0).end(), still.frame(l).begin());
  AugmentConfig cfg;
  cfg.flip_p = cfg.jitter_p = cfg.blur_p = 0.5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto out = augment(still, cfg, seed);
    CHECK(out.same_dims(still));
    CHECK(out.in_unit_range());
    for (std::size_t l = 1; l < 5; ++l) CHECK(std::equal(out.frame(l).begin(), out.frame(l).end(), out.frame(0).begin()));
  }
}

TEST_CASE("augment is deterministic per seed and varies across seeds") {
  const auto clip = random_clip(4, 4, 8, 8);
  const AugmentConfig cfg;
  CHECK(augment(clip, cfg, 11) == augment(clip, cfg, 11));
  bool differs = false;
  for (std::uint64_t s = 12; s < 20 && !differs; ++s) differs = !(augment(clip, cfg, s) == augment(clip, cfg, 11));
  CHECK(differs);
}

TEST_CASE("augment rejects invalid configurations") {
  const auto clip = random_clip(5, 2, 4, 4);
  AugmentConfig cfg;
  cfg.crop_min = 0.0;
  CHECK_THROWS_AS(augment(clip, cfg, 0), Error);
  cfg = {};
  cfg.crop_max = 1.5;
  CHECK_THROWS_AS(augment(clip, cfg, 0), Error);
  cfg = {};
  cfg.flip_p = -0.1;
  CHECK_THROWS_AS(augment(clip, cfg, 0), Error);
  cfg = {};
  cfg.blur_kernel = 2;
  CHECK_THROWS_AS(augment(clip, cfg, 0), Error);
}

TEST_CASE("embeddings are unit-norm and deterministic") {
  const auto cfg = small_encoder(16);
  const auto params = init_encoder_params(cfg, 3);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto clip = random_clip(s, 5, 4, 4);
    const auto v = encode_features(clip, cfg, params);
    CHECK(std::sqrt(dot(v, v)) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(encode_features(clip, cfg, params) == v);
  }
}

TEST_CASE("temporal mean encoder ignores frame order unless differences are fed") {
  const auto clip = random_clip(6, 6, 4, 4);
  const auto shuffled = shuffle_clip(clip, 2);
  const auto plain = small_encoder(16, false);
  const auto p = init_encoder_params(plain, 1);
  const auto a = encode_features(clip, plain, p), b = encode_features(shuffled, plain, p);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));

  const auto diff = small_encoder(16, true);
  const auto q = init_encoder_params(diff, 1);
  const auto c = encode_features(clip, diff, q), d = encode_features(shuffled, diff, q);
  double gap = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) gap = std::max(gap, std::abs(c[i] - d[i]));
  CHECK(gap > 1e-4);
}

TEST_CASE("encoder input layout") {
  auto clip = random_clip(7, 3, 2, 2);
  const auto x = encoder_input(clip, small_encoder(4, true));
  REQUIRE(x.rows() == 3);
  REQUIRE(x.cols() == 8);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(x.at(0, i) == doctest::Approx(clip.frame(0)[i] - 0.5f));
    CHECK(x.at(0, 4 + i) == 0.0f);
    CHECK(x.at(2, 4 + i) == doctest::Approx(clip.frame(2)[i] - clip.frame(1)[i]));
  }
}

TEST_CASE("encoder rejects mismatched frames") {
  const auto cfg = small_encoder(16);
  CHECK_THROWS_AS(encode_features(random_clip(8, 3, 5, 5), cfg, init_encoder_params(cfg, 0)), ShapeError);
}

TEST_CASE("info_nce closed forms") {
  FeatureQueue empty(4, 2);
  const std::vector<double> e0{1.0, 0.0}, e1{0.0, 1.0};
  CHECK(info_nce(e0, e0, empty, 0.07).loss == doctest::Approx(0.0));

  FeatureQueue orth(4, 2);
  orth.push(e1);
  CHECK(info_nce(e0, e0, orth, 0.07).loss == doctest::Approx(std::log1p(std::exp(-1.0 / 0.07))).epsilon(1e-9));
  CHECK(info_nce(e0, e0, orth, 0.07).loss == doctest::Approx(6.1e-7).epsilon(0.05));

  FeatureQueue same(4, 2);
  same.push(e0);
  CHECK(info_nce(e0, e1, same, 1.0).loss == doctest::Approx(std::log(1.0 + std::exp(1.0))));
  CHECK(info_nce(e0, e1, same, 1.0).loss == doctest::Approx(1.3133).epsilon(1e-4));
}

TEST_CASE("info_nce is nonnegative and grows with every negative") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = random_unit(rng, 5), vp = random_unit(rng, 5);
    FeatureQueue q(16, 5);
    double prev = info_nce(v, vp, q, 0.2).loss;
    CHECK(prev >= 0.0);
    for (int k = 0; k < 8; ++k) {
      q.push(random_unit(rng, 5));
      const double now = info_nce(v, vp, q, 0.2).loss;
      CHECK(now > prev);
      prev = now;
    }
  }
}

TEST_CASE("info_nce analytic gradient matches finite differences") {
  Rng rng(11);
  const auto v = random_unit(rng, 4), vp = random_unit(rng, 4);
  FeatureQueue q(8, 4);
  for (int k = 0; k < 5; ++k) q.push(random_unit(rng, 4));
  const double tau = 0.5, h = 1e-7;
  const auto r = info_nce(v, vp, q, tau);
  for (std::size_t i = 0; i < 4; ++i) {
    auto up = v, down = v;
    up[i] += h;
    down[i] -= h;
    const double numeric = (info_nce(up, vp, q, tau).loss - info_nce(down, vp, q, tau).loss) / (2 * h);
    CHECK(r.grad_v[i] == doctest::Approx(numeric).epsilon(1e-5));
  }
}

TEST_CASE("info_nce rejects bad temperatures and non-unit inputs") {
  FeatureQueue q(2, 2);
  const std::vector<double> e0{1.0, 0.0};
  CHECK_THROWS_AS(info_nce(e0, e0, q, 0.0), Error);
  CHECK_THROWS_AS(info_nce(e0, e0, q, -1.0), Error);
  CHECK_THROWS_AS(info_nce(std::vector<double>{2.0, 0.0}, e0, q, 1.0), Error);
}

TEST_CASE("contrastive graph gradients match finite differences") {
  // Two-pixel frames and two units per layer, without the difference channel.
  EncoderConfig tiny;
  tiny.frame_dim = 2;
  tiny.hidden = 2;
  tiny.features = 2;
  tiny.embed_dim = 2;
  tiny.use_difference = false;
  for (const auto& cfg : {tiny, small_encoder(4)}) {
    const auto params = init_encoder_params(cfg, 4);
    Rng rng(12);
    std::vector<VideoClip> clips{random_clip(20, 3, 1, cfg.frame_dim), random_clip(21, 3, 1, cfg.frame_dim)};
    std::vector<std::vector<double>> keys{random_unit(rng, cfg.embed_dim), random_unit(rng, cfg.embed_dim)};
    FeatureQueue queue(3, cfg.embed_dim);
    for (int k = 0; k < 3; ++k) queue.push(random_unit(rng, cfg.embed_dim));
    ContrastiveGraph cg(cfg, params, 0.5);
    GradCheckOptions options;
    options.step = 1e-5;
    const auto report = grad_check(cg.graph(), ContrastiveGraph::make_inputs(clips, cfg, keys, &queue), rng, options);
    CHECK(report.passed);
    CHECK(report.worst < 1e-4);
  }
}

TEST_CASE("contrastive graph matches the direct encoder and loss") {
  const auto cfg = small_encoder(16);
  const auto params = init_encoder_params(cfg, 5);
  Rng rng(13);
  std::vector<VideoClip> clips{random_clip(30, 4, 4, 4), random_clip(31, 4, 4, 4), random_clip(32, 4, 4, 4)};
  std::vector<std::vector<double>> keys;
  for (int i = 0; i < 3; ++i) keys.push_back(random_unit(rng, 4));
  FeatureQueue queue(5, 4);
  for (int k = 0; k < 5; ++k) queue.push(random_unit(rng, 4));
  ContrastiveGraph cg(cfg, params, 0.07);
  cg.graph().eval(ContrastiveGraph::make_inputs(clips, cfg, keys, &queue));
  const auto& emb = cg.graph().value(cg.embeddings());
  double expected = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    const auto v = encode_features(clips[b], cfg, params);
    for (std::size_t j = 0; j < 4; ++j) CHECK(emb.at(b, j) == doctest::Approx(v[j]).epsilon(1e-9));
    expected += info_nce(v, keys[b], queue, 0.07).loss / 3.0;
  }
  CHECK(cg.graph().scalar_output() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("graph parameters load and store") {
  const auto cfg = small_encoder(4);
  auto a = init_encoder_params(cfg, 1);
  const auto b = init_encoder_params(cfg, 2);
  ContrastiveGraph cg(cfg, a, 0.1);
  cg.load(b);
  cg.store(a);
  for (std::size_t t = 0; t < a.tensors.size(); ++t) CHECK(a.tensors[t].value == b.tensors[t].value);
}

TEST_CASE("momentum update") {
  EncoderConfig cfg = small_encoder(4);
  auto state = EncoderState::create(cfg, 1);
  state.query = init_encoder_params(cfg, 2);
  const auto key0 = state.key;

  auto keep = state;
  momentum_update(keep, 1.0);
  for (std::size_t t = 0; t < key0.tensors.size(); ++t) CHECK(keep.key.tensors[t].value == key0.tensors[t].value);

  auto copy = state;
  momentum_update(copy, 0.0);
  for (std::size_t t = 0; t < key0.tensors.size(); ++t) CHECK(copy.key.tensors[t].value == state.query.tensors[t].value);

  auto half = state;
  half.key.get("bp").values()[0] = 2.0f;
  half.query.get("bp").values()[0] = 4.0f;
  momentum_update(half, 0.5);
  CHECK(half.key.get("bp").values()[0] == 3.0f);

  auto mix = state;
  momentum_update(mix, 0.3);
  for (std::size_t t = 0; t < key0.tensors.size(); ++t)
    for (std::size_t i = 0; i < key0.tensors[t].value.size(); ++i) {
      const float lo = std::min(key0.tensors[t].value.values()[i], state.query.tensors[t].value.values()[i]);
      const float hi = std::max(key0.tensors[t].value.values()[i], state.query.tensors[t].value.values()[i]);
      CHECK(mix.key.tensors[t].value.values()[i] >= lo);
      CHECK(mix.key.tensors[t].value.values()[i] <= hi);
    }

  CHECK_THROWS_AS(momentum_update(state, 1.1), Error);
  CHECK_THROWS_AS(momentum_update(state, -0.1), Error);
}

TEST_CASE("feature queue is a bounded FIFO") {
  const std::vector<double> a{1, 0}, b{0, 1}, c{-1, 0};
  FeatureQueue q(2, 2);
  q.push(a);
  q.push(b);
  q.push(c);
  REQUIRE(q.size() == 2);
  CHECK(q.entries()[0] == b);
  CHECK(q.entries()[1] == c);

  const std::vector<std::vector<double>> batch{a, c};
  q.push(batch);
  CHECK(q.entries()[0] == a);
  CHECK(q.entries()[1] == c);

  q.push(std::span<const std::vector<double>>{});
  CHECK(q.size() == 2);

  const auto t = q.transposed();
  CHECK(t.rows() == 2);
  CHECK(t.at(0, 0) == 1.0f);
  CHECK(t.at(0, 1) == -1.0f);

  CHECK_THROWS_AS(q.push(std::vector<double>{0.5, 0.5}), Error);
  CHECK_THROWS_AS(q.push(std::vector<double>{1, 0, 0}), ShapeError);
  CHECK(q.entries()[0] == a);

  Rng rng(1);
  FeatureQueue big(50, 3);
  for (int i = 0; i < 200; ++i) {
    big.push(random_unit(rng, 3));
    CHECK(big.size() <= 50);
  }
}

TEST_CASE("pretraining is deterministic") {
  const auto clips = fixture_clips();
  auto cfg = fixture_pretrain();
  cfg.steps = 15;
  const auto& flow = testing::small_trained_flow();
  const auto a = pretrain(clips, &flow, cfg);
  const auto b = pretrain(clips, &flow, cfg);
  CHECK(a.loss_history == b.loss_history);
  CHECK(format_encoder_checkpoint(a) == format_encoder_checkpoint(b));
  cfg.seed = 1;
  CHECK(pretrain(clips, &flow, cfg).loss_history != a.loss_history);
}

TEST_CASE("pretraining loss drop on the desk fixture") {
  const auto clips = fixture_clips();
  const auto cfg = fixture_pretrain();
  std::size_t calls = 0;
  const auto state = pretrain(clips, &testing::small_trained_flow(), cfg, [&](std::size_t, double) { ++calls; });
  const auto& h = state.loss_history;
  REQUIRE(h.size() == 200);
  CHECK(calls == 200);
  const double first = std::accumulate(h.begin(), h.begin() + 10, 0.0);
  const double last = std::accumulate(h.end() - 10, h.end(), 0.0);
  const double ratio = last / first;
  MESSAGE("loss ratio " << ratio);
  CHECK(ratio <= kLossRatioBound);
  CHECK(ratio == doctest::Approx(kPinnedLossRatio).epsilon(0.05));
}

TEST_CASE("baseline pretraining needs no flow") {
  auto cfg = fixture_pretrain();
  cfg.steps = 5;
  cfg.suppress = false;
  const auto clips = fixture_clips();
  CHECK(pretrain(clips, nullptr, cfg).loss_history.size() == 5);
  cfg.suppress = true;
  CHECK_THROWS_AS(pretrain(clips, nullptr, cfg), Error);
}

TEST_CASE("non-finite training aborts with the step index") {
  auto cfg = fixture_pretrain();
  cfg.steps = 5;
  cfg.suppress = false;
  cfg.learning_rate = std::numeric_limits<double>::quiet_NaN();
  try {
    pretrain(fixture_clips(), nullptr, cfg);
    FAIL("expected an abort");
  } catch (const PretrainError& e) {
    CHECK(e.step() == 1);
  }
}

TEST_CASE("encoder checkpoint roundtrip") {
  auto state = EncoderState::create(small_encoder(16, true), 9);
  state.query = init_encoder_params(state.config, 10);
  const auto text = format_encoder_checkpoint(state);
  const auto back = parse_encoder_checkpoint(text);
  CHECK(back.config.frame_dim == 16);
  CHECK(back.config.use_difference);
  CHECK(back.config.hidden == 6);
  CHECK(back.config.features == 5);
  CHECK(back.config.embed_dim == 4);
  CHECK(back.seed == 9);
  CHECK(format_encoder_checkpoint(back) == text);
  const auto clip = random_clip(1, 3, 4, 4);
  CHECK(encode_features(clip, back) == encode_features(clip, state));

  const auto plain = EncoderState::create(small_encoder(16, false), 1);
  CHECK_FALSE(parse_encoder_checkpoint(format_encoder_checkpoint(plain)).config.use_difference);

  CHECK_THROWS_AS(parse_encoder_checkpoint("S2VC-FLOW v1 d=16 layers=2 seed=0\n"), CheckpointError);
}
