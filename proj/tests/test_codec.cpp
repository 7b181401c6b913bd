#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>

#include "rest/codec.hpp"
#include "rest/corpus.hpp"
#include "rest/error.hpp"
#include "rest/ops.hpp"
#include "rest/tensor_io.hpp"

using namespace rest;

namespace {

double mse_of(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  return s / static_cast<double>(a.numel());
}

double mean_square(const Tensor& a) {
  double s = 0.0;
  for (float v : a.values()) s += static_cast<double>(v) * v;
  return s / static_cast<double>(a.numel());
}

CorpusConfig small_corpus(int n_train, int n_heldout, std::int64_t frames = 9) {
  CorpusConfig cfg;
  cfg.seed = 11;
  cfg.n_train = n_train;
  cfg.n_heldout = n_heldout;
  cfg.video.F = frames;
  return cfg;
}

}  // namespace

TEST_CASE("video shape arithmetic") {
  const VideoShape full = VideoShape::full_scale();
  full.validate();
  CHECK(full.h() == 16);
  CHECK(full.w() == 16);
  CHECK(full.f() == 16);

  VideoShape desk{32, 32, 9, 8, 8, 4, 3, 8};
  desk.validate();
  CHECK(desk.h() == 4);
  CHECK(desk.w() == 4);
  CHECK(desk.f() == 3);

  VideoShape bad = desk;
  bad.F = 10;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  bad = desk;
  bad.H = 30;
  try {
    bad.validate();
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("rH=8") != std::string::npos);
  }
}

TEST_CASE("shape laws hold over random valid shapes") {
  CounterRng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const std::int64_t rH = 1 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t rW = 1 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t rF = 1 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t f = 1 + static_cast<std::int64_t>(rng.below(4));
    const std::int64_t Dv = 1 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t dv = 1 + static_cast<std::int64_t>(rng.below(5));
    VideoShape s{h * rH, w * rW, 1 + (f - 1) * rF, rH, rW, rF, Dv, dv};
    s.validate();
    CHECK(s.f() == f);
    CounterRng prng = rng.split(static_cast<std::uint64_t>(trial));
    VideoCodec codec(rH, rW, rF, Dv, dv, prng);
    Tensor x = Tensor::randn(s.video_dims(), prng);
    Tensor z = codec.encode(x);
    CHECK(z.dims() == s.latent_dims());
    CHECK(codec.decode(z, s.H, s.W).dims() == x.dims());
  }
}

TEST_CASE("patchify is a permutation of the pixels") {
  CounterRng rng(2);
  VideoCodec codec(2, 2, 2, 1, 3, rng);
  const VideoShape s{4, 4, 5, 2, 2, 2, 1, 3};
  std::vector<float> vals(static_cast<std::size_t>(product(s.video_dims())));
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(i);
  Tensor x(s.video_dims(), vals);
  auto [first, rest] = codec.patchify(x);
  CHECK(first.dims() == Dims{4, 4});
  CHECK(rest.dims() == Dims{8, 8});
  // First patch of frame 0: rows (0,0),(0,1),(1,0),(1,1) -> pixels 0,1,4,5.
  CHECK(first.at(0) == 0.0f);
  CHECK(first.at(1) == 1.0f);
  CHECK(first.at(2) == 4.0f);
  CHECK(first.at(3) == 5.0f);
  // First rest patch starts at frame 1 and spans frames 1..2.
  CHECK(rest.at(0) == 16.0f);
  CHECK(rest.at(4) == 32.0f);
  std::vector<bool> seen(vals.size(), false);
  for (float v : first.values()) seen[static_cast<std::size_t>(v)] = true;
  for (float v : rest.values()) seen[static_cast<std::size_t>(v)] = true;
  for (bool b : seen) CHECK(b);
}

TEST_CASE("speech features: silence, pure tones, alignment") {
  const std::int64_t N = 32, bands = 8;
  std::vector<float> silence(static_cast<std::size_t>(121 * N), 0.0f);
  Tensor s = speech_features(silence, N, bands, 121);
  CHECK(s.dims() == Dims{121, bands});
  for (float v : s.values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(speech_features(silence, N, bands, 120), AlignmentError);
  CHECK_THROWS_AS(speech_features(std::span<const float>(silence).first(100), N, bands), AlignmentError);

  for (int bin = 1; bin <= bands; ++bin) {
    std::vector<float> tone(static_cast<std::size_t>(N));
    for (std::int64_t n = 0; n < N; ++n)
      tone[static_cast<std::size_t>(n)] = static_cast<float>(std::cos(2.0 * std::numbers::pi * bin * n / N + 0.3));
    Tensor row = speech_features(tone, N, bands, 1);
    // Direct single-bin evaluation of the same quantity.
    double re = 0.0, im = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      re += tone[static_cast<std::size_t>(n)] * std::cos(2.0 * std::numbers::pi * bin * n / N);
      im += tone[static_cast<std::size_t>(n)] * std::sin(2.0 * std::numbers::pi * bin * n / N);
    }
    const double expected = std::log1p(4.0 / (N * N) * (re * re + im * im));
    CHECK(row.at(bin - 1) == doctest::Approx(expected).epsilon(1e-5));
    CHECK(row.at(bin - 1) == doctest::Approx(std::log(2.0)).epsilon(1e-4));
    for (int b = 1; b <= bands; ++b)
      if (b != bin) CHECK(row.at(b - 1) < 1e-6f);
  }
}

TEST_CASE("speech codec aligns with video latent frames") {
  CounterRng rng(3);
  SpeechCodec sc(8, 8, 4, 8, rng);
  Tensor s = Tensor::randn({121, 8}, rng);
  Tensor e = sc.encode(s);
  CHECK(e.dims() == Dims{16, 4, 8});
  CHECK(sc.decode(e).dims() == Dims{121, 8});
  CHECK(latent_frames(121, 8) == VideoShape::full_scale().f());
  CHECK_THROWS_AS((void)sc.encode(Tensor::randn({120, 8}, rng)), AlignmentError);

  // Zero input lands on the (standardized) encoder bias only.
  SpeechCodec desk(4, 8, 4, 8, rng);
  Tensor z = desk.encode(Tensor({9, 8}));
  const LinearPatchCodec& fc = desk.first_codec();
  for (std::int64_t i = 0; i < 32; ++i)
    CHECK(z.at(i) == doctest::Approx((fc.enc_b.at(i) - fc.latent_mean.at(i)) * fc.latent_inv_std.at(i)));
}

TEST_CASE("corpus is deterministic and identities are separated") {
  CorpusConfig cfg = small_corpus(6, 2);
  Corpus a = make_synthetic_corpus(cfg);
  Corpus b = make_synthetic_corpus(cfg);
  REQUIRE(a.train.size() == 6);
  REQUIRE(a.heldout.size() == 2);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(content_hash(a.train[i].video) == content_hash(b.train[i].video));
    CHECK(content_hash(a.train[i].features) == content_hash(b.train[i].features));
  }
  std::vector<const Clip*> all;
  for (const auto& c : a.train) all.push_back(&c);
  for (const auto& c : a.heldout) all.push_back(&c);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      double d2 = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double d = all[i]->truth.identity[c] - all[j]->truth.identity[c];
        d2 += d * d;
      }
      CHECK(std::sqrt(d2) >= cfg.identity_margin);
    }

  // Different seed, different corpus.
  cfg.seed = 12;
  Corpus c = make_synthetic_corpus(cfg);
  CHECK(content_hash(c.train[0].video) != content_hash(a.train[0].video));
}

TEST_CASE("silent spans keep the mouth still and the features at zero") {
  CorpusConfig cfg = small_corpus(1, 0, 37);
  const Clip clip = make_synthetic_corpus(cfg).train[0];
  const auto& env = clip.truth.envelope;
  int silent = 0;
  for (std::size_t t = 0; t < env.size(); ++t) {
    if (env[t] != 0.0) continue;
    ++silent;
    CHECK(clip.truth.aperture[t] == 0.0);
    for (std::int64_t b = 0; b < cfg.bands; ++b) CHECK(clip.features.at(static_cast<std::int64_t>(t) * cfg.bands + b) == 0.0f);
  }
  CHECK(silent > 0);
  // Feature energy is proportional to the envelope.
  const auto energy = feature_energy(clip.features);
  double amp2 = 0.0;
  for (double a : clip.truth.voice_amplitudes) amp2 += a * a;
  for (std::size_t t = 0; t < env.size(); ++t) CHECK(energy[t] == doctest::Approx(env[t] * amp2).epsilon(1e-4));
}

TEST_CASE("corpus save/load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "rest_corpus_roundtrip";
  std::filesystem::remove_all(dir);
  Corpus a = make_synthetic_corpus(small_corpus(3, 1));
  save_corpus(dir, a);
  Corpus b = load_corpus(dir);
  REQUIRE(b.train.size() == 3);
  REQUIRE(b.heldout.size() == 1);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(content_hash(a.train[i].video) == content_hash(b.train[i].video));
    CHECK(content_hash(a.train[i].reference) == content_hash(b.train[i].reference));
    CHECK(a.train[i].truth.identity == b.train[i].truth.identity);
    CHECK(a.train[i].truth.envelope == b.train[i].truth.envelope);
    CHECK(a.train[i].truth.aperture == b.train[i].truth.aperture);
  }
  CHECK_THROWS_AS(load_corpus(dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("trained video codec reconstructs held-out clips") {
  Corpus corpus = make_synthetic_corpus(small_corpus(24, 4));
  CounterRng rng(7);
  VideoCodec codec(8, 8, 4, 3, 8, rng);

  const Tensor& probe = corpus.heldout[0].video;
  const double untrained = mse_of(codec.decode(codec.encode(probe), 32, 32), probe);
  CHECK(untrained > 0.5 * mean_square(probe));

  std::vector<Tensor> videos;
  for (const auto& c : corpus.train) videos.push_back(c.video);

  // From a random start the loss must fall: moving average (window 10) never increases.
  {
    CounterRng r2(9);
    VideoCodec scratch(8, 8, 4, 3, 8, r2);
    const auto curve = scratch.fit(videos, {.epochs = 300, .lr = 3e-3f, .pca_init = false});
    std::vector<double> ma;
    for (std::size_t i = 10; i <= curve.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = i - 10; j < i; ++j) s += curve[j];
      ma.push_back(s / 10.0);
    }
    int rises = 0;
    for (std::size_t i = 1; i < ma.size(); ++i) rises += ma[i] > ma[i - 1] ? 1 : 0;
    CHECK(rises == 0);
    CHECK(curve.back() < 0.5 * curve.front());
  }

  const auto curve = codec.fit(videos, {});
  CHECK(curve.back() <= curve.front() * (1.0 + 1e-6));

  NoGradGuard ng;
  for (const auto& clip : corpus.heldout) {
    const Tensor rec = codec.decode(codec.encode(clip.video), 32, 32);
    const double err = mse_of(rec, clip.video);
    MESSAGE("held-out mse " << err << " signal " << mean_square(clip.video) << " untrained " << untrained);
    CHECK(err <= 0.05);
    CHECK(err < 0.1 * mean_square(clip.video));
    CHECK(err < 0.1 * untrained);
  }

  // Constant zero video round-trips within the same error budget.
  Tensor zero({9, 32, 32, 3});
  CHECK(mse_of(codec.decode(codec.encode(zero), 32, 32), zero) <= 0.05);

  // Deterministic and serializable.
  const Tensor z1 = codec.encode(probe);
  const VideoCodec back = VideoCodec::import_params(codec.export_params());
  CHECK(content_hash(back.encode(probe)) == content_hash(z1));
  CHECK(content_hash(codec.encode(probe)) == content_hash(z1));
}

TEST_CASE("trained speech codec reconstructs held-out features") {
  Corpus corpus = make_synthetic_corpus(small_corpus(24, 4));
  CounterRng rng(8);
  SpeechCodec codec(4, 8, 4, 8, rng);
  std::vector<Tensor> feats;
  for (const auto& c : corpus.train) feats.push_back(c.features);
  const Tensor& probe = corpus.heldout[0].features;
  CHECK(mse_of(codec.decode(codec.encode(probe)), probe) > mse_of(probe, Tensor(probe.dims())) * 0.5);
  codec.fit(feats, {});
  NoGradGuard ng;
  for (const auto& clip : corpus.heldout) CHECK(mse_of(codec.decode(codec.encode(clip.features)), clip.features) <= 0.05);
  const SpeechCodec back = SpeechCodec::import_params(codec.export_params());
  CHECK(content_hash(back.encode(probe)) == content_hash(codec.encode(probe)));
}
