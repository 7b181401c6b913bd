#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rest/codec.hpp"
#include "rest/corpus.hpp"
#include "rest/error.hpp"
#include "rest/ops.hpp"
#include "rest/stream.hpp"
#include "rest/tensor_io.hpp"

using namespace rest;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.blocks = 2;
  c.d_model = 16;
  c.heads = 2;
  c.h = c.w = 2;
  c.latent_dim = 3;
  c.chunk_len = 3;
  c.t_dim = 8;
  c.audio_tokens = 2;
  c.audio_dim = 3;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.dims() == b.dims());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("joint CFG reductions") {
  CounterRng rng(1);
  Tensor c = Tensor::randn({4, 3}, rng), u = Tensor::randn({4, 3}, rng);
  CHECK(content_hash(joint_cfg(c, u, 1.0f)) == content_hash(c));
  CHECK(content_hash(joint_cfg(c, u, 0.0f)) == content_hash(u));
  const Tensor six = joint_cfg(Tensor::full({5}, 1.0f), Tensor({5}), 6.0f);
  for (float v : six.values()) CHECK(v == 6.0f);
  CHECK_THROWS_AS(joint_cfg(c, Tensor({3, 4}), 2.0f), ShapeError);
  GenerateOptions o;
  CHECK(o.steps == 8);
  CHECK(o.alpha == 6.0f);
}

TEST_CASE("single-chunk streaming equals non-streaming sampling") {
  CounterRng rng(2);
  for (int trial = 0; trial < 3; ++trial) {
    ModelConfig c = small();
    c.blocks = 1 + trial;
    ParamStore p = init_dit(c, rng, InitMode::random);
    const Tensor ref = Tensor::randn({1, 2, 2, 3}, rng);
    const Tensor audio = Tensor::randn({3, 2, 3}, rng);
    GenerateOptions o;
    o.seed = 40 + static_cast<std::uint64_t>(trial);
    const GenerateResult s = generate(p, c, ref, audio, o);
    const Tensor t = generate_full(p, c, ref, audio, o);
    MESSAGE("max diff " << max_abs_diff(s.latents, t));
    CHECK(max_abs_diff(s.latents, t) <= 1e-4);
  }
}

TEST_CASE("generation is deterministic, chunked and causal") {
  ModelConfig c = small();
  CounterRng rng(3);
  ParamStore p = init_dit(c, rng, InitMode::random);
  const std::int64_t k = 5, n = 1 + k * (c.chunk_len - 1);
  const Tensor ref = Tensor::randn({1, 2, 2, 3}, rng);
  const Tensor audio = Tensor::randn({n, 2, 3}, rng);
  GenerateOptions o;
  o.seed = 7;
  std::vector<std::int64_t> emitted;
  const GenerateResult a = generate(p, c, ref, audio, o, [&](std::int64_t, const Tensor& z) { emitted.push_back(z.dim(0)); });
  const GenerateResult b = generate(p, c, ref, audio, o);
  CHECK(content_hash(a.latents) == content_hash(b.latents));
  CHECK(a.latents.dims() == Dims{n, 2, 2, 3});
  CHECK(emitted == std::vector<std::int64_t>{3, 2, 2, 2, 2});
  CHECK(a.chunk_latency_ms.size() == static_cast<std::size_t>(k));
  CHECK(a.boundary_disagreement.size() == static_cast<std::size_t>(k - 1));
  for (std::size_t j = 2; j < a.cache_bytes.size(); ++j) CHECK(a.cache_bytes[j] == a.cache_bytes[1]);
  o.seed = 8;
  CHECK(content_hash(generate(p, c, ref, audio, o).latents) != content_hash(a.latents));
  o.seed = 7;

  const ChunkLayout layout = ChunkLayout::make(n, c.chunk_len);
  for (std::int64_t i = 1; i <= 3; ++i) {
    const std::int64_t keep = layout.end(i - 1);
    Tensor muted = audio.clone();
    auto mv = muted.mutable_values();
    for (std::int64_t e = keep * 6; e < muted.numel(); ++e) mv[static_cast<std::size_t>(e)] = 0.0f;
    const GenerateResult m = generate(p, c, ref, muted, o);
    CHECK(content_hash(slice(m.latents, 0, 0, keep)) == content_hash(slice(a.latents, 0, 0, keep)));
    CHECK(content_hash(m.latents) != content_hash(a.latents));
  }
  CHECK_THROWS_AS(generate(p, c, ref, Tensor({6, 2, 3}), o), LayoutError);
}

TEST_CASE("metrics on ground truth and constructed inputs") {
  CorpusConfig cc;
  CounterRng rng(4);
  const auto identity = sample_identity(rng, 3, 0.0, {});
  const Clip clip = make_clip(cc, identity, 99, cc.video.F, "probe");
  EvalTruth truth{clip.reference, feature_energy(clip.features), cc.video.rF, 4};
  const Tensor lat = Tensor::randn({latent_frames(cc.video.F, cc.video.rF), 4, 4, 8}, rng);
  const MetricsReport r = evaluate(lat, clip.video, truth);
  REQUIRE(r.identity_drift.size() == 3);
  for (double v : r.identity_drift) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.sync_proxy == doctest::Approx(1.0).epsilon(1e-6));
  const auto json = r.to_json();
  CHECK(json.find("\"sync_proxy\"") != std::string::npos);

  // Constant frames: every second difference is zero.
  const Tensor flat = Tensor::full({10, 2, 2, 3}, 0.7f);
  CHECK(boundary_discontinuity(flat, 4).first == 0.0);
  CHECK(boundary_discontinuity(flat, 4).second == 0.0);
  // Smooth ramp with a hard cut after the first boundary frame.
  std::vector<float> v(120);
  for (int g = 0; g < 10; ++g)
    for (int e = 0; e < 12; ++e) v[static_cast<std::size_t>(g * 12 + e)] = 0.1f * static_cast<float>(g) + (g > 3 ? 5.0f : 0.0f);
  const auto [b, in] = boundary_discontinuity(Tensor({10, 2, 2, 3}, v), 4);
  CHECK(b > 5.0);  // the cut lands in 2 of the 4 straddling second differences
  CHECK(in < 1e-5);
  const MetricsReport cut = evaluate(Tensor({10, 2, 2, 3}, v), clip.video, truth);
  CHECK(cut.boundary_discontinuity == doctest::Approx(b - in));
  CHECK(cut.boundary_second_diff == doctest::Approx(b));

  // A video whose colour rotates away from the reference drifts.
  Tensor rotated = clip.video.clone();
  auto rv = rotated.mutable_values();
  for (std::size_t i = 0; i + 2 < rv.size(); i += 3) std::swap(rv[i], rv[i + 1]);
  for (double d : identity_drift(rotated, clip.reference, 4, 4)) CHECK(d < 0.999);
  CHECK(pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
  CHECK(pearson({1, 1, 1}, {2, 4, 6}) == 0.0);
}

TEST_CASE("raw video dump round trip") {
  CounterRng rng(5);
  const Tensor v = Tensor::randn({3, 4, 5, 3}, rng);
  const fs::path p = fs::temp_directory_path() / "rest_raw.bin";
  save_raw_video(p, v);
  CHECK(fs::file_size(p) == 8 + 5 * 4 + 3 * 4 * 5 * 3 * 4);
  CHECK(content_hash(load_raw_video(p)) == content_hash(v));
  {
    std::ofstream bad(p, std::ios::binary);
    bad << "NOTRAWVIDEO";
  }
  CHECK_THROWS_AS(load_raw_video(p), IoError);
  fs::remove(p);
}

TEST_CASE("bench tables follow the analytic counters") {
  ModelConfig c = small();
  CounterRng rng(6);
  ParamStore p = init_dit(c, rng, InitMode::random);
  GenerateOptions o;
  o.steps = 2;
  const BenchResult r = bench_stream(p, c, 6, o, 1);
  REQUIRE(r.per_chunk.size() == 6);
  for (std::size_t j = 2; j < 6; ++j) {
    CHECK(r.per_chunk[j].flops == r.per_chunk[1].flops);
    CHECK(r.per_chunk[j].cache_bytes == r.per_chunk[1].cache_bytes);
    CHECK(r.per_chunk[j].full_history_bytes > r.per_chunk[j - 1].full_history_bytes);
  }
  for (const auto& row : r.scaling) CHECK(row.measured_ratio == 1.0);
  for (std::size_t k = 2; k < r.scaling.size(); ++k)
    CHECK(r.scaling[k].teacher_flops - r.scaling[k - 1].teacher_flops > r.scaling[k - 1].teacher_flops - r.scaling[k - 2].teacher_flops);
  const fs::path dir = fs::temp_directory_path() / "rest_bench";
  write_bench_csv(dir, r);
  CHECK(fs::exists(dir / "bench_chunks.csv"));
  CHECK(fs::exists(dir / "bench_scaling.csv"));
  fs::remove_all(dir);
}
