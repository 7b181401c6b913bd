#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "rest/chunking.hpp"
#include "rest/dit.hpp"
#include "rest/error.hpp"
#include "rest/flow.hpp"
#include "rest/ops.hpp"
#include "rest/tensor_io.hpp"
#include "rest/verify/attention_oracle.hpp"
#include "rest/verify/gradcheck.hpp"

using namespace rest;

namespace {

ModelConfig tiny() {
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

struct Stream {
  Tensor ref, frames, audio;
};

Stream random_stream(const ModelConfig& c, std::int64_t frames, CounterRng& rng) {
  return Stream{Tensor::randn({1, c.h, c.w, c.latent_dim}, rng), Tensor::randn({frames, c.h, c.w, c.latent_dim}, rng),
                Tensor::randn({frames, c.audio_tokens, c.audio_dim}, rng)};
}

// Runs the student over every chunk for `steps` step slots, one call per (chunk, step).
std::vector<std::vector<Tensor>> run_student(const ParamStore& p, const ModelConfig& c, const Stream& s, int steps,
                                             IDContextCache& cache, AttentionTrace* trace, CounterRng& rng) {
  const ChunkLayout layout = ChunkLayout::make(s.frames.dim(0), c.chunk_len);
  auto fchunks = segment(s.frames, layout);
  auto achunks = segment(s.audio, layout);
  std::vector<std::vector<Tensor>> out;
  for (std::int64_t j = 0; j < layout.k; ++j) {
    std::vector<Tensor> per_step;
    for (int st = 0; st < steps; ++st) {
      DitCall call{DitMode::student, s.ref, fchunks[static_cast<std::size_t>(j)], achunks[static_cast<std::size_t>(j)],
                   std::vector<float>(static_cast<std::size_t>(c.chunk_len), rng.uniform()), &cache, st, trace};
      per_step.push_back(dit_forward(p, c, call));
    }
    cache.advance();
    out.push_back(per_step);
  }
  return out;
}

}  // namespace

TEST_CASE("qkv projections") {
  ModelConfig c = tiny();
  CounterRng rng(1);
  ParamStore p = init_dit(c, rng, InitMode::random);
  BlockParams b = block_params(p, 0);
  std::vector<float> eye(256, 0.0f);
  for (int i = 0; i < 16; ++i) eye[static_cast<std::size_t>(i * 17)] = 1.0f;
  b.wq = Tensor({16, 16}, eye);
  Tensor hid = Tensor::randn({8, 16}, rng);
  CHECK(max_abs_diff(qkv(hid, b).q, hid) == 0.0);
  QKV z = qkv(Tensor({8, 16}), block_params(p, 0));
  for (const Tensor* t : {&z.q, &z.k, &z.v})
    for (float v : t->values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(qkv(Tensor({8, 15}), b), ShapeError);

  BlockParams g = block_params(p, 1);
  Tensor x = Tensor::randn({6, 16}, rng).detach();
  x.set_requires_grad(true);
  auto rep = verify::gradcheck(
      [&] {
        QKV r = qkv(x, g);
        return add(add(sum_squares(r.q), sum(r.k)), sum(mul(r.v, r.v)));
      },
      {{"hidden", x}, {"wq", g.wq}, {"wk", g.wk}, {"wv", g.wv}});
  CHECK(rep.max_rel_error <= 1e-2);
}

TEST_CASE("audio cross-attention is frame local") {
  ModelConfig c = tiny();
  CounterRng rng(2);
  ParamStore std_p = init_dit(c, rng);
  ParamStore rnd_p = init_dit(c, rng, InitMode::random);
  Tensor hid = Tensor::randn({3, 4, 16}, rng);
  Tensor zero_audio({3, 2, 3});
  // Zero audio (and the zero-initialized output projection) leaves H untouched.
  for (const ParamStore* p : {&std_p, &rnd_p}) {
    Tensor delta = audio_cross_attention(hid, zero_audio, block_params(*p, 0), c.heads);
    for (float v : delta.values()) CHECK(v == 0.0f);
  }
  Tensor audio = Tensor::randn({3, 2, 3}, rng);
  const Tensor std_delta = audio_cross_attention(hid, audio, block_params(std_p, 0), c.heads);
  for (float v : std_delta.values()) CHECK(v == 0.0f);

  // Permuting the audio of frames 0 and 2 swaps their deltas and nothing else.
  BlockParams b = block_params(rnd_p, 0);
  Tensor same_hid = concat({slice(hid, 0, 0, 1), slice(hid, 0, 0, 1), slice(hid, 0, 0, 1)}, 0);
  Tensor base = audio_cross_attention(same_hid, audio, b, c.heads);
  Tensor swapped_audio = concat({slice(audio, 0, 2, 3), slice(audio, 0, 1, 2), slice(audio, 0, 0, 1)}, 0);
  Tensor swapped = audio_cross_attention(same_hid, swapped_audio, b, c.heads);
  CHECK(max_abs_diff(slice(swapped, 0, 0, 1), slice(base, 0, 2, 3)) == 0.0);
  CHECK(max_abs_diff(slice(swapped, 0, 2, 3), slice(base, 0, 0, 1)) == 0.0);
  CHECK(max_abs_diff(slice(swapped, 0, 1, 2), slice(base, 0, 1, 2)) == 0.0);
  CHECK(max_abs_diff(slice(base, 0, 0, 1), slice(base, 0, 2, 3)) > 1e-4);

  CHECK_THROWS_AS(audio_cross_attention(hid, Tensor({2, 2, 3}), b, c.heads), AlignmentError);

  Tensor x = Tensor::randn({3, 4, 16}, rng).detach();
  x.set_requires_grad(true);
  Tensor a = Tensor::randn({3, 2, 3}, rng).detach();
  a.set_requires_grad(true);
  auto rep = verify::gradcheck([&] { return sum_squares(audio_cross_attention(x, a, b, c.heads)); },
                               {{"hidden", x}, {"audio", a}, {"xq", b.xq}, {"xk", b.xk}, {"xv", b.xv}, {"xo", b.xo}});
  CHECK(rep.max_rel_error <= 1e-2);
}

TEST_CASE("cached attention matches the brute-force oracle over random configs") {
  CounterRng rng(3);
  const std::int64_t block_opts[] = {1, 2, 4};
  const std::int64_t head_opts[] = {1, 2, 4};
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = tiny();
    c.blocks = block_opts[rng.below(3)];
    c.heads = head_opts[rng.below(3)];
    c.chunk_len = 2 + static_cast<std::int64_t>(rng.below(3));
    c.no_id_sink = trial % 4 == 1;
    c.no_context_cache = trial % 4 == 2;
    const std::int64_t chunks = 2 + static_cast<std::int64_t>(rng.below(4));
    const int steps = 1 + static_cast<int>(rng.below(2));
    ParamStore p = init_dit(c, rng, InitMode::random);
    Stream s = random_stream(c, 1 + chunks * (c.chunk_len - 1), rng);
    IDContextCache cache(c, steps);
    AttentionTrace trace;
    NoGradGuard ng;
    run_student(p, c, s, steps, cache, &trace, rng);
    const auto rep = verify::check_attention_trace(p, c, trace);
    CHECK(rep.records == c.blocks * steps * chunks);
    CHECK(rep.cached_records == c.blocks * steps * (chunks - 1));
    CHECK(rep.max_abs_diff <= 1e-5);
  }
}

TEST_CASE("teacher on one chunk equals student on a fresh cache") {
  CounterRng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    ModelConfig c = tiny();
    c.blocks = 1 + trial % 3;
    c.chunk_len = 3 + trial % 2;
    ParamStore p = init_dit(c, rng, InitMode::random);
    Stream s = random_stream(c, c.chunk_len, rng);
    std::vector<float> t(static_cast<std::size_t>(c.chunk_len), rng.uniform());
    NoGradGuard ng;
    AttentionTrace trace;
    Tensor vt = dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, s.audio, t, nullptr, 0, &trace});
    IDContextCache cache(c, 1);
    Tensor vs = dit_forward(p, c, {DitMode::student, s.ref, s.frames, s.audio, t, &cache, 0, nullptr});
    CHECK(vt.dims() == s.frames.dims());
    CHECK(max_abs_diff(vt, vs) <= 1e-5);
    CHECK(verify::check_attention_trace(p, c, trace).max_abs_diff <= 1e-5);
  }
}

TEST_CASE("teacher positions follow the owning chunk") {
  CHECK(teacher_frame_position(0, 4) == 0);
  CHECK(teacher_frame_position(3, 4) == 3);
  CHECK(teacher_frame_position(4, 4) == 1);
  CHECK(teacher_frame_position(6, 4) == 3);
  CHECK(teacher_frame_position(7, 4) == 1);
}

TEST_CASE("ID sink is immutable and cache size is constant") {
  ModelConfig c = tiny();
  CounterRng rng(5);
  ParamStore p = init_dit(c, rng, InitMode::random);
  const int steps = 2;
  const std::int64_t chunks = 6;
  Stream s = random_stream(c, 1 + chunks * (c.chunk_len - 1), rng);
  const ChunkLayout layout = ChunkLayout::make(s.frames.dim(0), c.chunk_len);
  auto fch = segment(s.frames, layout);
  auto ach = segment(s.audio, layout);
  IDContextCache cache(c, steps);
  CHECK(cache.bytes() == 0);
  NoGradGuard ng;
  std::uint64_t sink = 0;
  for (std::int64_t j = 0; j < chunks; ++j) {
    for (int st = 0; st < steps; ++st) {
      FlopScope fs;
      dit_forward(p, c, {DitMode::student, s.ref, fch[static_cast<std::size_t>(j)], ach[static_cast<std::size_t>(j)],
                         std::vector<float>(3, 0.5f), &cache, st, nullptr});
      CHECK(fs.count() == student_chunk_flops(c, j));
    }
    cache.advance();
    if (j == 0) sink = cache.sink_hash();
    CHECK(cache.sink_hash() == sink);
    CHECK(cache.bytes() == cache_bytes_formula(c, steps, j + 1));
    CHECK(cache.bytes() == cache_bytes_formula(c, steps, 1));
    CHECK(full_history_cache_bytes(c, steps, j + 1) > full_history_cache_bytes(c, steps, j));
  }
  CHECK(student_chunk_flops(c, 1) == student_chunk_flops(c, 5));
  CHECK(student_chunk_flops(c, 0) != student_chunk_flops(c, 1));
}

TEST_CASE("teacher FLOPs follow the analytic formula and grow superlinearly") {
  ModelConfig c = tiny();
  CounterRng rng(6);
  ParamStore p = init_dit(c, rng, InitMode::random);
  NoGradGuard ng;
  for (std::int64_t k = 1; k <= 4; ++k) {
    const std::int64_t n = 1 + k * (c.chunk_len - 1);
    Stream s = random_stream(c, n, rng);
    FlopScope fs;
    dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, s.audio, std::vector<float>(static_cast<std::size_t>(n), 0.3f), nullptr, 0, nullptr});
    CHECK(fs.count() == teacher_flops(c, n));
  }
  // Second differences of a quadratic term are positive.
  const auto f1 = teacher_flops(c, 3), f2 = teacher_flops(c, 5), f3 = teacher_flops(c, 7);
  CHECK(f3 - f2 > f2 - f1);
}

TEST_CASE("usage and cache errors") {
  ModelConfig c = tiny();
  CounterRng rng(7);
  ParamStore p = init_dit(c, rng, InitMode::random);
  Stream s = random_stream(c, 3, rng);
  IDContextCache cache(c, 1);
  std::vector<float> t(3, 0.5f);
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, s.audio, t, &cache, 0, nullptr}), UsageError);
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::student, s.ref, s.frames, s.audio, t, nullptr, 0, nullptr}), UsageError);
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::student, s.ref, s.frames, s.audio, t, &cache, 1, nullptr}), UsageError);
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, Tensor({2, 2, 3}), t, nullptr, 0, nullptr}),
                  AlignmentError);
  CHECK_THROWS_AS(cache.advance(), CacheError);

  NoGradGuard ng;
  dit_forward(p, c, {DitMode::student, s.ref, s.frames, s.audio, t, &cache, 0, nullptr});
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::student, s.ref, s.frames, s.audio, t, &cache, 0, nullptr}), CacheError);
  cache.advance();
  // A shorter chunk would change the context length mid-stream.
  Stream shorter = random_stream(c, 2, rng);
  CHECK_THROWS_AS(dit_forward(p, c, {DitMode::student, s.ref, shorter.frames, shorter.audio, std::vector<float>(2, 0.5f), &cache, 0, nullptr}),
                  CacheError);
  cache.reset();
  CHECK(cache.bytes() == 0);
  CHECK(cache.chunk_index() == 0);
}

TEST_CASE("DiT loss gradcheck through two blocks") {
  ModelConfig c = tiny();
  CounterRng rng(8);
  ParamStore p = init_dit(c, rng, InitMode::random);
  Stream s = random_stream(c, 5, rng);
  Tensor target = Tensor::randn({5, 2, 2, 3}, rng);
  std::vector<float> t{0.2f, 0.2f, 0.2f, 0.7f, 0.7f};
  std::vector<verify::NamedLeaf> leaves(p.begin(), p.end());
  auto teacher = verify::gradcheck(
      [&] { return mse(dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, s.audio, t, nullptr, 0, nullptr}), target); },
      leaves, {.eps = 1e-2f, .samples_per_tensor = 12, .seed = 1});
  MESSAGE("teacher worst " << teacher.worst_tensor << " " << teacher.max_rel_error);
  CHECK(teacher.max_rel_error <= 1e-2);

  // Student over two chunks: gradients flow through the cached keys.
  auto student = verify::gradcheck(
      [&] {
        IDContextCache cache(c, 1);
        const ChunkLayout l = ChunkLayout::make(5, 3);
        auto fch = segment(s.frames, l);
        auto ach = segment(s.audio, l);
        auto tch = segment(target, l);
        std::vector<Tensor> losses;
        for (std::size_t j = 0; j < 2; ++j) {
          losses.push_back(mse(dit_forward(p, c, {DitMode::student, s.ref, fch[j], ach[j], std::vector<float>(3, 0.4f), &cache, 0, nullptr}),
                               tch[j]));
          cache.advance();
        }
        return add(losses[0], losses[1]);
      },
      leaves, {.eps = 1e-2f, .samples_per_tensor = 12, .seed = 2});
  MESSAGE("student worst " << student.worst_tensor << " " << student.max_rel_error);
  CHECK(student.max_rel_error <= 1e-2);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c = tiny();
  CounterRng rng(9);
  ParamStore p = init_dit(c, rng, InitMode::random);
  const auto path = std::filesystem::temp_directory_path() / "rest_dit_ckpt.bin";
  save_dit(path, p, c);
  ParamStore q = load_dit(path, c);
  REQUIRE(q.size() == p.size());
  for (const auto& [name, t] : p) CHECK(content_hash(q.at(name)) == content_hash(t));
  ModelConfig other = c;
  other.blocks = 3;
  CHECK_THROWS_AS(load_dit(path, other), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("standard init predicts zero velocity") {
  ModelConfig c = tiny();
  CounterRng rng(10);
  ParamStore p = init_dit(c, rng);
  Stream s = random_stream(c, 3, rng);
  const Tensor v = dit_forward(p, c, {DitMode::teacher, s.ref, s.frames, s.audio, {0.1f, 0.1f, 0.1f}, nullptr, 0, nullptr});
  for (float x : v.values()) CHECK(x == 0.0f);
  CHECK(ModelConfig::full_scale().blocks == 28);
}
