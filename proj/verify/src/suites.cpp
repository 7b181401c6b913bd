#include "rest/verify/suites.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <thread>

#include "rest/chunking.hpp"
#include "rest/error.hpp"
#include "rest/flow.hpp"
#include "rest/ops.hpp"
#include "rest/stream.hpp"
#include "rest/tensor_io.hpp"
#include "rest/train.hpp"
#include "rest/verify/attention_oracle.hpp"
#include "rest/verify/gradcheck.hpp"

namespace rest::verify {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Tolerances.
constexpr double kCacheTol = 1e-5;
constexpr double kStreamTol = 1e-4;
constexpr double kModelGradTol = 1e-2;
constexpr double kStandaloneGradTol = 1e-3;
constexpr double kEulerTol = 1e-5;
constexpr double kWallSpread = 0.20;

ModelConfig tiny(std::int64_t blocks) {
  ModelConfig c;
  c.blocks = blocks;
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
  if (a.dims() != b.dims()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) { return a.dims() == b.dims() && content_hash(a) == content_hash(b); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Scratch directory unique to this process and tag; removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("rest_verify_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

template <class F>
SuiteResult timed(int criterion, const std::string& name, F&& body) {
  SuiteResult r{criterion, name, false, "", 0.0};
  const auto t0 = Clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

}  // namespace

SuiteResult cache_equivalence() {
  return timed(1, "cache equivalence", [](SuiteResult& r) {
    CounterRng rng(101);
    const std::int64_t block_opts[] = {1, 2, 4};
    const std::int64_t head_opts[] = {1, 2, 4};
    double worst = 0.0;
    bool counts_ok = true;
    for (int trial = 0; trial < 10; ++trial) {
      ModelConfig c = tiny(block_opts[rng.below(3)]);
      c.heads = head_opts[rng.below(3)];
      c.d_model = 16;
      c.chunk_len = 2 + static_cast<std::int64_t>(rng.below(3));
      const std::int64_t chunks = 2 + static_cast<std::int64_t>(rng.below(4));
      const int steps = 1 + static_cast<int>(rng.below(2));
      const ParamStore p = init_dit(c, rng, InitMode::random);
      const std::int64_t frames = 1 + chunks * (c.chunk_len - 1);
      const Tensor ref = Tensor::randn({1, c.h, c.w, c.latent_dim}, rng);
      const Tensor z = Tensor::randn({frames, c.h, c.w, c.latent_dim}, rng);
      const Tensor audio = Tensor::randn({frames, c.audio_tokens, c.audio_dim}, rng);
      const ChunkLayout layout = ChunkLayout::make(frames, c.chunk_len);
      const auto zc = segment(z, layout);
      const auto ac = segment(audio, layout);
      IDContextCache cache(c, steps);
      AttentionTrace trace;
      NoGradGuard ng;
      for (std::int64_t j = 0; j < chunks; ++j) {
        for (int st = 0; st < steps; ++st) {
          const auto ju = static_cast<std::size_t>(j);
          (void)dit_forward(p, c, {DitMode::student, ref, zc[ju], ac[ju], std::vector<float>(static_cast<std::size_t>(c.chunk_len), rng.uniform()),
                                   &cache, st, &trace});
        }
        cache.advance();
      }
      const OracleReport rep = check_attention_trace(p, c, trace);
      counts_ok = counts_ok && rep.records == c.blocks * steps * chunks && rep.cached_records == c.blocks * steps * (chunks - 1);
      worst = std::max(worst, rep.max_abs_diff);
    }
    r.passed = counts_ok && worst <= kCacheTol;
    r.detail = "10 configs, max |diff| " + fmt(worst) + " <= " + fmt(kCacheTol) + (counts_ok ? "" : ", record count mismatch");
  });
}

SuiteResult streaming_equivalence() {
  return timed(2, "streaming equivalence", [](SuiteResult& r) {
    CounterRng rng(102);
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
      ModelConfig c;  // desk-scale shape
      c.blocks = 1 + trial;
      const ParamStore p = init_dit(c, rng, InitMode::random);
      const Tensor ref = Tensor::randn({1, c.h, c.w, c.latent_dim}, rng);
      const Tensor audio = Tensor::randn({c.chunk_len, c.audio_tokens, c.audio_dim}, rng);
      GenerateOptions o;
      o.steps = 8;
      o.seed = 200 + static_cast<std::uint64_t>(trial);
      worst = std::max(worst, max_abs_diff(generate(p, c, ref, audio, o).latents, generate_full(p, c, ref, audio, o)));
    }
    r.passed = worst <= kStreamTol;
    r.detail = "single chunk, 8 steps, max |diff| " + fmt(worst) + " <= " + fmt(kStreamTol);
  });
}

SuiteResult gradient_checks() {
  return timed(3, "gradient checks", [](SuiteResult& r) {
    double model_worst = 0.0, standalone_worst = 0.0;
    std::string model_name, standalone_name;
    const auto note = [](double& worst, std::string& name, const GradcheckReport& rep, const std::string& what) {
      if (rep.max_rel_error >= worst) {
        worst = rep.max_rel_error;
        name = what + ":" + rep.worst_tensor;
      }
    };

    CounterRng rng(103);
    const GradcheckOptions so{.eps = 1e-2f};
    Tensor s = Tensor::randn({5, 6}, rng).detach();
    s.set_requires_grad(true);
    Tensor t = Tensor::randn({5, 6}, rng).detach();
    t.set_requires_grad(true);
    const std::vector<NamedLeaf> pair_leaves{{"student", s}, {"teacher", t}};
    for (bool pos : {false, true})
      note(standalone_worst, standalone_name, gradcheck([&] { return contrastive_loss({s, t}, 0.5f, pos); }, pair_leaves, so), "contrastive");
    for (bool literal : {false, true})
      note(standalone_worst, standalone_name, gradcheck([&] { return smoothness_loss({s, t}, literal); }, pair_leaves, so), "smoothness");
    const Tensor target = Tensor::randn({5, 6}, rng);
    note(standalone_worst, standalone_name, gradcheck([&] { return fm_loss(s, target); }, {{"v", s}}, so), "regression");

    for (std::int64_t blocks : {1, 2}) {
      const ModelConfig c = tiny(blocks);
      ParamStore student = init_dit(c, rng, InitMode::random);
      const ParamStore teacher = init_dit(c, rng, InitMode::random);
      const LatentClip clip{"g", Tensor::randn({1, c.h, c.w, c.latent_dim}, rng), Tensor::randn({5, c.h, c.w, c.latent_dim}, rng),
                            Tensor::randn({5, c.audio_tokens, c.audio_dim}, rng)};
      TrainConfig tc;
      tc.tau = 0.5f;
      NoiseDraw n = draw_noise(ChunkLayout::make(5, c.chunk_len), clip.z.dims(), tc, rng);
      n.drop_audio = n.drop_ref = false;
      const std::vector<NamedLeaf> leaves(student.begin(), student.end());
      const GradcheckOptions mo{.eps = 1e-2f, .samples_per_tensor = 6, .negligible_fraction = 1e-3,
                                   .seed = static_cast<std::uint64_t>(blocks)};
      const Predictor sp = dit_predictor(student, c), tp = dit_predictor(teacher, c);
      const std::string tag = "b" + std::to_string(blocks) + ".";
      note(model_worst, model_name, gradcheck([&] { return teacher_loss(sp, clip, n, c.chunk_len); }, leaves, mo), tag + "regression");
      note(model_worst, model_name, gradcheck([&] { return student_losses(sp, tp, c, clip, n, tc).l_s; }, leaves, mo), tag + "L_S");
      note(model_worst, model_name, gradcheck([&] { return student_losses(sp, tp, c, clip, n, tc).l_con; }, leaves, mo), tag + "L_CON");
      note(model_worst, model_name, gradcheck([&] { return student_losses(sp, tp, c, clip, n, tc).l_smo; }, leaves, mo), tag + "L_SMO");
      note(model_worst, model_name, gradcheck([&] { return student_losses(sp, tp, c, clip, n, tc).total; }, leaves, mo), tag + "total");
    }
    r.passed = model_worst <= kModelGradTol && standalone_worst <= kStandaloneGradTol;
    r.detail = "model " + fmt(model_worst) + " (" + model_name + ") <= " + fmt(kModelGradTol) + ", standalone " + fmt(standalone_worst) + " (" +
               standalone_name + ") <= " + fmt(kStandaloneGradTol);
  });
}

SuiteResult flow_exactness() {
  return timed(4, "flow-path exactness", [](SuiteResult& r) {
    CounterRng rng(104);
    bool endpoints = true;
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor z0 = Tensor::randn({4, 4, 4, 8}, rng);
      const Tensor eps = Tensor::randn({4, 4, 4, 8}, rng);
      endpoints = endpoints && bit_equal(add_noise(z0, eps, std::vector<float>(4, 0.0f)), z0) &&
                  bit_equal(add_noise(z0, eps, std::vector<float>(4, 1.0f)), eps);
      const Tensor v = flow_target(z0, eps);
      for (int n : {2, 4, 8}) {
        const TimeSchedule s = TimeSchedule::uniform(n);
        Tensor z = eps;
        for (int i = 0; i < n; ++i) z = euler_step(z, v, s.knots[static_cast<std::size_t>(i)], s.knots[static_cast<std::size_t>(i + 1)]);
        worst = std::max(worst, max_abs_diff(z, z0));
      }
    }
    r.passed = endpoints && worst <= kEulerTol;
    r.detail = std::string("endpoints ") + (endpoints ? "exact" : "NOT exact") + ", Euler n=2,4,8 max |err| " + fmt(worst) + " <= " + fmt(kEulerTol);
  });
}

SuiteResult scheduler_laws() {
  return timed(5, "scheduler laws", [](SuiteResult& r) {
    CounterRng rng(105);
    std::int64_t layouts = 0, round_trip_fail = 0;
    for (std::int64_t f = 2; f <= 12; ++f)
      for (std::int64_t k = 1; k <= 16; ++k) {
        const ChunkLayout l = ChunkLayout::with_chunks(k, f);
        const Tensor z = Tensor::randn({l.f_total, 2, 3}, rng);
        const Tensor ref = Tensor::randn({1, 2, 3}, rng);
        ++layouts;
        const Stitched st = stitch(segment(z, l));
        bool ok = bit_equal(st.latents, z);
        for (double d : st.boundary_disagreement) ok = ok && d == 0.0;
        for (const Tensor& view : segment(z, ref, l)) ok = ok && bit_equal(slice(view, 0, 0, 1), ref);
        if (!ok) ++round_trip_fail;
      }
    std::int64_t vector_fail = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::int64_t f = 2 + static_cast<std::int64_t>(rng.below(9));
      const std::int64_t k = 1 + static_cast<std::int64_t>(rng.below(10));
      const ChunkLayout l = ChunkLayout::with_chunks(k, f);
      std::vector<float> ts;
      for (std::int64_t j = 0; j < k; ++j) ts.push_back(rng.uniform());
      const auto tv = async_timesteps(l, ts);
      bool ok = static_cast<std::int64_t>(tv.size()) == 1 + l.f_total && tv[0] == 0.0f;
      for (std::int64_t g = 0; ok && g < l.f_total; ++g) ok = tv[static_cast<std::size_t>(g + 1)] == ts[static_cast<std::size_t>(l.owner(g))];
      for (std::int64_t j = 0; ok && j < k; ++j) {
        ok = l.end(j) - l.owned_begin(j) == (j == 0 ? f : f - 1);
      }
      if (!ok) ++vector_fail;
    }
    r.passed = round_trip_fail == 0 && vector_fail == 0;
    r.detail = std::to_string(layouts) + " layouts round-trip (" + std::to_string(round_trip_fail) + " failed), 200 timestep vectors (" +
               std::to_string(vector_fail) + " failed)";
  });
}

SuiteResult streaming_causality() {
  return timed(6, "streaming causality", [](SuiteResult& r) {
    CounterRng rng(106);
    ModelConfig c;
    c.blocks = 2;
    const ParamStore p = init_dit(c, rng, InitMode::random);
    const std::int64_t chunks = 5, frames = 1 + chunks * (c.chunk_len - 1);
    const Tensor ref = Tensor::randn({1, c.h, c.w, c.latent_dim}, rng);
    const Tensor audio = Tensor::randn({frames, c.audio_tokens, c.audio_dim}, rng);
    GenerateOptions o;
    o.seed = 61;
    const Tensor base = generate(p, c, ref, audio, o).latents;
    const ChunkLayout layout = ChunkLayout::make(frames, c.chunk_len);
    const std::int64_t per_frame = c.audio_tokens * c.audio_dim;
    bool ok = true, later_changed = true;
    for (std::int64_t i = 1; i <= 3; ++i) {
      // Chunks are numbered from 1 here: keep chunks 1..i, zero the rest.
      const std::int64_t keep = layout.end(i - 1);
      Tensor muted = audio.clone();
      auto mv = muted.mutable_values();
      std::fill(mv.begin() + keep * per_frame, mv.end(), 0.0f);
      const Tensor m = generate(p, c, ref, muted, o).latents;
      ok = ok && bit_equal(slice(m, 0, 0, keep), slice(base, 0, 0, keep));
      later_changed = later_changed && !bit_equal(m, base);
    }
    r.passed = ok && later_changed;
    r.detail = std::string("i=1,2,3: earlier chunks ") + (ok ? "bit-identical" : "CHANGED") + ", later chunks " +
               (later_changed ? "respond" : "do not respond");
  });
}

SuiteResult scaling() {
  return timed(7, "scaling", [](SuiteResult& r) {
    CounterRng rng(107);
    const ModelConfig c;  // desk scale
    const ParamStore p = init_dit(c, rng, InitMode::random);
    GenerateOptions o;
    o.seed = 71;
    const std::int64_t chunks = 16;
    const BenchResult b = bench_stream(p, c, chunks, o, 5);

    // Analytic counters, and FLOPs measured around each chunk of a live session.
    bool flops_const = true, bytes_const = true;
    for (std::int64_t j = 2; j < chunks; ++j) {
      flops_const = flops_const && b.per_chunk[static_cast<std::size_t>(j)].flops == b.per_chunk[1].flops;
      bytes_const = bytes_const && b.per_chunk[static_cast<std::size_t>(j)].cache_bytes == b.per_chunk[1].cache_bytes;
    }
    {
      const std::int64_t frames = 1 + chunks * (c.chunk_len - 1);
      const Tensor ref = Tensor::randn({1, c.h, c.w, c.latent_dim}, rng);
      const Tensor audio = Tensor::randn({frames, c.audio_tokens, c.audio_dim}, rng);
      const ChunkLayout layout = ChunkLayout::make(frames, c.chunk_len);
      const auto ac = segment(audio, layout);
      StreamSession s(p, c, ref, o);
      std::vector<std::uint64_t> measured;
      std::vector<std::size_t> bytes;
      for (const Tensor& a : ac) {
        FlopScope fs;
        (void)s.next_chunk(a);
        measured.push_back(fs.count());
        bytes.push_back(s.cache_bytes());
      }
      for (std::size_t j = 2; j < measured.size(); ++j) {
        flops_const = flops_const && measured[j] == measured[1];
        bytes_const = bytes_const && bytes[j] == bytes[1];
      }
    }

    // Wall time after the warm-up chunk, against the median.
    std::vector<double> wall;
    for (std::int64_t j = 1; j < chunks; ++j) wall.push_back(b.per_chunk[static_cast<std::size_t>(j)].wall_ms);
    std::vector<double> sorted = wall;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    double spread = 0.0;
    for (double w : wall) spread = std::max(spread, std::abs(w - median) / median);

    bool first_faster = b.first_chunk_ms < b.full_sequence_ms;
    std::string ttfc = "k=16 " + fmt(b.first_chunk_ms) + "/" + fmt(b.full_sequence_ms) + " ms";
    for (std::int64_t k : {2, 4}) {
      const BenchResult bk = bench_stream(p, c, k, o, 3);
      first_faster = first_faster && bk.first_chunk_ms < bk.full_sequence_ms;
      ttfc += ", k=" + std::to_string(k) + " " + fmt(bk.first_chunk_ms) + "/" + fmt(bk.full_sequence_ms) + " ms";
    }
    r.passed = flops_const && bytes_const && spread <= kWallSpread && first_faster;
    r.detail = std::string("flops ") + (flops_const ? "constant" : "VARY") + ", cache bytes " + (bytes_const ? "constant" : "VARY") +
               ", wall spread " + fmt(spread) + " <= " + fmt(kWallSpread) + ", first chunk vs full " + ttfc;
  });
}

SuiteResult determinism_and_formats() {
  return timed(9, "determinism and formats", [](SuiteResult& r) {
    TempDir tmp("det");
    CounterRng rng(109);
    const ModelConfig c = tiny(2);
    std::vector<LatentClip> clips;
    for (int i = 0; i < 3; ++i)
      clips.push_back({"c" + std::to_string(i), Tensor::randn({1, c.h, c.w, c.latent_dim}, rng), Tensor::randn({5, c.h, c.w, c.latent_dim}, rng),
                       Tensor::randn({5, c.audio_tokens, c.audio_dim}, rng)});
    TrainConfig tc;
    tc.lr = 1e-3f;
    tc.max_steps = 12;
    tc.seed = 5;
    tc.checkpoint_every = 6;
    std::string files[2][4];
    Tensor gen[2];
    for (int run = 0; run < 2; ++run) {
      const fs::path d = tmp.path / ("run" + std::to_string(run));
      const TrainResult t = train_teacher(clips, c, tc, {d / "teacher", {}, {}});
      const TrainResult s = train_student(clips, t.params, c, tc, {d / "student", {}, {}});
      files[run][0] = slurp(d / "teacher" / "loss.csv");
      files[run][1] = slurp(d / "teacher" / "model.ckpt");
      files[run][2] = slurp(d / "student" / "loss.csv");
      files[run][3] = slurp(d / "student" / "model.ckpt");
      GenerateOptions o;
      o.seed = 7;
      gen[run] = generate(s.params, c, clips[0].z_ref, clips[0].audio, o).latents;
    }
    bool same = bit_equal(gen[0], gen[1]);
    for (int i = 0; i < 4; ++i) same = same && !files[0][i].empty() && files[0][i] == files[1][i];

    // Round trips, including values that only survive a bit-exact path.
    std::vector<float> special{0.0f, -0.0f, 1e-42f, -1e-42f, std::numeric_limits<float>::max(), std::numeric_limits<float>::lowest(),
                               std::numeric_limits<float>::infinity(), -std::numeric_limits<float>::infinity(),
                               std::numeric_limits<float>::quiet_NaN(), 1.0f / 3.0f};
    NamedTensors ck{{"special", Tensor({2, 5}, special)}};
    for (int i = 0; i < 6; ++i) {
      Dims d;
      for (std::uint64_t a = 0, rank = 1 + rng.below(4); a < rank; ++a) d.push_back(1 + static_cast<std::int64_t>(rng.below(5)));
      ck["t" + std::to_string(i)] = Tensor::randn(d, rng);
    }
    bool formats = true;
    for (const auto& [name, t] : ck) {
      const fs::path p = tmp.path / (name + ".tnsr");
      save_tensor(p, t);
      formats = formats && bit_equal(load_tensor(p), t);
      save_tensor(tmp.path / "again.tnsr", load_tensor(p));
      formats = formats && slurp(p) == slurp(tmp.path / "again.tnsr");
    }
    save_checkpoint(tmp.path / "a.ckpt", ck);
    const NamedTensors back = load_checkpoint(tmp.path / "a.ckpt");
    formats = formats && back.size() == ck.size();
    for (const auto& [name, t] : ck) formats = formats && back.count(name) && bit_equal(back.at(name), t);
    save_checkpoint(tmp.path / "b.ckpt", back);
    formats = formats && slurp(tmp.path / "a.ckpt") == slurp(tmp.path / "b.ckpt");

    r.passed = same && formats;
    r.detail = std::string("same-seed train/distill/generate ") + (same ? "byte-identical" : "DIFFER") + ", RESTTNSR/RESTCKPT round trips " +
               (formats ? "bit-exact" : "NOT exact");
  });
}

std::vector<Suite> oracle_suites() {
  return {{1, "cache equivalence", cache_equivalence},
          {2, "streaming equivalence", streaming_equivalence},
          {3, "gradient checks", gradient_checks},
          {4, "flow-path exactness", flow_exactness},
          {5, "scheduler laws", scheduler_laws},
          {6, "streaming causality", streaming_causality},
          {7, "scaling", scaling, true},
          {9, "determinism and formats", determinism_and_formats}};
}

std::vector<SuiteResult> run_suites(const std::vector<Suite>& suites, int threads) {
  std::vector<SuiteResult> out(suites.size());
  const auto run_one = [&](std::size_t i) {
    try {
      out[i] = suites[i].run();
    } catch (const std::exception& e) {
      out[i] = {suites[i].criterion, suites[i].name, false, std::string("exception: ") + e.what(), 0.0};
    }
  };
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < suites.size(); i = next++)
      if (!suites[i].exclusive) run_one(i);
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(suites.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < suites.size(); ++i)
    if (suites[i].exclusive) run_one(i);
  return out;
}

SuiteResult ablation_directions(const std::vector<VariantOutcome>& outcomes) {
  return timed(8, "directional ablations", [&](SuiteResult& r) {
    const auto find = [&](const std::string& v) -> const EvalSummary* {
      for (const auto& o : outcomes)
        if (o.variant == v) return &o.eval;
      return nullptr;
    };
    const EvalSummary* full = find("full");
    if (!full) {
      r.detail = "no full run";
      return;
    }
    struct Check {
      const char* tag;
      const char* variant;
      const char* metric;
      bool higher_is_worse;
    };
    const Check checks[] = {{"a", "no_id_sink", "identity_drift", false},
                            {"b", "no_context_cache", "boundary_discontinuity", true},
                            {"c", "no_asd", "boundary_discontinuity", true},
                            {"d", "no_contrastive", "sync_proxy", false}};
    const auto metric = [](const EvalSummary& e, const std::string& m) {
      if (m == "identity_drift") return e.identity_drift;
      if (m == "sync_proxy") return e.sync_proxy;
      return e.boundary_discontinuity;
    };
    r.passed = true;
    for (const Check& c : checks) {
      const EvalSummary* v = find(c.variant);
      bool ok = false;
      std::string part = std::string("(") + c.tag + ") " + c.variant + " ";
      if (v) {
        const double a = metric(*v, c.metric), f = metric(*full, c.metric);
        ok = c.higher_is_worse ? a > f : a < f;
        part += std::string(c.metric) + " " + fmt(a) + (c.higher_is_worse ? " > " : " < ") + fmt(f) + (ok ? " ok" : " FAIL");
      } else {
        part += "missing";
      }
      r.passed = r.passed && ok;
      r.detail += (r.detail.empty() ? "" : "; ") + part;
    }
  });
}

std::string format_table(const std::vector<SuiteResult>& results) {
  std::ostringstream os;
  char line[96];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "[%d] %-26s %s %8.2fs  ", r.criterion, r.name.c_str(), r.passed ? "PASS" : "FAIL", r.seconds);
    os << line << r.detail << "\n";
  }
  return os.str();
}

}  // namespace rest::verify
