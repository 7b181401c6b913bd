// rest: command-line entry point.
//
//   rest gen-corpus    --out runs/c
//   rest train-codec   --corpus runs/c/corpus --out runs/k
//   rest train-teacher --corpus ... --codecs runs/k/codecs.ckpt --out runs/t
//   rest distill       --teacher runs/t/teacher/model.ckpt ... --out runs/s
//   rest generate      --model runs/s/student/model.ckpt --codecs ... --seed 7 --out runs/g
//   rest bench | verify | ablate
//
// Exit codes: 0 ok, 1 validation, 2 numerical abort, 3 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rest/error.hpp"
#include "rest/pipeline.hpp"
#include "rest/tensor_io.hpp"
#include "rest/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace rest;

namespace {

struct Common {
  std::string config;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::optional<float> alpha;
  std::optional<std::int64_t> chunk_len;
  std::vector<std::string> flags;
  std::string resume;
  std::string corpus, codecs, teacher, model;
};

void log(const std::string& m) { std::cerr << "[rest] " << m << std::endl; }

enum class Stage { training, sampling };

// File values first, then flags; the result is echoed to the run directory.
// For sampling commands --seed and --steps address the sampler.
RunConfig resolve_config(const Common& c, Stage stage) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (stage == Stage::training) {
    if (c.seed) cfg.seed = *c.seed;
    if (c.steps) cfg.teacher.max_steps = cfg.student.max_steps = *c.steps;
  } else {
    if (c.seed) cfg.generate.seed = *c.seed;
    if (c.steps) cfg.generate.steps = static_cast<int>(*c.steps);
  }
  if (c.alpha) cfg.generate.alpha = *c.alpha;
  if (c.chunk_len) cfg.model.chunk_len = *c.chunk_len;
  cfg.apply_flags(c.flags);
  cfg.resolve();
  fs::create_directories(c.out);
  const std::string text = cfg.to_json();
  write_text(fs::path(c.out) / "resolved_config.json", text);
  std::cerr << "[rest] resolved config:\n" << text;
  return cfg;
}

Corpus get_corpus(const Common& c, const RunConfig& cfg) {
  if (!c.corpus.empty()) return load_corpus(c.corpus);
  log("no --corpus given; generating the synthetic corpus from the config");
  return make_synthetic_corpus(cfg.corpus);
}

Codecs get_codecs(const Common& c, const Corpus& corpus, const RunConfig& cfg) {
  if (!c.codecs.empty()) return Codecs::load(c.codecs);
  log("no --codecs given; fitting codecs");
  return train_codecs(corpus, cfg);
}

std::string require(const std::string& v, const char* flag) {
  if (v.empty()) throw UsageError(std::string(flag) + " is required");
  return v;
}

void step_logger(RunOptions& run, const char* tag) {
  run.on_step = [tag](const StepReport& r) {
    if (r.step % 100 == 0) {
      char line[160];
      std::snprintf(line, sizeof line, "%s step %lld total %.5f grad_norm %.4f", tag, static_cast<long long>(r.step), r.total, r.grad_norm);
      log(line);
    }
  };
}

int cmd_gen_corpus(const Common& c) {
  const RunConfig cfg = resolve_config(c, Stage::training);
  const Corpus corpus = make_synthetic_corpus(cfg.corpus);
  save_corpus(fs::path(c.out) / "corpus", corpus);
  log("wrote " + std::to_string(corpus.train.size() + corpus.heldout.size()) + " clips to " + (fs::path(c.out) / "corpus").string());
  return 0;
}

int cmd_train_codec(const Common& c) {
  const RunConfig cfg = resolve_config(c, Stage::training);
  const Corpus corpus = get_corpus(c, cfg);
  train_codecs(corpus, cfg).save(fs::path(c.out) / "codecs.ckpt");
  log("wrote " + (fs::path(c.out) / "codecs.ckpt").string());
  return 0;
}

int cmd_train_teacher(const Common& c) {
  const RunConfig cfg = resolve_config(c, Stage::training);
  const Corpus corpus = get_corpus(c, cfg);
  const Codecs codecs = get_codecs(c, corpus, cfg);
  const auto clips = encode_clips(corpus.train, codecs.video, codecs.speech);
  RunOptions run{fs::path(c.out) / "teacher", c.resume, {}};
  step_logger(run, "teacher");
  const TrainResult r = train_teacher(clips, cfg.model, cfg.teacher, run);
  if (!r.curve.empty()) log("teacher final loss " + std::to_string(r.curve.back().total));
  return 0;
}

int cmd_distill(const Common& c) {
  require(c.teacher, "--teacher");
  const RunConfig cfg = resolve_config(c, Stage::training);
  const ParamStore teacher = load_dit(c.teacher, cfg.model);
  const Corpus corpus = get_corpus(c, cfg);
  const Codecs codecs = get_codecs(c, corpus, cfg);
  const auto clips = encode_clips(corpus.train, codecs.video, codecs.speech);
  RunOptions run{fs::path(c.out) / "student", c.resume, {}};
  step_logger(run, "student");
  const TrainResult r = train_student(clips, teacher, cfg.model, cfg.student, run);
  if (!r.curve.empty()) log("student final loss " + std::to_string(r.curve.back().total));
  return 0;
}

int cmd_generate(const Common& c, const std::string& clip_id) {
  require(c.codecs, "--codecs");
  require(c.model, "--model");
  const RunConfig cfg = resolve_config(c, Stage::sampling);
  const Codecs codecs = Codecs::load(c.codecs);
  const ModelConfig model = cfg.student_model();
  const ParamStore params = load_dit(c.model, model);
  const Corpus corpus = get_corpus(c, cfg);
  std::vector<Clip> clips = eval_clips(corpus, cfg);
  if (!clip_id.empty()) {
    std::erase_if(clips, [&](const Clip& x) { return x.truth.id != clip_id; });
    if (clips.empty()) throw UsageError("no evaluation clip named '" + clip_id + "'");
  }
  const EvalSummary s = evaluate_model(params, model, codecs, clips, cfg);
  for (const auto& e : s.clips) {
    const fs::path dir = fs::path(c.out) / (e.id + "_seed" + std::to_string(e.seed));
    fs::create_directories(dir);
    save_tensor(dir / "latents.tnsr", e.latents);
    save_raw_video(dir / "video.raw", e.video);
    write_text(dir / "metrics.json", e.report.to_json());
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(content_hash(e.latents)));
    std::cout << e.id << " seed " << e.seed << " latents " << hash << "\n";
  }
  write_text(fs::path(c.out) / "metrics.json", s.to_json());
  std::cout << s.to_json();
  return 0;
}

int cmd_bench(const Common& c, std::int64_t chunks, int repeats) {
  const RunConfig cfg = resolve_config(c, Stage::sampling);
  const ModelConfig model = cfg.student_model();
  ParamStore params;
  if (c.model.empty()) {
    log("no --model given; benchmarking randomly initialised weights");
    CounterRng rng(cfg.seed);
    params = init_dit(model, rng, InitMode::random);
  } else {
    params = load_dit(c.model, model);
  }
  const BenchResult r = bench_stream(params, model, chunks, cfg.generate, repeats);
  write_bench_csv(c.out, r);
  std::printf("first chunk %.2f ms, non-streaming full sequence %.2f ms\n", r.first_chunk_ms, r.full_sequence_ms);
  for (const auto& row : r.per_chunk)
    std::printf("chunk %3lld  %8.2f ms  flops %llu  cache %zu B\n", static_cast<long long>(row.chunk), row.wall_ms,
                static_cast<unsigned long long>(row.flops), row.cache_bytes);
  return 0;
}

int cmd_verify() {
  const auto results = verify::run_suites(verify::oracle_suites(), rest_threads());
  std::cout << verify::format_table(results);
  for (const auto& r : results)
    if (!r.passed) return 1;
  return 0;
}

int cmd_ablate(const Common& c) {
  const RunConfig cfg = resolve_config(c, Stage::training);
  std::vector<std::string> variants{"full"};
  const std::vector<std::string> all{"no_id_sink", "no_context_cache", "no_asd", "no_contrastive"};
  for (const auto& v : c.flags.empty() ? all : c.flags)
    if (v != "full") variants.push_back(v);
  // Flags select variants here; the shared teacher and baseline stay unablated.
  RunConfig base = cfg;
  base.student.no_asd = base.student.no_smooth = base.student.no_contrastive = false;
  base.student.no_id_sink = base.student.no_context_cache = false;
  const Experiment ex = prepare_experiment(base, c.out, log);
  const auto outcomes = run_ablation(ex, variants, c.out, rest_threads(), log);
  write_text(fs::path(c.out) / "ablation.json", ablation_json(outcomes));
  const auto dir = verify::ablation_directions(outcomes);
  std::cout << verify::format_table({dir});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming talking-head generation with chunked distillation"};
  app.require_subcommand(1);
  Common c;
  std::string clip_id;
  std::int64_t bench_chunks = 16;
  int bench_repeats = 3;

  const auto common = [&](CLI::App* s, bool inputs) {
    s->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--out", c.out, "run directory");
    s->add_option("--seed", c.seed, "top-level seed; the sampling seed for generate and bench");
    s->add_option("--steps", c.steps, "training steps, or sampling steps for generate/bench");
    s->add_option("--alpha", c.alpha, "joint CFG scale");
    s->add_option("--chunk-len", c.chunk_len, "latent frames per chunk");
    s->add_option("--flags", c.flags, "ablation flags")->delimiter(',');
    if (inputs) {
      s->add_option("--corpus", c.corpus, "dataset directory");
      s->add_option("--codecs", c.codecs, "codec checkpoint");
    }
  };
  auto* gen_corpus = app.add_subcommand("gen-corpus", "write the synthetic dataset");
  common(gen_corpus, false);
  auto* train_codec = app.add_subcommand("train-codec", "fit the video and speech codecs");
  common(train_codec, true);
  auto* train_t = app.add_subcommand("train-teacher", "train the bidirectional teacher");
  common(train_t, true);
  train_t->add_option("--resume", c.resume, "checkpoint directory to resume from");
  auto* distill = app.add_subcommand("distill", "distil the chunked student from a teacher");
  common(distill, true);
  distill->add_option("--teacher", c.teacher, "teacher model.ckpt");
  distill->add_option("--resume", c.resume, "checkpoint directory to resume from");
  auto* gen = app.add_subcommand("generate", "stream evaluation clips through a student");
  common(gen, true);
  gen->add_option("--model", c.model, "student model.ckpt");
  gen->add_option("--clip", clip_id, "single evaluation clip id");
  auto* bench = app.add_subcommand("bench", "per-chunk latency, FLOPs and cache size");
  common(bench, false);
  bench->add_option("--model", c.model, "student model.ckpt");
  bench->add_option("--chunks", bench_chunks, "chunks to stream")->check(CLI::PositiveNumber);
  bench->add_option("--repeats", bench_repeats, "timing repeats")->check(CLI::PositiveNumber);
  auto* verify_cmd = app.add_subcommand("verify", "run the oracle suites");
  auto* ablate = app.add_subcommand("ablate", "paired ablation runs against the full configuration");
  common(ablate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_corpus) return cmd_gen_corpus(c);
    if (*train_codec) return cmd_train_codec(c);
    if (*train_t) return cmd_train_teacher(c);
    if (*distill) return cmd_distill(c);
    if (*gen) return cmd_generate(c, clip_id);
    if (*bench) return cmd_bench(c, bench_chunks, bench_repeats);
    if (*verify_cmd) return cmd_verify();
    if (*ablate) return cmd_ablate(c);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
