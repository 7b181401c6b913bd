#include "rest/pipeline.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rest/error.hpp"
#include "rest/tensor_io.hpp"

namespace rest {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

RunConfig::RunConfig() {
  teacher.audio_drop = student.audio_drop = 0.1f;
  teacher.ref_drop = student.ref_drop = 0.1f;
}

void RunConfig::resolve() {
  corpus.seed = seed;
  corpus.video.validate();
  model.h = corpus.video.h();
  model.w = corpus.video.w();
  model.latent_dim = corpus.video.dv;
  model.audio_tokens = audio_tokens;
  model.audio_dim = audio_latent_dim;
  model.validate();
  teacher.seed = seed + 101;
  student.seed = seed + 202;
  teacher.validate();
  student.validate();
  if (corpus.n_train < 1) throw DomainError("corpus.n_train must be >= 1");
  if (corpus.n_heldout < 0) throw DomainError("corpus.n_heldout must be >= 0");
  if (codec.epochs < 0 || !(codec.lr > 0.0f)) throw DomainError("codec needs epochs >= 0 and lr > 0");
  if (generate.steps < 1) throw ScheduleError("generate.steps must be >= 1");
  if (eval_seeds < 1) throw DomainError("eval.seeds must be >= 1");
  // Both clip lengths must tile into whole chunks.
  ChunkLayout::make(corpus.video.f(), model.chunk_len);
  ChunkLayout::make(corpus.video.with_frames(eval_frames).f(), model.chunk_len);
}

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw UsageError("config: '" + name_ + "' must be an object");
  }
  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw UsageError("config: " + name_ + "." + key + ": " + e.what());
    }
  }
  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, name_ + "." + key);
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw UsageError("config: unknown key '" + name_ + "." + k + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

template <class Visitor>
void visit_train(Visitor&& v, TrainConfig& t, bool student) {
  v("lr", t.lr);
  v("batch_size", t.batch_size);
  v("steps", t.max_steps);
  v("epochs", t.epochs);
  v("audio_drop", t.audio_drop);
  v("ref_drop", t.ref_drop);
  v("clip_norm", t.clip_norm);
  v("checkpoint_every", t.checkpoint_every);
  if (!student) return;
  v("lambda_con", t.lambda_con);
  v("lambda_smo", t.lambda_smo);
  v("tau", t.tau);
  v("infonce", t.infonce);
  v("literal_smoothness", t.literal_smoothness);
  v("no_asd", t.no_asd);
  v("no_smooth", t.no_smooth);
  v("no_contrastive", t.no_contrastive);
  v("no_id_sink", t.no_id_sink);
  v("no_context_cache", t.no_context_cache);
}

struct JsonWriter {
  json* j;
  template <class T>
  void operator()(const std::string& k, const T& v) const {
    if constexpr (std::is_same_v<T, float>) {
      // Shortest decimal that reads back as the same float.
      char buf[32];
      const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
      (*j)[k] = std::strtod(std::string(buf, end).c_str(), nullptr);
    } else {
      (*j)[k] = v;
    }
  }
};

struct JsonReader {
  Section* s;
  template <class T>
  void operator()(const std::string& k, T& v) const { s->get(k, v); }
};

// One description of the schema drives both directions.
template <class Visitor>
void visit(RunConfig& c, Visitor&& top, Visitor&& corpus, Visitor&& motion, Visitor&& codec, Visitor&& model, Visitor&& teacher,
           Visitor&& student, Visitor&& gen, Visitor&& eval) {
  top("seed", c.seed);
  corpus("n_train", c.corpus.n_train);
  corpus("n_heldout", c.corpus.n_heldout);
  corpus("frames", c.corpus.video.F);
  corpus("height", c.corpus.video.H);
  corpus("width", c.corpus.video.W);
  corpus("patch_h", c.corpus.video.rH);
  corpus("patch_w", c.corpus.video.rW);
  corpus("temporal_ratio", c.corpus.video.rF);
  corpus("channels", c.corpus.video.Dv);
  corpus("latent_dim", c.corpus.video.dv);
  corpus("samples_per_frame", c.corpus.samples_per_frame);
  corpus("bands", c.corpus.bands);
  corpus("identity_margin", c.corpus.identity_margin);
  auto& m = c.corpus.motion;
  motion("sway_amplitude", m.sway_amplitude);
  motion("period_min", m.period_min);
  motion("period_max", m.period_max);
  motion("head_sigma", m.head_sigma);
  motion("mouth_sigma", m.mouth_sigma);
  motion("mouth_offset", m.mouth_offset);
  motion("mouth_depth", m.mouth_depth);
  motion("voices", m.voices);
  codec("epochs", c.codec.epochs);
  codec("lr", c.codec.lr);
  codec("pca_init", c.codec.pca_init);
  codec("audio_tokens", c.audio_tokens);
  codec("audio_latent_dim", c.audio_latent_dim);
  model("blocks", c.model.blocks);
  model("d_model", c.model.d_model);
  model("heads", c.model.heads);
  model("chunk_len", c.model.chunk_len);
  model("t_dim", c.model.t_dim);
  model("mlp_ratio", c.model.mlp_ratio);
  visit_train(teacher, c.teacher, false);
  visit_train(student, c.student, true);
  gen("steps", c.generate.steps);
  gen("alpha", c.generate.alpha);
  gen("seed", c.generate.seed);
  gen("uncond_drop_audio", c.generate.uncond_drop_audio);
  gen("uncond_drop_ref", c.generate.uncond_drop_ref);
  eval("frames", c.eval_frames);
  eval("seeds", c.eval_seeds);
}

}  // namespace

std::string RunConfig::to_json() const {
  RunConfig c = *this;
  json root;
  root["schema_version"] = kConfigSchemaVersion;
  json corpus, motion, codec, model, teacher, student, gen, eval;
  using W = JsonWriter;
  visit(c, W{&root}, W{&corpus}, W{&motion}, W{&codec}, W{&model}, W{&teacher}, W{&student}, W{&gen}, W{&eval});
  corpus["motion"] = motion;
  root["corpus"] = corpus;
  root["codec"] = codec;
  root["model"] = model;
  root["teacher"] = teacher;
  root["student"] = student;
  root["generate"] = gen;
  root["eval"] = eval;
  return root.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: not valid JSON: ") + e.what());
  }
  Section top(root, "config");
  int version = -1;
  top.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    throw UsageError("config: schema_version must be " + std::to_string(kConfigSchemaVersion) + ", got " + std::to_string(version));
  Section corpus = top.sub("corpus");
  Section motion = corpus.sub("motion");
  Section codec = top.sub("codec"), model = top.sub("model"), teacher = top.sub("teacher"), student = top.sub("student"),
          gen = top.sub("generate"), eval = top.sub("eval");
  using R = JsonReader;
  RunConfig c;
  visit(c, R{&top}, R{&corpus}, R{&motion}, R{&codec}, R{&model}, R{&teacher}, R{&student}, R{&gen}, R{&eval});
  for (const Section* s : {&top, &corpus, &motion, &codec, &model, &teacher, &student, &gen, &eval}) s->finish();
  c.resolve();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

void RunConfig::apply_flags(const std::vector<std::string>& flags) {
  for (const auto& f : flags) {
    if (f == "no_asd") student.no_asd = true;
    else if (f == "no_smooth") student.no_smooth = true;
    else if (f == "no_contrastive") student.no_contrastive = true;
    else if (f == "no_id_sink") student.no_id_sink = true;
    else if (f == "no_context_cache") student.no_context_cache = true;
    else if (f != "full" && !f.empty()) throw UsageError("unknown ablation flag '" + f + "'");
  }
}

// ---------------------------------------------------------------------------

void Codecs::save(const fs::path& path) const {
  NamedTensors all = video.export_params();
  for (auto& [k, v] : speech.export_params()) all[k] = v;
  save_checkpoint(path, all);
}

Codecs Codecs::load(const fs::path& path) {
  const NamedTensors all = load_checkpoint(path);
  ParamStore v, s;
  for (const auto& [k, t] : all) (k.rfind("video.", 0) == 0 ? v : s)[k] = t;
  return {VideoCodec::import_params(v), SpeechCodec::import_params(s)};
}

Codecs train_codecs(const Corpus& corpus, const RunConfig& cfg) {
  CounterRng rng = CounterRng(cfg.seed).split(0xc0dec);
  const auto& vs = cfg.corpus.video;
  Codecs c{VideoCodec(vs.rH, vs.rW, vs.rF, vs.Dv, vs.dv, rng), SpeechCodec(vs.rF, cfg.corpus.bands, cfg.audio_tokens, cfg.audio_latent_dim, rng)};
  std::vector<Tensor> videos, feats;
  for (const auto& clip : corpus.train) {
    videos.push_back(clip.video);
    feats.push_back(clip.features);
  }
  c.video.fit(videos, cfg.codec);
  c.speech.fit(feats, cfg.codec);
  return c;
}

std::vector<Clip> eval_clips(const Corpus& corpus, const RunConfig& cfg) {
  std::vector<Clip> out;
  for (const auto& h : corpus.heldout)
    out.push_back(make_clip(cfg.corpus, h.truth.identity, h.truth.seed ^ 0xe7a1ULL, cfg.eval_frames, h.truth.id + "-eval"));
  return out;
}

EvalSummary evaluate_model(const ParamStore& params, const ModelConfig& model, const Codecs& codecs, const std::vector<Clip>& clips,
                           const RunConfig& cfg) {
  EvalSummary s;
  for (const auto& clip : clips) {
    const LatentClip lc = encode_clip(clip, codecs.video, codecs.speech);
    for (std::int64_t k = 0; k < cfg.eval_seeds; ++k) {
      GenerateOptions o = cfg.generate;
      o.seed = cfg.generate.seed + static_cast<std::uint64_t>(k);
      const GenerateResult g = generate(params, model, lc.z_ref, lc.audio, o);
      Tensor video;
      {
        NoGradGuard ng;
        video = codecs.video.decode(g.latents, cfg.corpus.video.H, cfg.corpus.video.W);
      }
      MetricsReport r = evaluate(g.latents, video, {clip.reference, feature_energy(clip.features), cfg.corpus.video.rF, model.chunk_len});
      r.per_chunk_latency_ms = g.chunk_latency_ms;
      r.cache_bytes = g.cache_bytes;
      r.boundary_disagreement = g.boundary_disagreement;
      s.clips.push_back({clip.truth.id, o.seed, r, g.latents, video});
    }
  }
  const auto n = static_cast<double>(s.clips.size());
  for (const auto& c : s.clips) {
    s.boundary_discontinuity += c.report.boundary_discontinuity / n;
    s.boundary_second_diff += c.report.boundary_second_diff / n;
    s.interior_discontinuity += c.report.interior_discontinuity / n;
    s.identity_drift += c.report.identity_drift_mean / n;
    s.sync_proxy += c.report.sync_proxy / n;
  }
  return s;
}

std::string EvalSummary::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["boundary_discontinuity"] = boundary_discontinuity;
  j["boundary_second_diff"] = boundary_second_diff;
  j["interior_discontinuity"] = interior_discontinuity;
  j["identity_drift"] = identity_drift;
  j["sync_proxy"] = sync_proxy;
  json arr = json::array();
  for (const auto& c : clips) {
    json e = json::parse(c.report.to_json());
    e["clip"] = c.id;
    e["seed"] = c.seed;
    arr.push_back(e);
  }
  j["clips"] = arr;
  return j.dump(2) + "\n";
}

int rest_threads() {
  if (const char* env = std::getenv("REST_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

Experiment prepare_experiment(const RunConfig& cfg, const fs::path& out, const Log& log) {
  const auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  Experiment ex;
  ex.cfg = cfg;
  ex.cfg.resolve();
  if (!out.empty()) write_text(out / "resolved_config.json", ex.cfg.to_json());
  say("corpus: " + std::to_string(cfg.corpus.n_train) + " train / " + std::to_string(cfg.corpus.n_heldout) + " held-out clips");
  ex.corpus = make_synthetic_corpus(ex.cfg.corpus);
  say("codecs: fitting");
  ex.codecs = train_codecs(ex.corpus, ex.cfg);
  if (!out.empty()) ex.codecs.save(out / "codecs.ckpt");
  ex.train = encode_clips(ex.corpus.train, ex.codecs.video, ex.codecs.speech);
  ex.eval = eval_clips(ex.corpus, ex.cfg);
  say("teacher: " + std::to_string(ex.cfg.teacher.total_steps(static_cast<std::int64_t>(ex.train.size()))) + " steps");
  RunOptions run;
  if (!out.empty()) run.out_dir = out / "teacher";
  ex.teacher = train_teacher(ex.train, ex.cfg.model, ex.cfg.teacher, run);
  if (!ex.teacher.curve.empty()) say("teacher: final loss " + std::to_string(ex.teacher.curve.back().total));
  return ex;
}

VariantOutcome run_variant(const Experiment& ex, const std::string& variant, const fs::path& out, const Log& log) {
  RunConfig cfg = ex.cfg;
  cfg.apply_flags({variant});
  VariantOutcome o;
  o.variant = variant;
  RunOptions run;
  if (!out.empty()) run.out_dir = out / variant;
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult student = train_student(ex.train, ex.teacher.params, ex.cfg.model, cfg.student, run);
  o.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.curve = std::move(student.curve);
  o.eval = evaluate_model(student.params, cfg.student_model(), ex.codecs, ex.eval, cfg);
  if (!out.empty()) write_text(out / variant / "metrics.json", o.eval.to_json());
  if (log) {
    std::ostringstream os;
    os << variant << ": boundary " << o.eval.boundary_discontinuity << " identity " << o.eval.identity_drift << " sync " << o.eval.sync_proxy
       << " (" << o.train_seconds << " s)";
    log(os.str());
  }
  return o;
}

std::vector<VariantOutcome> run_ablation(const Experiment& ex, const std::vector<std::string>& variants, const fs::path& out, int threads,
                                         const Log& log) {
  std::vector<VariantOutcome> results(variants.size());
  std::mutex log_mu;
  const Log safe_log = [&](const std::string& m) {
    if (!log) return;
    std::lock_guard lk(log_mu);
    log(m);
  };
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(variants.size());
  const auto worker = [&] {
    for (std::size_t i = next++; i < variants.size(); i = next++) {
      try {
        results[i] = run_variant(ex, variants[i], out, safe_log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(variants.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

std::string ablation_json(const std::vector<VariantOutcome>& outcomes) {
  json j;
  j["schema_version"] = 1;
  json arr = json::array();
  for (const auto& o : outcomes) {
    json e;
    e["variant"] = o.variant;
    e["boundary_discontinuity"] = o.eval.boundary_discontinuity;
    e["boundary_second_diff"] = o.eval.boundary_second_diff;
    e["interior_discontinuity"] = o.eval.interior_discontinuity;
    e["identity_drift"] = o.eval.identity_drift;
    e["sync_proxy"] = o.eval.sync_proxy;
    e["train_seconds"] = o.train_seconds;
    e["final_total_loss"] = o.curve.empty() ? 0.0 : o.curve.back().total;
    arr.push_back(e);
  }
  j["variants"] = arr;
  return j.dump(2) + "\n";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace rest
