#include "rest/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "rest/error.hpp"
#include "rest/flow.hpp"
#include "rest/ops.hpp"
#include "rest/tensor_io.hpp"

namespace rest {

namespace fs = std::filesystem;

LatentClip encode_clip(const Clip& clip, const VideoCodec& video, const SpeechCodec& speech) {
  NoGradGuard ng;
  LatentClip out{clip.truth.id, video.encode(clip.reference).detach(), video.encode(clip.video).detach(),
                 speech.encode(clip.features).detach()};
  if (out.audio.dim(0) != out.z.dim(0))
    throw AlignmentError("clip " + clip.truth.id + ": " + std::to_string(out.audio.dim(0)) + " audio latents for " +
                         std::to_string(out.z.dim(0)) + " video latents");
  return out;
}

std::vector<LatentClip> encode_clips(const std::vector<Clip>& clips, const VideoCodec& video, const SpeechCodec& speech) {
  std::vector<LatentClip> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back(encode_clip(c, video, speech));
  return out;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw DomainError("lr must be positive");
  if (batch_size < 1) throw DomainError("batch_size must be >= 1");
  if (!(lambda_con >= 0.0f) || !(lambda_smo >= 0.0f)) throw DomainError("loss weights must be >= 0");
  if (!(tau > 0.0f)) throw DomainError("tau must be > 0");
  if (epochs < 0 || max_steps < 0 || checkpoint_every < 0) throw DomainError("step counts must be >= 0");
  if (!(audio_drop >= 0.0f && audio_drop <= 1.0f) || !(ref_drop >= 0.0f && ref_drop <= 1.0f))
    throw DomainError("dropout rates must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw DomainError("clip_norm must be positive");
}

std::int64_t TrainConfig::total_steps(std::int64_t clips) const {
  if (max_steps > 0) return max_steps;
  return epochs * ((clips + batch_size - 1) / batch_size);
}

ModelConfig student_config(const ModelConfig& base, const TrainConfig& tc) {
  ModelConfig c = base;
  c.no_id_sink = tc.no_id_sink;
  c.no_context_cache = tc.no_context_cache;
  return c;
}

NoiseDraw draw_noise(const ChunkLayout& layout, const Dims& latent_dims, const TrainConfig& tc, CounterRng& rng) {
  NoiseDraw d;
  for (std::int64_t j = 0; j < layout.k; ++j) d.chunk_t.push_back(rng.uniform());
  d.eps = Tensor::randn(latent_dims, rng);
  d.drop_audio = rng.uniform() < tc.audio_drop;
  d.drop_ref = rng.uniform() < tc.ref_drop;
  return d;
}

Predictor dit_predictor(const ParamStore& params, const ModelConfig& cfg) {
  return [&params, cfg](const DitCall& call) { return dit_forward(params, cfg, call); };
}

namespace {

struct Conditions {
  Tensor z_ref, audio;
};

Conditions conditions(const LatentClip& clip, const NoiseDraw& noise) {
  return {noise.drop_ref ? Tensor::zeros(clip.z_ref.dims()) : clip.z_ref,
          noise.drop_audio ? Tensor::zeros(clip.audio.dims()) : clip.audio};
}

std::vector<float> frame_times(const ChunkLayout& layout, const NoiseDraw& noise) {
  const auto t = async_timesteps(layout, noise.chunk_t);
  return {t.begin() + 1, t.end()};
}

Tensor flatten_frames(const Tensor& x) { return reshape(x, {x.dim(0), x.numel() / x.dim(0)}); }

Tensor second_difference(const Tensor& x) {
  const std::int64_t f = x.dim(0);
  return add(sub(slice(x, 0, 2, f), scale(slice(x, 0, 1, f - 1), 2.0f)), slice(x, 0, 0, f - 2));
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Tensor teacher_loss(const Predictor& teacher, const LatentClip& clip, const NoiseDraw& noise, std::int64_t chunk_len) {
  const ChunkLayout layout = ChunkLayout::make(clip.z.dim(0), chunk_len);
  const std::vector<float> t = frame_times(layout, noise);
  const Conditions c = conditions(clip, noise);
  const Tensor zt = add_noise(clip.z, noise.eps, t);
  const Tensor v = teacher(DitCall{DitMode::teacher, c.z_ref, zt, c.audio, t, nullptr, 0, nullptr});
  return fm_loss(v, flow_target(clip.z, noise.eps));
}

void FlowPair::validate(std::int64_t min_frames) const {
  if (!student.defined() || !teacher.defined() || student.dims() != teacher.dims())
    throw ShapeError("flow pair: student " + (student.defined() ? to_string(student.dims()) : std::string("<none>")) + " vs teacher " +
                     (teacher.defined() ? to_string(teacher.dims()) : std::string("<none>")));
  if (student.rank() < 1 || student.dim(0) < min_frames)
    throw DomainError("flow pair needs at least " + std::to_string(min_frames) + " frames, got " + to_string(student.dims()));
}

Tensor contrastive_loss(const FlowPair& pair, float tau, bool include_positive) {
  pair.validate(2);
  if (!(tau > 0.0f)) throw DomainError("tau must be > 0");
  const std::int64_t f = pair.student.dim(0);
  const Tensor sim = matmul(normalize_last(flatten_frames(pair.student)), transpose(normalize_last(flatten_frames(pair.teacher))));
  const Tensor logits = scale(sim, 1.0f / tau);
  std::vector<float> eye(static_cast<std::size_t>(f * f), 0.0f);
  for (std::int64_t i = 0; i < f; ++i) eye[static_cast<std::size_t>(i * f + i)] = 1.0f;
  const Tensor positives = sum(mul(logits, Tensor({f, f}, eye)));
  Tensor denom_logits = logits;
  if (!include_positive) {
    // exp(-1e30) underflows to exactly zero, which removes j == i from the sum.
    std::vector<float> mask(eye.size());
    for (std::size_t i = 0; i < eye.size(); ++i) mask[i] = eye[i] * -1e30f;
    denom_logits = add(logits, Tensor({f, f}, mask));
  }
  const Tensor lse = sum(logsumexp(denom_logits, 1));
  return scale(sub(lse, positives), 1.0f / static_cast<float>(f));
}

Tensor smoothness_loss(const FlowPair& pair, bool literal) {
  pair.validate(3);
  const std::int64_t f = pair.student.dim(0);
  const Tensor diff = sub(second_difference(pair.student), second_difference(pair.teacher));
  if (literal) return sum(diff);
  return scale(sum_squares(diff), 1.0f / static_cast<float>(f - 2));
}

StudentLossTerms student_losses(const Predictor& student, const Predictor& teacher, const ModelConfig& student_cfg,
                                const LatentClip& clip, const NoiseDraw& noise, const TrainConfig& tc) {
  const ChunkLayout layout = ChunkLayout::make(clip.z.dim(0), student_cfg.chunk_len);
  const Conditions c = conditions(clip, noise);
  const std::vector<float> t = frame_times(layout, noise);

  Tensor v_teacher;
  {
    NoGradGuard ng;
    const Tensor zt = add_noise(clip.z, noise.eps, t);
    v_teacher = teacher(DitCall{DitMode::teacher, c.z_ref, zt, c.audio, t, nullptr, 0, nullptr}).detach();
  }

  const auto z_chunks = segment(clip.z, layout);
  const auto e_chunks = segment(noise.eps, layout);
  const auto a_chunks = segment(c.audio, layout);
  IDContextCache cache(student_cfg, 1);
  std::vector<Tensor> flows, losses;
  for (std::int64_t j = 0; j < layout.k; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    const std::vector<float> tj(static_cast<std::size_t>(layout.chunk_len), noise.chunk_t[ju]);
    const Tensor zt = add_noise(z_chunks[ju], e_chunks[ju], tj);
    const Tensor v = student(DitCall{DitMode::student, c.z_ref, zt, a_chunks[ju], tj, &cache, 0, nullptr});
    losses.push_back(fm_loss(v, flow_target(z_chunks[ju], e_chunks[ju])));
    flows.push_back(v);
    cache.advance();
  }
  Tensor l_s = losses.front();
  for (std::size_t j = 1; j < losses.size(); ++j) l_s = add(l_s, losses[j]);
  l_s = scale(l_s, 1.0f / static_cast<float>(losses.size()));

  const FlowPair pair{stitch(flows).latents, v_teacher};
  StudentLossTerms out;
  out.l_s = l_s;
  out.l_con = contrastive_loss(pair, tc.tau, tc.infonce);
  out.l_smo = smoothness_loss(pair, tc.literal_smoothness);
  out.total = l_s;
  if (!tc.no_asd) {
    if (!tc.no_contrastive) out.total = add(out.total, scale(out.l_con, tc.lambda_con));
    if (!tc.no_smooth) out.total = add(out.total, scale(out.l_smo, tc.lambda_smo));
  }
  return out;
}

namespace {

void check_batch(const std::vector<const LatentClip*>& batch, const std::vector<NoiseDraw>& noise) {
  if (batch.empty() || batch.size() != noise.size())
    throw UsageError("batch of " + std::to_string(batch.size()) + " clips with " + std::to_string(noise.size()) + " noise draws");
}

std::string describe(const StepReport& r) {
  std::ostringstream os;
  os << "L_S=" << r.l_s << " L_CON=" << r.l_con << " L_SMO=" << r.l_smo << " total=" << r.total << " grad_norm=" << r.grad_norm;
  return os.str();
}

void finish_step(ParamStore& params, AdamState& opt, const TrainConfig& tc, StepReport& rep) {
  std::vector<Tensor> list = param_list(params);
  if (!finite(rep.total) || !finite(rep.l_s) || !finite(rep.l_con) || !finite(rep.l_smo))
    throw NumericalError("non-finite loss, " + describe(rep));
  rep.grad_norm = clip_grad_norm(list, tc.clip_norm);
  if (!finite(rep.grad_norm)) throw NumericalError("non-finite gradient, " + describe(rep));
  adam_step(list, opt, AdamConfig{tc.lr});
}

}  // namespace

StepReport teacher_step(ParamStore& params, const ModelConfig& cfg, AdamState& opt, const std::vector<const LatentClip*>& batch,
                        const std::vector<NoiseDraw>& noise, const TrainConfig& tc) {
  check_batch(batch, noise);
  zero_grads(params);
  const auto inv = 1.0f / static_cast<float>(batch.size());
  const Predictor model = dit_predictor(params, cfg);
  StepReport rep;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor loss = scale(teacher_loss(model, *batch[b], noise[b], cfg.chunk_len), inv);
    rep.l_s += loss.item();
    backward(loss);
  }
  rep.total = rep.l_s;
  finish_step(params, opt, tc, rep);
  return rep;
}

StepReport student_step(ParamStore& student, const ParamStore& teacher, const ModelConfig& cfg, AdamState& opt,
                        const std::vector<const LatentClip*>& batch, const std::vector<NoiseDraw>& noise, const TrainConfig& tc) {
  check_batch(batch, noise);
  zero_grads(student);
  const ModelConfig scfg = student_config(cfg, tc);
  const auto inv = 1.0f / static_cast<float>(batch.size());
  const Predictor s = dit_predictor(student, scfg);
  const Predictor t = dit_predictor(teacher, cfg);
  StepReport rep;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const StudentLossTerms terms = student_losses(s, t, scfg, *batch[b], noise[b], tc);
    rep.l_s += terms.l_s.item() * inv;
    rep.l_con += terms.l_con.item() * inv;
    rep.l_smo += terms.l_smo.item() * inv;
    rep.total += terms.total.item() * inv;
    backward(scale(terms.total, inv));
  }
  finish_step(student, opt, tc, rep);
  return rep;
}

// ---------------------------------------------------------------------------

void save_train_state(const fs::path& path, const ParamStore& params, const AdamState& opt, std::int64_t step) {
  NamedTensors out;
  std::size_t i = 0;
  if (!opt.m.empty() && opt.m.size() != params.size()) throw UsageError("optimizer state does not match the parameters");
  for (const auto& [name, t] : params) {
    if (!opt.m.empty()) {
      out["adam.m." + name] = Tensor(t.dims(), opt.m[i]);
      out["adam.v." + name] = Tensor(t.dims(), opt.v[i]);
    }
    ++i;
  }
  // Step counts are stored as two 24-bit halves so they stay exact in f32.
  const auto split = [](std::int64_t v) {
    return Tensor({2}, {static_cast<float>(v >> 24), static_cast<float>(v & 0xffffff)});
  };
  out["adam.step"] = split(opt.step);
  out["train.step"] = split(step);
  save_checkpoint(path, out);
}

std::int64_t load_train_state(const fs::path& path, const ParamStore& params, AdamState& opt) {
  const NamedTensors in = load_checkpoint(path);
  const auto join = [&](const std::string& key) {
    auto it = in.find(key);
    if (it == in.end() || it->second.numel() != 2) throw IoError(path.string() + " lacks " + key);
    return (static_cast<std::int64_t>(it->second.at(0)) << 24) + static_cast<std::int64_t>(it->second.at(1));
  };
  opt = AdamState{};
  opt.step = join("adam.step");
  if (opt.step > 0) {
    for (const auto& [name, t] : params) {
      auto m = in.find("adam.m." + name);
      auto v = in.find("adam.v." + name);
      if (m == in.end() || v == in.end() || m->second.dims() != t.dims() || v->second.dims() != t.dims())
        throw IoError(path.string() + ": optimizer state for " + name + " is missing or misshapen");
      opt.m.emplace_back(m->second.values().begin(), m->second.values().end());
      opt.v.emplace_back(v->second.values().begin(), v->second.values().end());
    }
  }
  return join("train.step");
}

namespace {

using StepFn = std::function<StepReport(ParamStore&, AdamState&, const std::vector<const LatentClip*>&, const std::vector<NoiseDraw>&)>;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

TrainResult run_loop(const std::vector<LatentClip>& clips, const ModelConfig& cfg, const TrainConfig& tc, const RunOptions& run,
                     ParamStore params, const StepFn& step_fn) {
  tc.validate();
  if (clips.empty()) throw UsageError("training needs at least one clip");
  const ChunkLayout layout = ChunkLayout::make(clips.front().z.dim(0), cfg.chunk_len);
  TrainResult res;
  std::int64_t start = 0;
  if (!run.resume_from.empty()) {
    params = load_dit(run.resume_from / "model.ckpt", cfg);
    start = load_train_state(run.resume_from / "state.ckpt", params, res.opt);
  }

  std::ofstream csv;
  if (!run.out_dir.empty()) {
    fs::create_directories(run.out_dir);
    const fs::path p = run.out_dir / "loss.csv";
    const bool append = start > 0 && fs::exists(p);
    csv.open(p, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + p.string());
    if (!append) csv << "step,L_S,L_CON,L_SMO,total,grad_norm\n";
  }

  const CounterRng base = CounterRng(tc.seed).split(0x7261696eULL);
  const std::int64_t total = tc.total_steps(static_cast<std::int64_t>(clips.size()));
  for (std::int64_t step = start + 1; step <= total; ++step) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(step));
    std::vector<const LatentClip*> batch;
    std::vector<NoiseDraw> noise;
    for (std::int64_t b = 0; b < tc.batch_size; ++b) {
      const LatentClip& c = clips[rng.below(clips.size())];
      batch.push_back(&c);
      noise.push_back(draw_noise(layout, c.z.dims(), tc, rng));
    }
    StepReport rep;
    try {
      rep = step_fn(params, res.opt, batch, noise);
    } catch (const NumericalError& e) {
      if (csv) csv << step << ",nan,nan,nan,nan,nan\n" << std::flush;
      throw NumericalError("step " + std::to_string(step) + ": " + e.what());
    }
    rep.step = step;
    res.curve.push_back(rep);
    if (csv)
      csv << step << ',' << fmt(rep.l_s) << ',' << fmt(rep.l_con) << ',' << fmt(rep.l_smo) << ',' << fmt(rep.total) << ','
          << fmt(rep.grad_norm) << '\n';
    if (run.on_step) run.on_step(rep);
    if (!run.out_dir.empty() && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(step));
      const fs::path dir = run.out_dir / "checkpoints" / name;
      fs::create_directories(dir);
      save_dit(dir / "model.ckpt", params, cfg);
      save_train_state(dir / "state.ckpt", params, res.opt, step);
    }
  }
  if (!run.out_dir.empty()) save_dit(run.out_dir / "model.ckpt", params, cfg);
  res.params = std::move(params);
  return res;
}

}  // namespace

TrainResult train_teacher(const std::vector<LatentClip>& clips, const ModelConfig& cfg, const TrainConfig& tc, const RunOptions& run) {
  CounterRng init_rng = CounterRng(tc.seed).split(0x696e6974ULL);
  return run_loop(clips, cfg, tc, run, init_dit(cfg, init_rng),
                  [&](ParamStore& p, AdamState& opt, const std::vector<const LatentClip*>& b, const std::vector<NoiseDraw>& n) {
                    return teacher_step(p, cfg, opt, b, n, tc);
                  });
}

TrainResult train_student(const std::vector<LatentClip>& clips, const ParamStore& teacher, const ModelConfig& cfg,
                          const TrainConfig& tc, const RunOptions& run) {
  return run_loop(clips, cfg, tc, run, clone_params(teacher),
                  [&](ParamStore& p, AdamState& opt, const std::vector<const LatentClip*>& b, const std::vector<NoiseDraw>& n) {
                    return student_step(p, teacher, cfg, opt, b, n, tc);
                  });
}

}  // namespace rest
