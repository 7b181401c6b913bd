#include "rest/stream.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "rest/codec.hpp"
#include "rest/error.hpp"
#include "rest/ops.hpp"

namespace rest {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.dims()); }

}  // namespace

Tensor joint_cfg(const Tensor& v_cond, const Tensor& v_uncond, float alpha) {
  if (v_cond.dims() != v_uncond.dims())
    throw ShapeError("joint_cfg: " + to_string(v_cond.dims()) + " vs " + to_string(v_uncond.dims()));
  if (alpha == 1.0f) return v_cond;
  if (alpha == 0.0f) return v_uncond;
  return add(v_uncond, scale(sub(v_cond, v_uncond), alpha));
}

Tensor frame_noise(std::uint64_t seed, std::int64_t frame, const Dims& frame_dims) {
  CounterRng rng = CounterRng(seed).split(0x6e6f697365ULL).split(static_cast<std::uint64_t>(frame));
  Dims d{1};
  d.insert(d.end(), frame_dims.begin(), frame_dims.end());
  return Tensor::randn(d, rng);
}

StreamSession::StreamSession(const ParamStore& params, const ModelConfig& cfg, Tensor z_ref, GenerateOptions opts)
    : params_(&params),
      cfg_(cfg),
      z_ref_(std::move(z_ref)),
      opts_(opts),
      schedule_(TimeSchedule::uniform(opts.steps)),
      cond_cache_(cfg, opts.steps),
      uncond_cache_(cfg, opts.steps) {
  cfg_.validate();
  if (z_ref_.dims() != Dims{1, cfg.h, cfg.w, cfg.latent_dim})
    throw ShapeError("reference latent is " + to_string(z_ref_.dims()));
}

std::size_t StreamSession::cache_bytes() const { return cond_cache_.bytes() + uncond_cache_.bytes(); }

Tensor StreamSession::velocity(const Tensor& z, const Tensor& audio, float t, int step) {
  const std::vector<float> tv(static_cast<std::size_t>(z.dim(0)), t);
  const Tensor v_cond = dit_forward(*params_, cfg_, {DitMode::student, z_ref_, z, audio, tv, &cond_cache_, step, nullptr});
  if (opts_.alpha == 1.0f) return v_cond;
  const Tensor ref_u = opts_.uncond_drop_ref ? zeros_like(z_ref_) : z_ref_;
  const Tensor audio_u = opts_.uncond_drop_audio ? zeros_like(audio) : audio;
  const Tensor v_unc = dit_forward(*params_, cfg_, {DitMode::student, ref_u, z, audio_u, tv, &uncond_cache_, step, nullptr});
  return joint_cfg(v_cond, v_unc, opts_.alpha);
}

Tensor StreamSession::next_chunk(const Tensor& audio_chunk) {
  const std::int64_t f = cfg_.chunk_len;
  if (audio_chunk.dims() != Dims{f, cfg_.audio_tokens, cfg_.audio_dim})
    throw AlignmentError("chunk audio is " + to_string(audio_chunk.dims()) + ", expected [" + std::to_string(f) + ", " +
                         std::to_string(cfg_.audio_tokens) + ", " + std::to_string(cfg_.audio_dim) + "]");
  NoGradGuard ng;
  const Dims frame{cfg_.h, cfg_.w, cfg_.latent_dim};
  const std::int64_t first = chunk_ * (f - 1);
  std::vector<Tensor> noise;
  for (std::int64_t g = first; g < first + f; ++g) noise.push_back(frame_noise(opts_.seed, g, frame));
  Tensor z = concat(noise, 0);
  for (int s = 0; s < schedule_.steps(); ++s) {
    const float t_from = schedule_.knots[static_cast<std::size_t>(s)];
    const float t_to = schedule_.knots[static_cast<std::size_t>(s) + 1];
    z = euler_step(z, velocity(z, audio_chunk, t_from, s), t_from, t_to);
  }
  cond_cache_.advance();
  if (opts_.alpha != 1.0f) uncond_cache_.advance();
  last_ = z;
  ++chunk_;
  return chunk_ == 1 ? z : slice(z, 0, 1, f);
}

GenerateResult generate(const ParamStore& params, const ModelConfig& cfg, const Tensor& z_ref, const Tensor& audio,
                        const GenerateOptions& opts, const std::function<void(std::int64_t, const Tensor&)>& on_chunk) {
  const ChunkLayout layout = ChunkLayout::make(audio.dim(0), cfg.chunk_len);
  const auto audio_chunks = segment(audio, layout);
  StreamSession session(params, cfg, z_ref, opts);
  GenerateResult res;
  std::vector<Tensor> emitted, full;
  for (std::int64_t j = 0; j < layout.k; ++j) {
    const auto t0 = Clock::now();
    Tensor out = session.next_chunk(audio_chunks[static_cast<std::size_t>(j)]);
    res.chunk_latency_ms.push_back(ms_since(t0));
    res.cache_bytes.push_back(session.cache_bytes());
    full.push_back(session.last_chunk());
    if (on_chunk) on_chunk(j, out);
    emitted.push_back(std::move(out));
  }
  res.latents = concat(emitted, 0);
  res.boundary_disagreement = stitch(full).boundary_disagreement;
  return res;
}

Tensor generate_full(const ParamStore& params, const ModelConfig& cfg, const Tensor& z_ref, const Tensor& audio,
                     const GenerateOptions& opts) {
  const std::int64_t n = audio.dim(0);
  ChunkLayout::make(n, cfg.chunk_len);
  NoGradGuard ng;
  const Dims frame{cfg.h, cfg.w, cfg.latent_dim};
  std::vector<Tensor> noise;
  for (std::int64_t g = 0; g < n; ++g) noise.push_back(frame_noise(opts.seed, g, frame));
  Tensor z = concat(noise, 0);
  const TimeSchedule sched = TimeSchedule::uniform(opts.steps);
  const Tensor ref_u = opts.uncond_drop_ref ? zeros_like(z_ref) : z_ref;
  const Tensor audio_u = opts.uncond_drop_audio ? zeros_like(audio) : audio;
  for (int s = 0; s < sched.steps(); ++s) {
    const float t_from = sched.knots[static_cast<std::size_t>(s)];
    const float t_to = sched.knots[static_cast<std::size_t>(s) + 1];
    const std::vector<float> tv(static_cast<std::size_t>(n), t_from);
    const Tensor v_cond = dit_forward(params, cfg, {DitMode::teacher, z_ref, z, audio, tv, nullptr, 0, nullptr});
    Tensor v = v_cond;
    if (opts.alpha != 1.0f)
      v = joint_cfg(v_cond, dit_forward(params, cfg, {DitMode::teacher, ref_u, z, audio_u, tv, nullptr, 0, nullptr}), opts.alpha);
    z = euler_step(z, v, t_from, t_to);
  }
  return z;
}

// ---------------------------------------------------------------------------

std::pair<double, double> boundary_discontinuity(const Tensor& latents, std::int64_t chunk_len) {
  const std::int64_t n = latents.dim(0);
  const ChunkLayout layout = ChunkLayout::make(n, chunk_len);
  const std::int64_t per = latents.numel() / n;
  std::vector<bool> straddles(static_cast<std::size_t>(n), false);
  for (std::int64_t j = 1; j < layout.k; ++j) {
    const std::int64_t b = layout.begin(j);
    straddles[static_cast<std::size_t>(b)] = true;
    if (b + 1 < n) straddles[static_cast<std::size_t>(b + 1)] = true;
  }
  double bsum = 0.0, isum = 0.0;
  std::int64_t bn = 0, in = 0;
  for (std::int64_t g = 1; g + 1 < n; ++g) {
    double s = 0.0;
    for (std::int64_t e = 0; e < per; ++e) {
      const double d2 = static_cast<double>(latents.at((g + 1) * per + e)) - 2.0 * latents.at(g * per + e) + latents.at((g - 1) * per + e);
      s += d2 * d2;
    }
    if (straddles[static_cast<std::size_t>(g)]) {
      bsum += std::sqrt(s);
      ++bn;
    } else {
      isum += std::sqrt(s);
      ++in;
    }
  }
  return {bn ? bsum / static_cast<double>(bn) : 0.0, in ? isum / static_cast<double>(in) : 0.0};
}

namespace {

std::vector<double> mean_colour(const Tensor& video, std::int64_t f_begin, std::int64_t f_end) {
  const std::int64_t C = video.dim(3), per = video.numel() / video.dim(0);
  std::vector<double> m(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t f = f_begin; f < f_end; ++f)
    for (std::int64_t i = 0; i < per; ++i) m[static_cast<std::size_t>(i % C)] += video.at(f * per + i);
  return m;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return na > 0 && nb > 0 ? d / std::sqrt(na * nb) : 0.0;
}

}  // namespace

std::vector<double> identity_drift(const Tensor& video, const Tensor& reference, std::int64_t rF, std::int64_t chunk_len) {
  const std::int64_t F = video.dim(0);
  const ChunkLayout layout = ChunkLayout::make(latent_frames(F, rF), chunk_len);
  const std::vector<double> ref = mean_colour(reference, 0, 1);
  // Latent frame g >= 1 covers pixel frames 1 + (g-1) rF .. g rF; frame 0 covers pixel frame 0.
  const auto pixel_begin = [&](std::int64_t g) { return g == 0 ? 0 : 1 + (g - 1) * rF; };
  std::vector<double> out;
  for (std::int64_t j = 0; j < layout.k; ++j) {
    const std::int64_t last = layout.end(j) - 1;
    out.push_back(cosine(mean_colour(video, pixel_begin(layout.owned_begin(j)), 1 + last * rF), ref));
  }
  return out;
}

std::vector<double> aperture(const Tensor& video, const Tensor& reference) {
  const std::int64_t C = video.dim(3), per = video.numel() / video.dim(0);
  if (reference.numel() != per) throw ShapeError("reference " + to_string(reference.dims()) + " vs frames of " + to_string(video.dims()));
  const std::vector<double> c = mean_colour(reference, 0, 1);
  double n2 = 0.0;
  for (double x : c) n2 += x * x;
  std::vector<double> out;
  for (std::int64_t f = 0; f < video.dim(0); ++f) {
    double s = 0.0;
    for (std::int64_t i = 0; i < per; ++i)
      s += (static_cast<double>(reference.at(i)) - video.at(f * per + i)) * c[static_cast<std::size_t>(i % C)];
    out.push_back(n2 > 0 ? s / n2 : 0.0);
  }
  return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson needs two series of equal length >= 2");
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

MetricsReport evaluate(const Tensor& latents, const Tensor& video, const EvalTruth& truth) {
  if (static_cast<std::int64_t>(truth.energy.size()) != video.dim(0))
    throw AlignmentError(std::to_string(truth.energy.size()) + " energy values for " + std::to_string(video.dim(0)) + " frames");
  MetricsReport r;
  std::tie(r.boundary_second_diff, r.interior_discontinuity) = boundary_discontinuity(latents, truth.chunk_len);
  r.boundary_discontinuity = r.boundary_second_diff - r.interior_discontinuity;
  r.identity_drift = identity_drift(video, truth.reference, truth.rF, truth.chunk_len);
  for (double v : r.identity_drift) r.identity_drift_mean += v / static_cast<double>(r.identity_drift.size());
  r.sync_proxy = pearson(aperture(video, truth.reference), truth.energy);
  return r;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["boundary_discontinuity"] = boundary_discontinuity;
  j["boundary_second_diff"] = boundary_second_diff;
  j["interior_discontinuity"] = interior_discontinuity;
  j["identity_drift"] = identity_drift;
  j["identity_drift_mean"] = identity_drift_mean;
  j["sync_proxy"] = sync_proxy;
  j["per_chunk_latency_ms"] = per_chunk_latency_ms;
  j["cache_bytes"] = cache_bytes;
  j["boundary_disagreement"] = boundary_disagreement;
  return j.dump(2);
}

// ---------------------------------------------------------------------------

BenchResult bench_stream(const ParamStore& params, const ModelConfig& cfg, std::int64_t chunks, const GenerateOptions& opts,
                         int repeats) {
  if (chunks < 1 || repeats < 1) throw DomainError("bench needs at least one chunk and one repeat");
  const std::int64_t frames = 1 + chunks * (cfg.chunk_len - 1);
  CounterRng rng(opts.seed ^ 0xbe7cULL);
  const Tensor z_ref = Tensor::randn({1, cfg.h, cfg.w, cfg.latent_dim}, rng);
  const Tensor audio = Tensor::randn({frames, cfg.audio_tokens, cfg.audio_dim}, rng);
  const std::uint64_t branches = opts.alpha == 1.0f ? 1 : 2;
  const auto steps = static_cast<std::uint64_t>(opts.steps);

  BenchResult r;
  std::vector<double> best(static_cast<std::size_t>(chunks), std::numeric_limits<double>::infinity());
  GenerateResult g;
  for (int rep = 0; rep < repeats; ++rep) {
    g = generate(params, cfg, z_ref, audio, opts);
    for (std::size_t j = 0; j < best.size(); ++j) best[j] = std::min(best[j], g.chunk_latency_ms[j]);
  }
  for (std::int64_t j = 0; j < chunks; ++j) {
    const auto ju = static_cast<std::size_t>(j);
    r.per_chunk.push_back({j, best[ju], student_chunk_flops(cfg, j) * steps * branches, g.cache_bytes[ju],
                           full_history_cache_bytes(cfg, opts.steps, j + 1) * branches});
  }
  r.first_chunk_ms = best.front();

  r.full_sequence_ms = std::numeric_limits<double>::infinity();
  for (int rep = 0; rep < repeats; ++rep) {
    const auto t0 = Clock::now();
    (void)generate_full(params, cfg, z_ref, audio, opts);
    r.full_sequence_ms = std::min(r.full_sequence_ms, ms_since(t0));
  }

  std::uint64_t student_total = 0;
  NoGradGuard ng;
  for (std::int64_t k = 1; k <= chunks; ++k) {
    const std::int64_t n = 1 + k * (cfg.chunk_len - 1);
    student_total += student_chunk_flops(cfg, k - 1) * steps * branches;
    ScalingRow row{k, n, teacher_flops(cfg, n) * steps * branches, student_total, 0.0};
    FlopScope fs;
    (void)dit_forward(params, cfg, {DitMode::teacher, z_ref, Tensor::zeros({n, cfg.h, cfg.w, cfg.latent_dim}), slice(audio, 0, 0, n),
                                    std::vector<float>(static_cast<std::size_t>(n), 0.5f), nullptr, 0, nullptr});
    row.measured_ratio = static_cast<double>(fs.count()) / static_cast<double>(teacher_flops(cfg, n));
    r.scaling.push_back(row);
  }
  return r;
}

void write_bench_csv(const fs::path& dir, const BenchResult& r) {
  fs::create_directories(dir);
  std::ofstream a(dir / "bench_chunks.csv");
  std::ofstream b(dir / "bench_scaling.csv");
  if (!a || !b) throw IoError("cannot write benchmark CSVs under " + dir.string());
  a << "chunk,wall_ms,flops,cache_bytes,full_history_cache_bytes\n";
  for (const auto& row : r.per_chunk)
    a << row.chunk << ',' << row.wall_ms << ',' << row.flops << ',' << row.cache_bytes << ',' << row.full_history_bytes << '\n';
  b << "chunks,frames,teacher_flops,student_flops,teacher_measured_over_analytic\n";
  for (const auto& row : r.scaling)
    b << row.chunks << ',' << row.frames << ',' << row.teacher_flops << ',' << row.student_flops << ',' << row.measured_ratio << '\n';
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kRawMagic[8] = {'R', 'E', 'S', 'T', 'R', 'A', 'W', 'V'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("truncated raw video header");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 | static_cast<std::uint32_t>(b[2]) << 16 |
         static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace

void save_raw_video(const fs::path& path, const Tensor& video) {
  if (video.rank() != 4) throw ShapeError("raw video must be [F, H, W, C], got " + to_string(video.dims()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(kRawMagic, 8);
  put_u32(os, 1);
  for (int i = 0; i < 4; ++i) put_u32(os, static_cast<std::uint32_t>(video.dim(i)));
  for (float v : video.values()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw IoError("write failed for " + path.string());
}

Tensor load_raw_video(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kRawMagic, 8) != 0) throw IoError(path.string() + " is not a RESTRAWV file");
  if (get_u32(is) != 1) throw IoError(path.string() + ": unsupported raw video version");
  Dims d;
  for (int i = 0; i < 4; ++i) d.push_back(get_u32(is));
  std::vector<float> data(static_cast<std::size_t>(d[0] * d[1] * d[2] * d[3]));
  for (auto& v : data) v = std::bit_cast<float>(get_u32(is));
  return Tensor(d, std::move(data));
}

}  // namespace rest
