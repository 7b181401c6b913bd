#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rest/chunking.hpp"
#include "rest/dit.hpp"
#include "rest/flow.hpp"

namespace rest {

struct GenerateOptions {
  int steps = 8;
  float alpha = 6.0f;
  std::uint64_t seed = 0;
  bool uncond_drop_audio = true;  // unconditional branch of the joint CFG
  bool uncond_drop_ref = true;
};

/// v_uncond + alpha (v_cond - v_uncond); alpha 1 and 0 return the branches exactly.
Tensor joint_cfg(const Tensor& v_cond, const Tensor& v_uncond, float alpha);

/// Initial noise of one latent frame. Frame g always gets the same draw for a
/// given seed, so chunks that share a boundary frame share its noise.
Tensor frame_noise(std::uint64_t seed, std::int64_t frame, const Dims& frame_dims);

/// Chunk-by-chunk generator. Audio arrives one chunk at a time, so a chunk
/// can only depend on the audio seen so far.
class StreamSession {
 public:
  StreamSession(const ParamStore& params, const ModelConfig& cfg, Tensor z_ref, GenerateOptions opts);

  /// Denoises the next chunk from audio [chunk_len, hw, d_A] (shared boundary
  /// frame included) and returns the frames it emits: all of them for the
  /// first chunk, the frames after the shared one afterwards.
  Tensor next_chunk(const Tensor& audio_chunk);

  [[nodiscard]] std::int64_t chunks_done() const { return chunk_; }
  /// Full denoised chunk including the shared frame, for boundary diagnostics.
  [[nodiscard]] const Tensor& last_chunk() const { return last_; }
  [[nodiscard]] std::size_t cache_bytes() const;

 private:
  Tensor velocity(const Tensor& z, const Tensor& audio, float t, int step);

  const ParamStore* params_;
  ModelConfig cfg_;
  Tensor z_ref_;
  GenerateOptions opts_;
  TimeSchedule schedule_;
  IDContextCache cond_cache_, uncond_cache_;
  std::int64_t chunk_ = 0;
  Tensor last_;
};

struct GenerateResult {
  Tensor latents;                               // [f_total, h, w, dv]
  std::vector<double> chunk_latency_ms;         // wall time per chunk
  std::vector<std::size_t> cache_bytes;         // after each chunk
  std::vector<double> boundary_disagreement;    // per shared frame
};

/// Chunk-by-chunk reverse process over a whole audio track [f_total, hw, d_A].
/// on_chunk sees each chunk's emitted frames as soon as they exist.
GenerateResult generate(const ParamStore& params, const ModelConfig& cfg, const Tensor& z_ref, const Tensor& audio,
                        const GenerateOptions& opts, const std::function<void(std::int64_t, const Tensor&)>& on_chunk = {});

/// Non-streaming sampler: the teacher-mode model denoises every frame at once
/// with the same schedule, noise and CFG.
Tensor generate_full(const ParamStore& params, const ModelConfig& cfg, const Tensor& z_ref, const Tensor& audio,
                     const GenerateOptions& opts);

// ---------------------------------------------------------------------------
// Metrics

/// Per-frame ground truth needed by the proxies.
struct EvalTruth {
  Tensor reference;               // [1, H, W, Dv]
  std::vector<double> energy;     // audio feature energy per pixel frame
  std::int64_t rF = 4;
  std::int64_t chunk_len = 4;     // latent frames per chunk
};

struct MetricsReport {
  double boundary_discontinuity = 0.0;  // boundary_second_diff minus the interior baseline
  double boundary_second_diff = 0.0;    // mean latent second-difference norm straddling chunk boundaries
  double interior_discontinuity = 0.0;  // same, away from boundaries
  std::vector<double> identity_drift;   // cosine of mean colour to the reference, per chunk
  double identity_drift_mean = 0.0;
  double sync_proxy = 0.0;              // Pearson(aperture, audio energy)
  std::vector<double> per_chunk_latency_ms;
  std::vector<std::size_t> cache_bytes;
  std::vector<double> boundary_disagreement;

  [[nodiscard]] std::string to_json() const;
};

/// Mean latent second-difference norms at boundaries and in the interior.
/// The reported discontinuity is their difference.
std::pair<double, double> boundary_discontinuity(const Tensor& latents, std::int64_t chunk_len);
std::vector<double> identity_drift(const Tensor& video, const Tensor& reference, std::int64_t rF, std::int64_t chunk_len);
/// Brightness removed from the reference along its colour direction, per frame.
std::vector<double> aperture(const Tensor& video, const Tensor& reference);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

MetricsReport evaluate(const Tensor& latents, const Tensor& video, const EvalTruth& truth);

// ---------------------------------------------------------------------------
// Benchmarks and dumps

struct BenchRow {
  std::int64_t chunk = 0;
  double wall_ms = 0.0;
  std::uint64_t flops = 0;           // analytic, all steps and CFG branches
  std::size_t cache_bytes = 0;
  std::size_t full_history_bytes = 0;
};

struct ScalingRow {
  std::int64_t chunks = 0;
  std::int64_t frames = 0;
  std::uint64_t teacher_flops = 0;   // one full-sequence evaluation per step
  std::uint64_t student_flops = 0;   // sum over chunks
  double measured_ratio = 0.0;       // FlopScope teacher / analytic teacher
};

struct BenchResult {
  std::vector<BenchRow> per_chunk;
  std::vector<ScalingRow> scaling;
  double first_chunk_ms = 0.0;
  double full_sequence_ms = 0.0;     // non-streaming sampler, same frames
};

/// Streams `chunks` chunks with random audio, keeping each chunk's fastest
/// time over `repeats` runs, then times the non-streaming sampler.
BenchResult bench_stream(const ParamStore& params, const ModelConfig& cfg, std::int64_t chunks, const GenerateOptions& opts,
                         int repeats = 3);
void write_bench_csv(const std::filesystem::path& dir, const BenchResult& r);

/// Raw video dump, little-endian:
///   "RESTRAWV" | version u32 = 1 | frames u32 | H u32 | W u32 | C u32 | f32[frames*H*W*C]
void save_raw_video(const std::filesystem::path& path, const Tensor& video);
Tensor load_raw_video(const std::filesystem::path& path);

}  // namespace rest
