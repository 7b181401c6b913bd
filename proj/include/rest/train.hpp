#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rest/chunking.hpp"
#include "rest/codec.hpp"
#include "rest/corpus.hpp"
#include "rest/dit.hpp"
#include "rest/optim.hpp"
#include "rest/rng.hpp"

namespace rest {

/// One training/evaluation example in latent space.
struct LatentClip {
  std::string id;
  Tensor z_ref;  // [1, h, w, dv]
  Tensor z;      // [f, h, w, dv]
  Tensor audio;  // [f, hw, d_A]
};

LatentClip encode_clip(const Clip& clip, const VideoCodec& video, const SpeechCodec& speech);
std::vector<LatentClip> encode_clips(const std::vector<Clip>& clips, const VideoCodec& video, const SpeechCodec& speech);

struct TrainConfig {
  float lr = 1e-5f;
  std::int64_t batch_size = 1;
  float lambda_con = 1.0f;
  float lambda_smo = 1.0f;
  float tau = 0.07f;
  std::int64_t epochs = 1;
  std::int64_t max_steps = 0;  // > 0 overrides epochs
  std::uint64_t seed = 0;
  bool no_asd = false;
  bool no_smooth = false;
  bool no_contrastive = false;
  bool no_id_sink = false;
  bool no_context_cache = false;
  bool infonce = false;             // contrastive denominator includes the positive
  bool literal_smoothness = false;  // signed sum of second differences, no norm
  float audio_drop = 0.1f;          // condition dropout for CFG
  float ref_drop = 0.1f;
  double clip_norm = 1.0;
  std::int64_t checkpoint_every = 0;

  void validate() const;
  [[nodiscard]] std::int64_t total_steps(std::int64_t clips) const;
};

/// Student architecture: the teacher's, with the ablation switches applied.
ModelConfig student_config(const ModelConfig& base, const TrainConfig& tc);

/// Randomness of one example: per-chunk t, Gaussian noise over all latent
/// frames, and the two condition-dropout coins.
struct NoiseDraw {
  std::vector<float> chunk_t;
  Tensor eps;
  bool drop_audio = false;
  bool drop_ref = false;
};

NoiseDraw draw_noise(const ChunkLayout& layout, const Dims& latent_dims, const TrainConfig& tc, CounterRng& rng);

/// A velocity model. Teacher and student DiTs, and test stubs, share this shape.
using Predictor = std::function<Tensor(const DitCall&)>;
Predictor dit_predictor(const ParamStore& params, const ModelConfig& cfg);

/// ||v - T(Z(t), E, z_R, t)||^2 (mean) over the latent frames, with
/// v = eps - Z(0) and chunk-constant t.
Tensor teacher_loss(const Predictor& teacher, const LatentClip& clip, const NoiseDraw& noise, std::int64_t chunk_len);

struct FlowPair {
  Tensor student;  // [f, ...]
  Tensor teacher;  // [f, ...]
  void validate(std::int64_t min_frames) const;
};

/// -(1/f) sum_i log( exp(s_ii/tau) / sum_{j!=i} exp(s_ij/tau) ), s = cosine of
/// per-frame flattened flows. With include_positive the sum runs over all j.
Tensor contrastive_loss(const FlowPair& pair, float tau, bool include_positive = false);
/// (1/(f-2)) sum_i ||d2(student)_i - d2(teacher)_i||^2 over interior frames.
/// literal: sum of all elements of sum_i (d2(student)_i - d2(teacher)_i).
Tensor smoothness_loss(const FlowPair& pair, bool literal = false);

struct StudentLossTerms {
  Tensor l_s, l_con, l_smo, total;
};

/// Runs the teacher over the whole noised sequence (no grad) and the student
/// chunk by chunk through a fresh one-slot cache, as at inference. Each chunk
/// view is noised at its own t, shared boundary frame included.
StudentLossTerms student_losses(const Predictor& student, const Predictor& teacher, const ModelConfig& student_cfg,
                                const LatentClip& clip, const NoiseDraw& noise, const TrainConfig& tc);

struct StepReport {
  std::int64_t step = 0;
  double l_s = 0.0, l_con = 0.0, l_smo = 0.0, total = 0.0, grad_norm = 0.0;
};

/// One Adam update on the mean loss of the batch. Throws NumericalError,
/// without touching the parameters, if any loss or the gradient norm is not finite.
StepReport teacher_step(ParamStore& params, const ModelConfig& cfg, AdamState& opt, const std::vector<const LatentClip*>& batch,
                        const std::vector<NoiseDraw>& noise, const TrainConfig& tc);
StepReport student_step(ParamStore& student, const ParamStore& teacher, const ModelConfig& cfg, AdamState& opt,
                        const std::vector<const LatentClip*>& batch, const std::vector<NoiseDraw>& noise, const TrainConfig& tc);

struct RunOptions {
  std::filesystem::path out_dir;      // empty: keep everything in memory
  std::filesystem::path resume_from;  // a checkpoint directory written by a previous run
  std::function<void(const StepReport&)> on_step;
};

struct TrainResult {
  ParamStore params;
  AdamState opt;
  std::vector<StepReport> curve;
};

/// Writes <out>/loss.csv, <out>/checkpoints/step_NNNNNN/{model,state}.ckpt
/// every checkpoint_every steps, and <out>/model.ckpt at the end.
TrainResult train_teacher(const std::vector<LatentClip>& clips, const ModelConfig& cfg, const TrainConfig& tc,
                          const RunOptions& run = {});
/// The student starts from the teacher's weights; the teacher is never updated.
TrainResult train_student(const std::vector<LatentClip>& clips, const ParamStore& teacher, const ModelConfig& cfg,
                          const TrainConfig& tc, const RunOptions& run = {});

void save_train_state(const std::filesystem::path& path, const ParamStore& params, const AdamState& opt, std::int64_t step);
/// Restores Adam moments into `opt` and returns the step count.
std::int64_t load_train_state(const std::filesystem::path& path, const ParamStore& params, AdamState& opt);

}  // namespace rest
