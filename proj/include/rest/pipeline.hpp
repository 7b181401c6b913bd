#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "rest/codec.hpp"
#include "rest/corpus.hpp"
#include "rest/dit.hpp"
#include "rest/stream.hpp"
#include "rest/train.hpp"

namespace rest {

inline constexpr int kConfigSchemaVersion = 1;

/// Everything a run needs. Parsed from JSON with unknown keys rejected;
/// missing keys keep the defaults below.
struct RunConfig {
  std::uint64_t seed = 1;
  CorpusConfig corpus;
  CodecTrainOptions codec;  // shared by the video and speech codecs
  std::int64_t audio_tokens = 4;
  std::int64_t audio_latent_dim = 8;
  ModelConfig model;  // h, w, latent and audio sizes are derived
  TrainConfig teacher;
  TrainConfig student;
  GenerateOptions generate;
  std::int64_t eval_frames = 73;  // pixel frames per evaluation clip
  std::int64_t eval_seeds = 2;    // generation seeds per evaluation clip

  RunConfig();
  /// Fills the derived model fields and checks every section.
  void resolve();
  [[nodiscard]] std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  /// Applies ablation flag names (no_asd, no_smooth, no_contrastive,
  /// no_id_sink, no_context_cache) to the student stage.
  void apply_flags(const std::vector<std::string>& flags);
  [[nodiscard]] ModelConfig student_model() const { return student_config(model, student); }
};

struct Codecs {
  VideoCodec video;
  SpeechCodec speech;
  void save(const std::filesystem::path& path) const;
  static Codecs load(const std::filesystem::path& path);
};

Codecs train_codecs(const Corpus& corpus, const RunConfig& cfg);

/// Held-out identities re-rendered at evaluation length.
std::vector<Clip> eval_clips(const Corpus& corpus, const RunConfig& cfg);

struct ClipEval {
  std::string id;
  std::uint64_t seed = 0;
  MetricsReport report;
  Tensor latents;
  Tensor video;
};

struct EvalSummary {
  double boundary_discontinuity = 0.0;
  double boundary_second_diff = 0.0;
  double interior_discontinuity = 0.0;
  double identity_drift = 0.0;  // mean cosine, higher is better
  double sync_proxy = 0.0;
  std::vector<ClipEval> clips;
  [[nodiscard]] std::string to_json() const;
};

/// Streams every evaluation clip through the student for each generation
/// seed, decodes, and averages the metrics.
EvalSummary evaluate_model(const ParamStore& params, const ModelConfig& model, const Codecs& codecs, const std::vector<Clip>& clips,
                           const RunConfig& cfg);

/// Worker cap from REST_THREADS; defaults to the hardware concurrency.
int rest_threads();

using Log = std::function<void(const std::string&)>;

/// Shared inputs of every ablation variant: corpus, codecs, latents and the
/// teacher. Artifacts go under `out` when it is non-empty.
struct Experiment {
  RunConfig cfg;
  Corpus corpus;
  Codecs codecs;
  std::vector<LatentClip> train;
  std::vector<Clip> eval;
  TrainResult teacher;
};

Experiment prepare_experiment(const RunConfig& cfg, const std::filesystem::path& out, const Log& log = {});

struct VariantOutcome {
  std::string variant;
  EvalSummary eval;
  std::vector<StepReport> curve;
  double train_seconds = 0.0;
};

/// Variant names: full, no_id_sink, no_context_cache, no_asd, no_contrastive, no_smooth.
/// Each distils a student from the shared teacher with the same seed.
VariantOutcome run_variant(const Experiment& ex, const std::string& variant, const std::filesystem::path& out, const Log& log = {});
/// Runs the variants on up to `threads` workers; results keep the input order.
std::vector<VariantOutcome> run_ablation(const Experiment& ex, const std::vector<std::string>& variants, const std::filesystem::path& out,
                                         int threads, const Log& log = {});
std::string ablation_json(const std::vector<VariantOutcome>& outcomes);

/// Writes `text` to `path`, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace rest
