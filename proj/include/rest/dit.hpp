#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rest/optim.hpp"
#include "rest/rng.hpp"
#include "rest/tensor.hpp"

// Audio-to-video diffusion transformer over frame-major latent tokens.
//
// A frame of latents [h, w, dv] becomes h*w tokens. Every block runs
//   x += SelfAttn(modLN(x))        keys: [ID sink | previous chunk | current]
//   x += CrossAttn(modLN(x), e_g)  each frame attends to its own audio slot
//   x += MLP(modLN(x))
// where modLN(x) = LN(x) * (1 + scale_g) + shift_g, with (shift, scale)
// projected from frame g's timestep embedding.
//
// Teacher mode attends over [z_R | all frames] at once. Student mode sees one
// chunk at a time: the first chunk carries z_R as extra tokens and seeds the
// cache; later chunks see only their frames plus the cached keys/values.

namespace rest {

struct ModelConfig {
  std::int64_t blocks = 4;
  std::int64_t d_model = 64;
  std::int64_t heads = 4;
  std::int64_t h = 4, w = 4;
  std::int64_t latent_dim = 8;    // dv
  std::int64_t chunk_len = 4;     // latent frames per chunk, shared boundary included
  std::int64_t t_dim = 32;        // sinusoidal timestep features
  std::int64_t mlp_ratio = 2;
  std::int64_t audio_tokens = 4;  // hw
  std::int64_t audio_dim = 8;     // d_A
  bool no_id_sink = false;
  bool no_context_cache = false;

  void validate() const;
  [[nodiscard]] std::int64_t tokens_per_frame() const { return h * w; }

  /// Shape-only preset at full scale: 28 blocks.
  static ModelConfig full_scale();
};

enum class InitMode {
  standard,  // zero cross-attention output, modulation and output layer
  random     // every tensor random; used by oracles so no path is trivially zero
};

ParamStore init_dit(const ModelConfig& cfg, CounterRng& rng, InitMode mode = InitMode::standard);

/// Views into one block's parameters.
struct BlockParams {
  Tensor mod_w, mod_b;                    // [d, 6d], [6d]
  Tensor wq, wk, wv, wo, bo;              // self-attention
  Tensor xq, xk, xv, xo;                  // cross-attention, no biases
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};
BlockParams block_params(const ParamStore& p, std::int64_t block);

struct QKV {
  Tensor q, k, v;  // [tokens, d]
};
/// Per-head projections are slices of one d x d projection each.
QKV qkv(const Tensor& normed, const BlockParams& b);

/// Frame-level cross-attention: normed tokens [frames, h*w, d] attend to
/// audio [frames, hw, d_A] slot by slot. Returns the residual delta.
Tensor audio_cross_attention(const Tensor& normed, const Tensor& audio, const BlockParams& b, std::int64_t heads);

/// Per-(block, step) key/value store. Sink rows come from the reference
/// tokens of the first chunk and are never overwritten; context rows hold
/// the previous chunk's frames at the same block and step.
class IDContextCache {
 public:
  struct Slot {
    Tensor sink_k, sink_v;  // [h*w, d]
    Tensor ctx_k, ctx_v;    // [f*h*w, d]
  };

  IDContextCache() = default;
  IDContextCache(const ModelConfig& cfg, int steps);

  [[nodiscard]] Slot& slot(std::int64_t block, int step);
  [[nodiscard]] const Slot& slot(std::int64_t block, int step) const;
  /// Chunks completed so far; 0 while the first chunk is being denoised.
  [[nodiscard]] std::int64_t chunk_index() const { return chunk_; }
  /// Marks the current chunk finished. Throws CacheError if any slot lacks a sink.
  void advance();
  void reset();

  [[nodiscard]] int steps() const { return steps_; }
  [[nodiscard]] std::int64_t blocks() const { return blocks_; }
  /// Bytes of key/value payload currently held.
  [[nodiscard]] std::size_t bytes() const;
  /// Hash over every sink tensor; stable once the first chunk is done.
  [[nodiscard]] std::uint64_t sink_hash() const;
  /// Drops autograd history so a long stream does not retain old graphs.
  void detach();

 private:
  std::int64_t blocks_ = 0;
  int steps_ = 0;
  std::int64_t chunk_ = 0;
  std::vector<Slot> slots_;
};

/// One self-attention call as seen by the oracle: normalized inputs, the
/// residual stream before and after, and where the keys came from.
struct AttentionRecord {
  std::int64_t chunk = -1;  // -1 for teacher calls
  int step = 0;
  std::int64_t block = 0;
  bool has_ref = false;     // first S rows are reference tokens
  bool used_sink = false;
  bool used_ctx = false;
  Tensor normed;            // [tokens, d]
  Tensor before, after;     // [tokens, d]
};

struct AttentionTrace {
  std::vector<AttentionRecord> records;
};

enum class DitMode { teacher, student };

struct DitCall {
  DitMode mode = DitMode::teacher;
  Tensor z_ref;                   // [1, h, w, dv]; student: read only on the first chunk
  Tensor frames;                  // [n, h, w, dv]
  Tensor audio;                   // [n, hw, d_A]
  std::vector<float> t;           // one per frame (reference pinned at 0 internally)
  IDContextCache* cache = nullptr;  // student only
  int step = 0;                   // student: cache step slot
  AttentionTrace* trace = nullptr;
};

/// Predicted velocity [n, h, w, dv] for the frames of the call.
/// Throws UsageError on mode/cache mismatch, ShapeError/AlignmentError on bad inputs.
Tensor dit_forward(const ParamStore& p, const ModelConfig& cfg, const DitCall& call);

/// Teacher position of frame g: chunk-local index of its owning chunk.
std::int64_t teacher_frame_position(std::int64_t g, std::int64_t chunk_len);

/// Analytic multiply-add FLOPs (2 per MAC) of matmuls and attention.
std::uint64_t student_chunk_flops(const ModelConfig& cfg, std::int64_t chunk_index);
std::uint64_t teacher_flops(const ModelConfig& cfg, std::int64_t frames);
/// Bytes a cache holds after `chunks` chunks: constant for chunks >= 1.
std::size_t cache_bytes_formula(const ModelConfig& cfg, int steps, std::int64_t chunks);
/// Bytes a naive cache keeping every previous chunk would hold.
std::size_t full_history_cache_bytes(const ModelConfig& cfg, int steps, std::int64_t chunks);

void save_dit(const std::filesystem::path& path, const ParamStore& p, const ModelConfig& cfg);
/// Throws IoError if the stored architecture differs from `cfg`.
ParamStore load_dit(const std::filesystem::path& path, const ModelConfig& cfg);

}  // namespace rest
