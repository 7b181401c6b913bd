#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rest/optim.hpp"
#include "rest/tensor.hpp"

// Toy latent codecs. Videos are stored frame-major as [F, H, W, Dv] and
// latents as [f, h, w, dv]; speech features are [F, D_A] and speech latents
// [f, hw, d_A]. Temporal compression keeps the first frame on its own:
// f = 1 + (F - 1) / rF.

namespace rest {

/// Number of latent frames produced from `frames` pixel/feature frames.
std::int64_t latent_frames(std::int64_t frames, std::int64_t temporal_ratio);
/// Inverse of latent_frames.
std::int64_t pixel_frames(std::int64_t latent, std::int64_t temporal_ratio);

struct VideoShape {
  std::int64_t H = 32, W = 32, F = 37;
  std::int64_t rH = 8, rW = 8, rF = 4;
  std::int64_t Dv = 3, dv = 8;

  /// Throws ShapeError stating the divisibility that failed.
  void validate() const;
  [[nodiscard]] std::int64_t h() const { return H / rH; }
  [[nodiscard]] std::int64_t w() const { return W / rW; }
  [[nodiscard]] std::int64_t f() const { return latent_frames(F, rF); }
  [[nodiscard]] Dims video_dims() const { return {F, H, W, Dv}; }
  [[nodiscard]] Dims latent_dims() const { return {f(), h(), w(), dv}; }
  [[nodiscard]] VideoShape with_frames(std::int64_t frames) const {
    VideoShape s = *this;
    s.F = frames;
    return s;
  }

  /// 512x512, 121 frames at 32x32x8 compression (shape arithmetic only).
  static VideoShape full_scale();
};

struct SpeechShape {
  std::int64_t F = 37;                 ///< feature frames, one per video frame
  std::int64_t rF = 4;                 ///< temporal ratio, shared with the video codec
  std::int64_t samples_per_frame = 32; ///< Hw: raw samples per analysis window
  std::int64_t bands = 8;              ///< D_A: feature bins per frame
  std::int64_t tokens = 4;             ///< hw: latent tokens per latent frame
  std::int64_t latent_dim = 8;         ///< d_A

  void validate() const;
  [[nodiscard]] std::int64_t raw_samples() const { return F * samples_per_frame; }
  [[nodiscard]] std::int64_t f() const { return latent_frames(F, rF); }
  [[nodiscard]] SpeechShape with_frames(std::int64_t frames) const {
    SpeechShape s = *this;
    s.F = frames;
    return s;
  }
};

/// Toy speech front end: per video frame, the log-energy log(1 + P_b) of DFT
/// bins b = 1..bands of that frame's window of `samples_per_frame` samples,
/// with P_b = (2/N)^2 |X_b|^2 so a unit cosine at bin b gives P_b = 1.
/// Throws AlignmentError if the waveform does not split into
/// `expected_frames` windows (pass 0 to skip the check).
Tensor speech_features(std::span<const float> waveform, std::int64_t samples_per_frame, std::int64_t bands,
                       std::int64_t expected_frames = 0);

/// Per-frame audio energy recovered from features: sum_b (exp(S_b) - 1).
std::vector<double> feature_energy(const Tensor& features);

/// Linear patch autoencoder with per-channel latent standardization:
/// encode(P) = (P W_e + b_e - mu) / sigma, decode(Z) = (Z sigma + mu) W_d + b_d.
struct LinearPatchCodec {
  Tensor enc_w, enc_b, dec_w, dec_b;
  Tensor latent_mean, latent_inv_std;  // not trained; fitted after training

  static LinearPatchCodec init(std::int64_t in_dim, std::int64_t out_dim, CounterRng& rng);
  [[nodiscard]] Tensor encode(const Tensor& patches) const;
  [[nodiscard]] Tensor decode(const Tensor& latents) const;
  [[nodiscard]] std::int64_t in_dim() const { return enc_w.dim(0); }
  [[nodiscard]] std::int64_t out_dim() const { return enc_w.dim(1); }

  void export_to(ParamStore& out, const std::string& prefix) const;
  static LinearPatchCodec import_from(const ParamStore& in, const std::string& prefix);
};

struct CodecTrainOptions {
  int epochs = 200;
  float lr = 1e-4f;      // peak; cosine-decayed to 0 over the epochs
  bool pca_init = true;  // start from the principal subspace of the patches
};

/// Full-batch Adam on reconstruction MSE (optionally from a PCA start), then fits the latent
/// standardization on the training patches. Returns per-epoch loss.
std::vector<double> train_patch_codec(LinearPatchCodec& codec, const Tensor& patches, const CodecTrainOptions& opts);

class VideoCodec {
 public:
  VideoCodec() = default;
  VideoCodec(std::int64_t rH, std::int64_t rW, std::int64_t rF, std::int64_t Dv, std::int64_t dv, CounterRng& rng);

  /// [F, H, W, Dv] -> [f, h, w, dv]. Differentiable.
  [[nodiscard]] Tensor encode(const Tensor& video) const;
  /// [f, h, w, dv] -> [F, H, W, Dv] at the given pixel size.
  [[nodiscard]] Tensor decode(const Tensor& latents, std::int64_t H, std::int64_t W) const;

  /// Patch matrices of a clip: first-frame patches [h*w, rH*rW*Dv] and the
  /// remaining patches [(f-1)*h*w, rF*rH*rW*Dv].
  [[nodiscard]] std::pair<Tensor, Tensor> patchify(const Tensor& video) const;

  std::vector<double> fit(const std::vector<Tensor>& videos, const CodecTrainOptions& opts);

  [[nodiscard]] ParamStore export_params() const;
  static VideoCodec import_params(const ParamStore& params);

  [[nodiscard]] std::int64_t rH() const { return rH_; }
  [[nodiscard]] std::int64_t rW() const { return rW_; }
  [[nodiscard]] std::int64_t rF() const { return rF_; }
  [[nodiscard]] std::int64_t channels() const { return Dv_; }
  [[nodiscard]] std::int64_t latent_channels() const { return first_.out_dim(); }

 private:
  VideoShape shape_for(const Dims& video_dims) const;

  std::int64_t rH_ = 8, rW_ = 8, rF_ = 4, Dv_ = 3;
  LinearPatchCodec first_;
  LinearPatchCodec rest_;
};

class SpeechCodec {
 public:
  SpeechCodec() = default;
  SpeechCodec(std::int64_t rF, std::int64_t bands, std::int64_t tokens, std::int64_t latent_dim, CounterRng& rng);

  /// [F, D_A] -> [f, hw, d_A]. Throws AlignmentError if F is not 1 + k*rF.
  [[nodiscard]] Tensor encode(const Tensor& features) const;
  /// [f, hw, d_A] -> [F, D_A].
  [[nodiscard]] Tensor decode(const Tensor& latents) const;

  std::vector<double> fit(const std::vector<Tensor>& features, const CodecTrainOptions& opts);

  [[nodiscard]] ParamStore export_params() const;
  static SpeechCodec import_params(const ParamStore& params);

  [[nodiscard]] std::int64_t tokens() const { return tokens_; }
  [[nodiscard]] std::int64_t latent_dim() const { return latent_dim_; }
  [[nodiscard]] std::int64_t rF() const { return rF_; }
  [[nodiscard]] const LinearPatchCodec& first_codec() const { return first_; }

 private:
  std::pair<Tensor, Tensor> windows(const Tensor& features) const;

  std::int64_t rF_ = 4, bands_ = 8, tokens_ = 4, latent_dim_ = 8;
  LinearPatchCodec first_;
  LinearPatchCodec rest_;
};

}  // namespace rest
