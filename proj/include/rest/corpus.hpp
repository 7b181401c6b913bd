#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rest/codec.hpp"
#include "rest/rng.hpp"
#include "rest/tensor.hpp"

// Synthetic talking-blob corpus. Each clip renders a Gaussian "head" of a
// per-clip identity colour that sways horizontally, with a darker "mouth"
// whose depth follows the audio energy envelope:
//
//   pixel(x, y, t) = c * (G_head(x, y; cx_t) - depth * e_t * G_mouth(x, y; cx_t))
//
// The audio is a sum of per-clip voice harmonics whose power is e_t, so the
// feature energy of frame t is e_t * sum_b a_b^2.

namespace rest {

struct MotionParams {
  double sway_amplitude = 5.0;
  double period_min = 16.0, period_max = 32.0;  // in pixel frames
  double head_sigma = 5.0;
  double mouth_sigma = 2.5;
  double mouth_offset = 4.0;  // rows below the head centre
  double mouth_depth = 0.8;
  int voices = 2;             // harmonics per clip
};

struct CorpusConfig {
  std::uint64_t seed = 1;
  int n_train = 128;
  int n_heldout = 8;
  VideoShape video{};          // F is the per-clip frame count
  std::int64_t samples_per_frame = 32;
  std::int64_t bands = 8;
  double identity_margin = 0.15;
  MotionParams motion{};
};

struct ClipTruth {
  std::string id;
  std::uint64_t seed = 0;
  std::vector<float> identity;   // unit colour code, Dv entries
  std::vector<double> envelope;  // e_t per pixel frame, in [0, 1]
  std::vector<double> aperture;  // mouth_depth * e_t
  std::vector<int> voice_bins;
  std::vector<double> voice_amplitudes;
  double period = 0.0, phase = 0.0;
};

struct Clip {
  ClipTruth truth;
  Tensor video;      // [F, H, W, Dv]
  Tensor reference;  // [1, H, W, Dv]: centred head, closed mouth
  Tensor waveform;   // [F * samples_per_frame]
  Tensor features;   // [F, bands]
};

struct Corpus {
  CorpusConfig config;
  std::vector<Clip> train;
  std::vector<Clip> heldout;
};

/// Renders one frame [H, W, Dv] at horizontal centre cx with mouth opening e.
Tensor render_frame(const CorpusConfig& cfg, const std::vector<float>& identity, double cx, double e);

/// Draws an identity colour at least `margin` away from every entry of `taken`.
std::vector<float> sample_identity(CounterRng& rng, std::int64_t channels, double margin,
                                   const std::vector<std::vector<float>>& taken);

/// One clip of `frames` pixel frames, fully determined by (cfg, identity, seed).
Clip make_clip(const CorpusConfig& cfg, const std::vector<float>& identity, std::uint64_t seed, std::int64_t frames,
               std::string id);

Corpus make_synthetic_corpus(const CorpusConfig& cfg);

/// Directory layout: manifest.json plus <clip id>/{video,reference,waveform,features,envelope}.tnsr.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace rest
