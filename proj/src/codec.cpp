#include "rest/codec.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "rest/error.hpp"
#include "rest/ops.hpp"

namespace rest {

std::int64_t latent_frames(std::int64_t frames, std::int64_t temporal_ratio) {
  return 1 + (frames - 1) / temporal_ratio;
}

std::int64_t pixel_frames(std::int64_t latent, std::int64_t temporal_ratio) { return 1 + (latent - 1) * temporal_ratio; }

void VideoShape::validate() const {
  std::ostringstream err;
  if (H <= 0 || W <= 0 || F <= 0 || rH <= 0 || rW <= 0 || rF <= 0 || Dv <= 0 || dv <= 0)
    err << "all video dimensions and ratios must be positive; ";
  else {
    if (H % rH != 0) err << "H=" << H << " must be divisible by rH=" << rH << "; ";
    if (W % rW != 0) err << "W=" << W << " must be divisible by rW=" << rW << "; ";
    if ((F - 1) % rF != 0) err << "F-1=" << F - 1 << " must be divisible by rF=" << rF << "; ";
  }
  if (!err.str().empty()) throw ShapeError("invalid video shape: " + err.str());
}

VideoShape VideoShape::full_scale() { return VideoShape{512, 512, 121, 32, 32, 8, 3, 8}; }

void SpeechShape::validate() const {
  if (F <= 0 || rF <= 0 || samples_per_frame <= 0 || bands <= 0 || tokens <= 0 || latent_dim <= 0)
    throw ShapeError("invalid speech shape: all sizes must be positive");
  if ((F - 1) % rF != 0)
    throw AlignmentError("speech frames F-1=" + std::to_string(F - 1) + " must be divisible by rF=" + std::to_string(rF));
  if (2 * bands >= samples_per_frame)
    throw ShapeError("speech bands must stay below the Nyquist bin of the analysis window");
}

Tensor speech_features(std::span<const float> waveform, std::int64_t samples_per_frame, std::int64_t bands,
                       std::int64_t expected_frames) {
  const auto n = static_cast<std::int64_t>(waveform.size());
  if (samples_per_frame <= 0 || n % samples_per_frame != 0)
    throw AlignmentError("waveform of " + std::to_string(n) + " samples does not split into windows of " +
                         std::to_string(samples_per_frame));
  const std::int64_t frames = n / samples_per_frame;
  if (expected_frames > 0 && frames != expected_frames)
    throw AlignmentError("waveform covers " + std::to_string(frames) + " frames, video has " +
                         std::to_string(expected_frames));
  std::vector<float> out(static_cast<std::size_t>(frames * bands));
  const double norm = 2.0 / static_cast<double>(samples_per_frame);
  for (std::int64_t t = 0; t < frames; ++t) {
    const float* x = waveform.data() + t * samples_per_frame;
    for (std::int64_t b = 1; b <= bands; ++b) {
      double re = 0.0, im = 0.0;
      for (std::int64_t i = 0; i < samples_per_frame; ++i) {
        const double ang = 2.0 * std::numbers::pi * static_cast<double>(b * i) / static_cast<double>(samples_per_frame);
        re += x[i] * std::cos(ang);
        im -= x[i] * std::sin(ang);
      }
      const double power = norm * norm * (re * re + im * im);
      out[static_cast<std::size_t>(t * bands + b - 1)] = static_cast<float>(std::log1p(power));
    }
  }
  return Tensor({frames, bands}, std::move(out));
}

std::vector<double> feature_energy(const Tensor& features) {
  const std::int64_t frames = features.dim(0);
  const std::int64_t bands = features.dim(1);
  std::vector<double> e(static_cast<std::size_t>(frames), 0.0);
  for (std::int64_t t = 0; t < frames; ++t)
    for (std::int64_t b = 0; b < bands; ++b) e[static_cast<std::size_t>(t)] += std::expm1(static_cast<double>(features.at(t * bands + b)));
  return e;
}

// ---------------------------------------------------------------------------

LinearPatchCodec LinearPatchCodec::init(std::int64_t in_dim, std::int64_t out_dim, CounterRng& rng) {
  LinearPatchCodec c;
  c.enc_w = Tensor::randn({in_dim, out_dim}, rng, 1.0f / std::sqrt(static_cast<float>(in_dim)));
  c.enc_b = Tensor({out_dim});
  c.dec_w = Tensor::randn({out_dim, in_dim}, rng, 1.0f / std::sqrt(static_cast<float>(out_dim)));
  c.dec_b = Tensor({in_dim});
  for (Tensor* t : {&c.enc_w, &c.enc_b, &c.dec_w, &c.dec_b}) t->set_requires_grad(true);
  c.latent_mean = Tensor({out_dim});
  c.latent_inv_std = Tensor::full({out_dim}, 1.0f);
  return c;
}

Tensor LinearPatchCodec::encode(const Tensor& patches) const {
  return mul(sub(linear(patches, enc_w, enc_b), latent_mean), latent_inv_std);
}

Tensor LinearPatchCodec::decode(const Tensor& latents) const {
  Tensor std_dev({out_dim()});
  auto sv = std_dev.mutable_values();
  for (std::int64_t i = 0; i < out_dim(); ++i) sv[static_cast<std::size_t>(i)] = 1.0f / latent_inv_std.at(i);
  return linear(add(mul(latents, std_dev), latent_mean), dec_w, dec_b);
}

void LinearPatchCodec::export_to(ParamStore& out, const std::string& prefix) const {
  out[prefix + ".enc_w"] = enc_w;
  out[prefix + ".enc_b"] = enc_b;
  out[prefix + ".dec_w"] = dec_w;
  out[prefix + ".dec_b"] = dec_b;
  out[prefix + ".latent_mean"] = latent_mean;
  out[prefix + ".latent_inv_std"] = latent_inv_std;
}

LinearPatchCodec LinearPatchCodec::import_from(const ParamStore& in, const std::string& prefix) {
  auto get = [&](const std::string& name) {
    auto it = in.find(prefix + name);
    if (it == in.end()) throw IoError("codec checkpoint lacks " + prefix + name);
    return it->second.detach();
  };
  LinearPatchCodec c{get(".enc_w"), get(".enc_b"), get(".dec_w"), get(".dec_b"), get(".latent_mean"), get(".latent_inv_std")};
  for (Tensor* t : {&c.enc_w, &c.enc_b, &c.dec_w, &c.dec_b}) t->set_requires_grad(true);
  if (c.enc_b.numel() != c.out_dim() || c.dec_w.dim(0) != c.out_dim() || c.dec_w.dim(1) != c.in_dim())
    throw IoError("inconsistent codec tensor shapes under " + prefix);
  return c;
}

namespace {

// Top principal directions of the patches: the optimum of a linear
// autoencoder up to an invertible mixing, so Adam only has to polish.
void pca_init(LinearPatchCodec& codec, const Tensor& patches) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::int64_t n = patches.dim(0), in = patches.dim(1), out = codec.out_dim();
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> P(patches.values().data(), n, in);
  const Mat X = P.cast<double>();
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Mat centred = X.rowwise() - mean;
  const Mat cov = centred.transpose() * centred / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  std::vector<float> ew(static_cast<std::size_t>(in * out)), eb(static_cast<std::size_t>(out)),
      dw(static_cast<std::size_t>(out * in)), db(static_cast<std::size_t>(in));
  for (std::int64_t k = 0; k < out; ++k) {
    const std::int64_t col = in - 1 - k;  // eigenvalues ascend
    const bool have = col >= 0;
    double proj = 0.0;
    for (std::int64_t i = 0; i < in; ++i) {
      const double u = have ? eig.eigenvectors()(i, col) : 0.0;
      ew[static_cast<std::size_t>(i * out + k)] = static_cast<float>(u);
      dw[static_cast<std::size_t>(k * in + i)] = static_cast<float>(u);
      proj += mean(i) * u;
    }
    eb[static_cast<std::size_t>(k)] = static_cast<float>(-proj);
  }
  for (std::int64_t i = 0; i < in; ++i) db[static_cast<std::size_t>(i)] = static_cast<float>(mean(i));
  codec.enc_w = Tensor({in, out}, std::move(ew), true);
  codec.enc_b = Tensor({out}, std::move(eb), true);
  codec.dec_w = Tensor({out, in}, std::move(dw), true);
  codec.dec_b = Tensor({in}, std::move(db), true);
}

}  // namespace

std::vector<double> train_patch_codec(LinearPatchCodec& codec, const Tensor& patches, const CodecTrainOptions& opts) {
  codec.latent_mean = Tensor({codec.out_dim()});
  codec.latent_inv_std = Tensor::full({codec.out_dim()}, 1.0f);
  if (opts.pca_init) pca_init(codec, patches);
  std::vector<Tensor> params{codec.enc_w, codec.enc_b, codec.dec_w, codec.dec_b};
  AdamState state;
  std::vector<double> curve;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    for (Tensor& p : params) p.zero_grad();
    Tensor loss = mse(codec.decode(codec.encode(patches)), patches);
    check_finite(loss, "codec training loss");
    curve.push_back(loss.item());
    backward(loss);
    const double decay = 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / opts.epochs));
    adam_step(params, state, {.lr = static_cast<float>(opts.lr * decay)});
  }

  NoGradGuard ng;
  Tensor z = linear(patches, codec.enc_w, codec.enc_b);
  const std::int64_t n = z.dim(0), d = z.dim(1);
  std::vector<float> mu(static_cast<std::size_t>(d)), inv(static_cast<std::size_t>(d));
  for (std::int64_t c = 0; c < d; ++c) {
    double s = 0.0, s2 = 0.0;
    for (std::int64_t r = 0; r < n; ++r) s += z.at(r * d + c);
    const double m = s / static_cast<double>(n);
    for (std::int64_t r = 0; r < n; ++r) s2 += (z.at(r * d + c) - m) * (z.at(r * d + c) - m);
    const double sd = std::sqrt(s2 / static_cast<double>(n));
    mu[static_cast<std::size_t>(c)] = static_cast<float>(m);
    inv[static_cast<std::size_t>(c)] = static_cast<float>(1.0 / std::max(sd, 1e-6));
  }
  codec.latent_mean = Tensor({d}, std::move(mu));
  codec.latent_inv_std = Tensor({d}, std::move(inv));
  return curve;
}

// ---------------------------------------------------------------------------

namespace {

// Slot -> pixel-row map: slots enumerate first-frame patches, then the
// remaining patches; within a patch, (frame, y, x) in row-major order.
std::vector<std::int64_t> patch_order(const VideoShape& s) {
  std::vector<std::int64_t> order;
  order.reserve(static_cast<std::size_t>(s.F * s.H * s.W));
  auto row = [&](std::int64_t t, std::int64_t y, std::int64_t x) { return (t * s.H + y) * s.W + x; };
  for (std::int64_t py = 0; py < s.h(); ++py)
    for (std::int64_t px = 0; px < s.w(); ++px)
      for (std::int64_t yi = 0; yi < s.rH; ++yi)
        for (std::int64_t xi = 0; xi < s.rW; ++xi) order.push_back(row(0, py * s.rH + yi, px * s.rW + xi));
  for (std::int64_t g = 1; g < s.f(); ++g)
    for (std::int64_t py = 0; py < s.h(); ++py)
      for (std::int64_t px = 0; px < s.w(); ++px)
        for (std::int64_t ti = 0; ti < s.rF; ++ti)
          for (std::int64_t yi = 0; yi < s.rH; ++yi)
            for (std::int64_t xi = 0; xi < s.rW; ++xi)
              order.push_back(row(1 + (g - 1) * s.rF + ti, py * s.rH + yi, px * s.rW + xi));
  return order;
}

std::vector<std::int64_t> inverse(const std::vector<std::int64_t>& perm) {
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
  return inv;
}

}  // namespace

VideoCodec::VideoCodec(std::int64_t rH, std::int64_t rW, std::int64_t rF, std::int64_t Dv, std::int64_t dv, CounterRng& rng)
    : rH_(rH), rW_(rW), rF_(rF), Dv_(Dv) {
  first_ = LinearPatchCodec::init(rH * rW * Dv, dv, rng);
  rest_ = LinearPatchCodec::init(rF * rH * rW * Dv, dv, rng);
}

VideoShape VideoCodec::shape_for(const Dims& d) const {
  if (d.size() != 4) throw ShapeError("video must be [F,H,W,Dv], got " + to_string(d));
  if (d[3] != Dv_) throw ShapeError("video has " + std::to_string(d[3]) + " channels, codec expects " + std::to_string(Dv_));
  VideoShape s{d[1], d[2], d[0], rH_, rW_, rF_, Dv_, latent_channels()};
  s.validate();
  return s;
}

std::pair<Tensor, Tensor> VideoCodec::patchify(const Tensor& video) const {
  const VideoShape s = shape_for(video.dims());
  const auto order = patch_order(s);
  Tensor gathered = gather_rows(reshape(video, {s.F * s.H * s.W, s.Dv}), order);
  const std::int64_t first_rows = s.h() * s.w() * s.rH * s.rW;
  Tensor first = reshape(slice(gathered, 0, 0, first_rows), {s.h() * s.w(), s.rH * s.rW * s.Dv});
  const std::int64_t rest_patches = (s.f() - 1) * s.h() * s.w();
  Tensor rest = reshape(slice(gathered, 0, first_rows, gathered.dim(0)), {rest_patches, s.rF * s.rH * s.rW * s.Dv});
  return {first, rest};
}

Tensor VideoCodec::encode(const Tensor& video) const {
  const VideoShape s = shape_for(video.dims());
  auto [first, rest] = patchify(video);
  Tensor z = first_.encode(first);
  if (s.f() > 1) z = concat({z, rest_.encode(rest)}, 0);
  return reshape(z, s.latent_dims());
}

Tensor VideoCodec::decode(const Tensor& latents, std::int64_t H, std::int64_t W) const {
  const Dims& d = latents.dims();
  if (d.size() != 4 || d[3] != latent_channels())
    throw ShapeError("latents must be [f,h,w," + std::to_string(latent_channels()) + "], got " + to_string(d));
  if (d[1] * rH_ != H || d[2] * rW_ != W)
    throw ShapeError("latent grid " + to_string(d) + " does not decode to " + std::to_string(H) + "x" + std::to_string(W));
  const VideoShape s{H, W, pixel_frames(d[0], rF_), rH_, rW_, rF_, Dv_, latent_channels()};
  const std::int64_t hw = s.h() * s.w();
  Tensor rows = reshape(latents, {d[0] * hw, d[3]});
  Tensor pixels = reshape(first_.decode(slice(rows, 0, 0, hw)), {hw * s.rH * s.rW, s.Dv});
  if (d[0] > 1) {
    Tensor rest = rest_.decode(slice(rows, 0, hw, rows.dim(0)));
    pixels = concat({pixels, reshape(rest, {rest.numel() / s.Dv, s.Dv})}, 0);
  }
  const auto inv = inverse(patch_order(s));
  return reshape(gather_rows(pixels, inv), s.video_dims());
}

std::vector<double> VideoCodec::fit(const std::vector<Tensor>& videos, const CodecTrainOptions& opts) {
  std::vector<Tensor> firsts, rests;
  {
    NoGradGuard ng;
    for (const Tensor& v : videos) {
      auto [f, r] = patchify(v);
      firsts.push_back(f);
      if (r.dim(0) > 0) rests.push_back(r);
    }
  }
  if (firsts.empty()) throw UsageError("video codec fit: no training clips");
  auto curve = train_patch_codec(first_, concat(firsts, 0), opts);
  if (!rests.empty()) {
    auto rest_curve = train_patch_codec(rest_, concat(rests, 0), opts);
    for (std::size_t i = 0; i < curve.size(); ++i) curve[i] = 0.5 * (curve[i] + rest_curve[i]);
  }
  return curve;
}

ParamStore VideoCodec::export_params() const {
  ParamStore out;
  first_.export_to(out, "video.first");
  rest_.export_to(out, "video.rest");
  out["video.geometry"] = Tensor({4}, {static_cast<float>(rH_), static_cast<float>(rW_), static_cast<float>(rF_), static_cast<float>(Dv_)});
  return out;
}

VideoCodec VideoCodec::import_params(const ParamStore& params) {
  auto it = params.find("video.geometry");
  if (it == params.end() || it->second.numel() != 4) throw IoError("checkpoint lacks video.geometry");
  VideoCodec c;
  const Tensor& g = it->second;
  c.rH_ = static_cast<std::int64_t>(g.at(0));
  c.rW_ = static_cast<std::int64_t>(g.at(1));
  c.rF_ = static_cast<std::int64_t>(g.at(2));
  c.Dv_ = static_cast<std::int64_t>(g.at(3));
  c.first_ = LinearPatchCodec::import_from(params, "video.first");
  c.rest_ = LinearPatchCodec::import_from(params, "video.rest");
  if (c.first_.in_dim() != c.rH_ * c.rW_ * c.Dv_ || c.rest_.in_dim() != c.rF_ * c.rH_ * c.rW_ * c.Dv_)
    throw IoError("video codec weights disagree with stored geometry");
  return c;
}

// ---------------------------------------------------------------------------

SpeechCodec::SpeechCodec(std::int64_t rF, std::int64_t bands, std::int64_t tokens, std::int64_t latent_dim, CounterRng& rng)
    : rF_(rF), bands_(bands), tokens_(tokens), latent_dim_(latent_dim) {
  first_ = LinearPatchCodec::init(bands, tokens * latent_dim, rng);
  rest_ = LinearPatchCodec::init(rF * bands, tokens * latent_dim, rng);
}

std::pair<Tensor, Tensor> SpeechCodec::windows(const Tensor& features) const {
  if (features.rank() != 2 || features.dim(1) != bands_)
    throw ShapeError("speech features must be [F," + std::to_string(bands_) + "], got " + to_string(features.dims()));
  const std::int64_t F = features.dim(0);
  if (F < 1 || (F - 1) % rF_ != 0)
    throw AlignmentError("speech feature count F=" + std::to_string(F) + " is not 1 + k*" + std::to_string(rF_) +
                         "; it cannot align with the video latent frames");
  Tensor first = slice(features, 0, 0, 1);
  Tensor rest = reshape(slice(features, 0, 1, F), {(F - 1) / rF_, rF_ * bands_});
  return {first, rest};
}

Tensor SpeechCodec::encode(const Tensor& features) const {
  auto [first, rest] = windows(features);
  Tensor e = first_.encode(first);
  if (rest.dim(0) > 0) e = concat({e, rest_.encode(rest)}, 0);
  return reshape(e, {e.dim(0), tokens_, latent_dim_});
}

Tensor SpeechCodec::decode(const Tensor& latents) const {
  if (latents.rank() != 3 || latents.dim(1) != tokens_ || latents.dim(2) != latent_dim_)
    throw ShapeError("speech latents must be [f," + std::to_string(tokens_) + "," + std::to_string(latent_dim_) +
                     "], got " + to_string(latents.dims()));
  const std::int64_t f = latents.dim(0);
  Tensor rows = reshape(latents, {f, tokens_ * latent_dim_});
  Tensor s = first_.decode(slice(rows, 0, 0, 1));
  if (f > 1) s = concat({s, reshape(rest_.decode(slice(rows, 0, 1, f)), {(f - 1) * rF_, bands_})}, 0);
  return s;
}

std::vector<double> SpeechCodec::fit(const std::vector<Tensor>& features, const CodecTrainOptions& opts) {
  std::vector<Tensor> firsts, rests;
  {
    NoGradGuard ng;
    for (const Tensor& s : features) {
      auto [f, r] = windows(s);
      firsts.push_back(f);
      if (r.dim(0) > 0) rests.push_back(r);
    }
  }
  if (firsts.empty()) throw UsageError("speech codec fit: no training clips");
  auto curve = train_patch_codec(first_, concat(firsts, 0), opts);
  if (!rests.empty()) {
    auto rest_curve = train_patch_codec(rest_, concat(rests, 0), opts);
    for (std::size_t i = 0; i < curve.size(); ++i) curve[i] = 0.5 * (curve[i] + rest_curve[i]);
  }
  return curve;
}

ParamStore SpeechCodec::export_params() const {
  ParamStore out;
  first_.export_to(out, "speech.first");
  rest_.export_to(out, "speech.rest");
  out["speech.geometry"] = Tensor({4}, {static_cast<float>(rF_), static_cast<float>(bands_), static_cast<float>(tokens_),
                                        static_cast<float>(latent_dim_)});
  return out;
}

SpeechCodec SpeechCodec::import_params(const ParamStore& params) {
  auto it = params.find("speech.geometry");
  if (it == params.end() || it->second.numel() != 4) throw IoError("checkpoint lacks speech.geometry");
  SpeechCodec c;
  const Tensor& g = it->second;
  c.rF_ = static_cast<std::int64_t>(g.at(0));
  c.bands_ = static_cast<std::int64_t>(g.at(1));
  c.tokens_ = static_cast<std::int64_t>(g.at(2));
  c.latent_dim_ = static_cast<std::int64_t>(g.at(3));
  c.first_ = LinearPatchCodec::import_from(params, "speech.first");
  c.rest_ = LinearPatchCodec::import_from(params, "speech.rest");
  if (c.first_.in_dim() != c.bands_ || c.rest_.in_dim() != c.rF_ * c.bands_ ||
      c.first_.out_dim() != c.tokens_ * c.latent_dim_)
    throw IoError("speech codec weights disagree with stored geometry");
  return c;
}

}  // namespace rest
