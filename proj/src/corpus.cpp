#include "rest/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "rest/error.hpp"
#include "rest/tensor_io.hpp"

namespace rest {

namespace {

using json = nlohmann::json;
constexpr int kManifestVersion = 1;

double gauss(double d2, double sigma) { return std::exp(-0.5 * d2 / (sigma * sigma)); }

// Head and mouth wrap around horizontally so the frame total does not depend
// on the sway position.
double periodic_gauss(double x, double cx, double width, double sigma) {
  double s = 0.0;
  for (int n = -2; n <= 2; ++n) {
    const double dx = x - cx + n * width;
    s += gauss(dx * dx, sigma);
  }
  return s;
}

std::vector<double> make_envelope(CounterRng& rng, std::int64_t frames) {
  std::vector<double> e(static_cast<std::size_t>(frames), 0.0);
  std::int64_t t = 1 + static_cast<std::int64_t>(rng.below(4));
  while (t < frames) {
    const auto len = 3 + static_cast<std::int64_t>(rng.below(6));
    const double amp = rng.uniform(0.5f, 1.0f);
    for (std::int64_t i = 0; i < len && t + i < frames; ++i) {
      const double s = std::sin(std::numbers::pi * (static_cast<double>(i) + 0.5) / static_cast<double>(len));
      e[static_cast<std::size_t>(t + i)] = static_cast<float>(amp * s * s);
    }
    t += len + static_cast<std::int64_t>(rng.below(5));
  }
  return e;
}

json shape_json(const CorpusConfig& c) {
  return json{{"H", c.video.H},   {"W", c.video.W},   {"F", c.video.F},   {"rH", c.video.rH},
              {"rW", c.video.rW}, {"rF", c.video.rF}, {"Dv", c.video.Dv}, {"dv", c.video.dv},
              {"samples_per_frame", c.samples_per_frame}, {"bands", c.bands}};
}

json clip_json(const Clip& clip, const std::string& split) {
  const ClipTruth& t = clip.truth;
  return json{{"id", t.id},
              {"split", split},
              {"seed", t.seed},
              {"frames", clip.video.dim(0)},
              {"identity", t.identity},
              {"voice_bins", t.voice_bins},
              {"voice_amplitudes", t.voice_amplitudes},
              {"period", t.period},
              {"phase", t.phase}};
}

}  // namespace

Tensor render_frame(const CorpusConfig& cfg, const std::vector<float>& identity, double cx, double e) {
  const auto& v = cfg.video;
  const auto& m = cfg.motion;
  if (static_cast<std::int64_t>(identity.size()) != v.Dv)
    throw ShapeError("identity has " + std::to_string(identity.size()) + " channels, video has " + std::to_string(v.Dv));
  std::vector<float> px(static_cast<std::size_t>(v.H * v.W * v.Dv));
  const double cy = 0.5 * static_cast<double>(v.H);
  for (std::int64_t y = 0; y < v.H; ++y) {
    const double dy = static_cast<double>(y) - cy;
    const double dm = dy - m.mouth_offset;
    for (std::int64_t x = 0; x < v.W; ++x) {
      const double xd = static_cast<double>(x);
      const double W = static_cast<double>(v.W);
      const double head = periodic_gauss(xd, cx, W, m.head_sigma) * gauss(dy * dy, m.head_sigma);
      const double mouth = periodic_gauss(xd, cx, W, m.mouth_sigma) * gauss(dm * dm, m.mouth_sigma);
      const double lum = head - m.mouth_depth * e * mouth;
      for (std::int64_t c = 0; c < v.Dv; ++c)
        px[static_cast<std::size_t>((y * v.W + x) * v.Dv + c)] = static_cast<float>(lum * identity[static_cast<std::size_t>(c)]);
    }
  }
  return Tensor({v.H, v.W, v.Dv}, std::move(px));
}

std::vector<float> sample_identity(CounterRng& rng, std::int64_t channels, double margin,
                                   const std::vector<std::vector<float>>& taken) {
  for (int attempt = 0; attempt < 100000; ++attempt) {
    std::vector<double> c(static_cast<std::size_t>(channels));
    double n2 = 0.0;
    for (auto& x : c) {
      x = rng.normal();
      n2 += x * x;
    }
    if (n2 < 1e-12) continue;
    std::vector<float> unit;
    for (double x : c) unit.push_back(static_cast<float>(x / std::sqrt(n2)));
    bool ok = true;
    for (const auto& other : taken) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < unit.size(); ++i) d2 += (unit[i] - other[i]) * (unit[i] - other[i]);
      if (std::sqrt(d2) < margin) {
        ok = false;
        break;
      }
    }
    if (ok) return unit;
  }
  throw DomainError("cannot place another identity code at margin " + std::to_string(margin));
}

Clip make_clip(const CorpusConfig& cfg, const std::vector<float>& identity, std::uint64_t seed, std::int64_t frames,
               std::string id) {
  const VideoShape vs = cfg.video.with_frames(frames);
  vs.validate();
  CounterRng rng(seed);
  const auto& m = cfg.motion;

  Clip clip;
  ClipTruth& t = clip.truth;
  t.id = std::move(id);
  t.seed = seed;
  t.identity = identity;
  t.period = rng.uniform(static_cast<float>(m.period_min), static_cast<float>(m.period_max));
  t.phase = rng.uniform(0.0f, static_cast<float>(2.0 * std::numbers::pi));
  CounterRng env_rng = rng.split(1);
  t.envelope = make_envelope(env_rng, frames);
  for (double e : t.envelope) t.aperture.push_back(m.mouth_depth * e);

  // Distinct voice bins, each a unit-ish harmonic with random phase.
  std::vector<int> bins;
  while (static_cast<int>(bins.size()) < std::min<int>(m.voices, static_cast<int>(cfg.bands))) {
    const int b = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.bands)));
    if (std::find(bins.begin(), bins.end(), b) == bins.end()) bins.push_back(b);
  }
  std::vector<double> phases;
  for (std::size_t i = 0; i < bins.size(); ++i) {
    t.voice_amplitudes.push_back(rng.uniform(0.6f, 1.0f));
    phases.push_back(rng.uniform(0.0f, static_cast<float>(2.0 * std::numbers::pi)));
  }
  t.voice_bins = bins;

  const std::int64_t N = cfg.samples_per_frame;
  std::vector<float> wave(static_cast<std::size_t>(frames * N), 0.0f);
  for (std::int64_t f = 0; f < frames; ++f) {
    const double g = std::sqrt(t.envelope[static_cast<std::size_t>(f)]);
    if (g == 0.0) continue;
    for (std::int64_t n = 0; n < N; ++n) {
      double s = 0.0;
      for (std::size_t i = 0; i < bins.size(); ++i)
        s += t.voice_amplitudes[i] *
             std::cos(2.0 * std::numbers::pi * bins[i] * static_cast<double>(n) / static_cast<double>(N) + phases[i]);
      wave[static_cast<std::size_t>(f * N + n)] = static_cast<float>(g * s);
    }
  }
  clip.waveform = Tensor({frames * N}, std::move(wave));
  clip.features = speech_features(clip.waveform.values(), N, cfg.bands, frames);

  const double mid = 0.5 * static_cast<double>(vs.W);
  std::vector<Tensor> rendered;
  for (std::int64_t f = 0; f < frames; ++f) {
    const double cx = mid + m.sway_amplitude * std::sin(2.0 * std::numbers::pi * f / t.period + t.phase);
    rendered.push_back(render_frame(cfg, identity, cx, t.envelope[static_cast<std::size_t>(f)]));
  }
  std::vector<float> vid;
  vid.reserve(static_cast<std::size_t>(frames * vs.H * vs.W * vs.Dv));
  for (const Tensor& r : rendered) vid.insert(vid.end(), r.values().begin(), r.values().end());
  clip.video = Tensor(vs.video_dims(), std::move(vid));
  Tensor ref = render_frame(cfg, identity, mid, 0.0);
  clip.reference = Tensor({1, vs.H, vs.W, vs.Dv}, std::vector<float>(ref.values().begin(), ref.values().end()));
  return clip;
}

Corpus make_synthetic_corpus(const CorpusConfig& cfg) {
  cfg.video.validate();
  Corpus corpus;
  corpus.config = cfg;
  CounterRng root(cfg.seed);
  CounterRng id_rng = root.split(0);
  std::vector<std::vector<float>> taken;
  const int total = cfg.n_train + cfg.n_heldout;
  for (int i = 0; i < total; ++i) {
    auto identity = sample_identity(id_rng, cfg.video.Dv, cfg.identity_margin, taken);
    taken.push_back(identity);
    const std::uint64_t seed = root.split(1000 + static_cast<std::uint64_t>(i)).next_u64();
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04d", i);
    Clip clip = make_clip(cfg, identity, seed, cfg.video.F, name);
    (i < cfg.n_train ? corpus.train : corpus.heldout).push_back(std::move(clip));
  }
  return corpus;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& c = corpus.config;
  json manifest{{"schema_version", kManifestVersion},
                {"seed", c.seed},
                {"identity_margin", c.identity_margin},
                {"shape", shape_json(c)},
                {"motion",
                 {{"sway_amplitude", c.motion.sway_amplitude},
                  {"period_min", c.motion.period_min},
                  {"period_max", c.motion.period_max},
                  {"head_sigma", c.motion.head_sigma},
                  {"mouth_sigma", c.motion.mouth_sigma},
                  {"mouth_offset", c.motion.mouth_offset},
                  {"mouth_depth", c.motion.mouth_depth},
                  {"voices", c.motion.voices}}},
                {"clips", json::array()}};
  auto dump = [&](const Clip& clip, const std::string& split) {
    const auto sub = dir / clip.truth.id;
    std::filesystem::create_directories(sub, ec);
    if (ec) throw IoError("cannot create " + sub.string());
    save_tensor(sub / "video.tnsr", clip.video);
    save_tensor(sub / "reference.tnsr", clip.reference);
    save_tensor(sub / "waveform.tnsr", clip.waveform);
    save_tensor(sub / "features.tnsr", clip.features);
    std::vector<float> env(clip.truth.envelope.begin(), clip.truth.envelope.end());
    const auto n = static_cast<std::int64_t>(env.size());
    save_tensor(sub / "envelope.tnsr", Tensor({n}, std::move(env)));
    manifest["clips"].push_back(clip_json(clip, split));
  };
  for (const auto& clip : corpus.train) dump(clip, "train");
  for (const auto& clip : corpus.heldout) dump(clip, "heldout");
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << '\n';
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  json m;
  try {
    is >> m;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
  try {
    if (m.at("schema_version").get<int>() != kManifestVersion)
      throw IoError("unsupported manifest schema_version " + m.at("schema_version").dump());
    Corpus corpus;
    auto& c = corpus.config;
    c.seed = m.at("seed").get<std::uint64_t>();
    c.identity_margin = m.at("identity_margin").get<double>();
    const auto& s = m.at("shape");
    c.video = VideoShape{s.at("H"), s.at("W"), s.at("F"), s.at("rH"), s.at("rW"), s.at("rF"), s.at("Dv"), s.at("dv")};
    c.samples_per_frame = s.at("samples_per_frame");
    c.bands = s.at("bands");
    const auto& mo = m.at("motion");
    c.motion = MotionParams{mo.at("sway_amplitude"), mo.at("period_min"),   mo.at("period_max"),  mo.at("head_sigma"),
                            mo.at("mouth_sigma"),    mo.at("mouth_offset"), mo.at("mouth_depth"), mo.at("voices")};
    for (const auto& cj : m.at("clips")) {
      Clip clip;
      ClipTruth& t = clip.truth;
      t.id = cj.at("id").get<std::string>();
      t.seed = cj.at("seed").get<std::uint64_t>();
      t.identity = cj.at("identity").get<std::vector<float>>();
      t.voice_bins = cj.at("voice_bins").get<std::vector<int>>();
      t.voice_amplitudes = cj.at("voice_amplitudes").get<std::vector<double>>();
      t.period = cj.at("period");
      t.phase = cj.at("phase");
      const auto sub = dir / t.id;
      clip.video = load_tensor(sub / "video.tnsr");
      clip.reference = load_tensor(sub / "reference.tnsr");
      clip.waveform = load_tensor(sub / "waveform.tnsr");
      clip.features = load_tensor(sub / "features.tnsr");
      const Tensor env = load_tensor(sub / "envelope.tnsr");
      for (float e : env.values()) {
        t.envelope.push_back(e);
        t.aperture.push_back(c.motion.mouth_depth * e);
      }
      const std::string split = cj.at("split");
      (split == "heldout" ? corpus.heldout : corpus.train).push_back(std::move(clip));
    }
    c.n_train = static_cast<int>(corpus.train.size());
    c.n_heldout = static_cast<int>(corpus.heldout.size());
    return corpus;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest: " + std::string(e.what()));
  }
}

}  // namespace rest
