#include "rest/dit.hpp"

#include <cmath>
#include <string>

#include "rest/error.hpp"
#include "rest/flow.hpp"
#include "rest/ops.hpp"
#include "rest/tensor_io.hpp"

namespace rest {

void ModelConfig::validate() const {
  if (blocks < 1 || d_model < 1 || heads < 1 || h < 1 || w < 1 || latent_dim < 1 || t_dim < 2 || mlp_ratio < 1 ||
      audio_tokens < 1 || audio_dim < 1)
    throw ShapeError("model config: all sizes must be positive");
  if (d_model % heads != 0)
    throw ShapeError("model dim " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) + " heads");
  if (t_dim % 2 != 0) throw ShapeError("timestep embedding dim must be even");
  if (chunk_len < 2) throw LayoutError("chunk length must be at least 2");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.blocks = 28;
  c.h = c.w = 16;
  return c;
}

std::int64_t teacher_frame_position(std::int64_t g, std::int64_t chunk_len) {
  return g == 0 ? 0 : ((g - 1) % (chunk_len - 1)) + 1;
}

namespace {

std::string bname(std::int64_t j, const char* leaf) { return "blk" + std::to_string(j) + "." + leaf; }

const Tensor& get(const ParamStore& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw UsageError("missing parameter " + name);
  return it->second;
}

// Columns [part*d, (part+1)*d) of the per-token modulation rows.
Tensor modulated_ln(const Tensor& x, const Tensor& mod, int pair, std::int64_t d) {
  const Tensor shift = slice(mod, 1, (2 * pair) * d, (2 * pair + 1) * d);
  const Tensor scl = slice(mod, 1, (2 * pair + 1) * d, (2 * pair + 2) * d);
  return add(mul(layer_norm(x), add_scalar(scl, 1.0f)), shift);
}

Tensor param(Dims dims, CounterRng& rng, float stddev) {
  Tensor t = Tensor::randn(std::move(dims), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor zero_param(Dims dims) { return Tensor(std::move(dims), true); }

}  // namespace

ParamStore init_dit(const ModelConfig& c, CounterRng& rng, InitMode mode) {
  c.validate();
  const bool rnd = mode == InitMode::random;
  const std::int64_t d = c.d_model, m = c.mlp_ratio * d;
  const float sd = 1.0f / std::sqrt(static_cast<float>(d));
  // Tensors that start at zero in standard mode get this scale in random mode.
  auto maybe_zero = [&](Dims dims, float stddev) { return rnd ? param(std::move(dims), rng, stddev) : zero_param(std::move(dims)); };

  ParamStore p;
  p["in.w"] = param({c.latent_dim, d}, rng, 1.0f / std::sqrt(static_cast<float>(c.latent_dim)));
  p["in.b"] = maybe_zero({d}, 0.1f);
  p["pos.spatial"] = param({c.tokens_per_frame(), d}, rng, 0.1f);
  p["pos.frame"] = param({c.chunk_len, d}, rng, 0.1f);
  p["pos.ref"] = param({1, d}, rng, 0.1f);
  p["t.w1"] = param({c.t_dim, d}, rng, 1.0f / std::sqrt(static_cast<float>(c.t_dim)));
  p["t.b1"] = maybe_zero({d}, 0.1f);
  p["t.w2"] = param({d, d}, rng, sd);
  p["t.b2"] = maybe_zero({d}, 0.1f);
  for (std::int64_t j = 0; j < c.blocks; ++j) {
    p[bname(j, "mod.w")] = maybe_zero({d, 6 * d}, 0.5f * sd);
    p[bname(j, "mod.b")] = maybe_zero({6 * d}, 0.1f);
    p[bname(j, "attn.wq")] = param({d, d}, rng, sd);
    p[bname(j, "attn.wk")] = param({d, d}, rng, sd);
    p[bname(j, "attn.wv")] = param({d, d}, rng, sd);
    p[bname(j, "attn.wo")] = param({d, d}, rng, sd);
    p[bname(j, "attn.bo")] = maybe_zero({d}, 0.1f);
    p[bname(j, "xattn.wq")] = param({d, d}, rng, sd);
    p[bname(j, "xattn.wk")] = param({c.audio_dim, d}, rng, 1.0f / std::sqrt(static_cast<float>(c.audio_dim)));
    p[bname(j, "xattn.wv")] = param({c.audio_dim, d}, rng, 1.0f / std::sqrt(static_cast<float>(c.audio_dim)));
    p[bname(j, "xattn.wo")] = maybe_zero({d, d}, sd);
    p[bname(j, "mlp.w1")] = param({d, m}, rng, sd);
    p[bname(j, "mlp.b1")] = maybe_zero({m}, 0.1f);
    p[bname(j, "mlp.w2")] = param({m, d}, rng, 1.0f / std::sqrt(static_cast<float>(m)));
    p[bname(j, "mlp.b2")] = maybe_zero({d}, 0.1f);
  }
  p["out.mod.w"] = maybe_zero({d, 2 * d}, 0.5f * sd);
  p["out.mod.b"] = maybe_zero({2 * d}, 0.1f);
  p["out.w"] = maybe_zero({d, c.latent_dim}, sd);
  p["out.b"] = maybe_zero({c.latent_dim}, 0.1f);
  return p;
}

BlockParams block_params(const ParamStore& p, std::int64_t j) {
  return BlockParams{get(p, bname(j, "mod.w")),    get(p, bname(j, "mod.b")),    get(p, bname(j, "attn.wq")),
                     get(p, bname(j, "attn.wk")),  get(p, bname(j, "attn.wv")),  get(p, bname(j, "attn.wo")),
                     get(p, bname(j, "attn.bo")),  get(p, bname(j, "xattn.wq")), get(p, bname(j, "xattn.wk")),
                     get(p, bname(j, "xattn.wv")), get(p, bname(j, "xattn.wo")), get(p, bname(j, "mlp.w1")),
                     get(p, bname(j, "mlp.b1")),   get(p, bname(j, "mlp.w2")),   get(p, bname(j, "mlp.b2"))};
}

QKV qkv(const Tensor& normed, const BlockParams& b) {
  if (normed.rank() != 2 || normed.dim(1) != b.wq.dim(0))
    throw ShapeError("qkv: hidden states " + to_string(normed.dims()) + " vs projection " + to_string(b.wq.dims()));
  return QKV{linear(normed, b.wq), linear(normed, b.wk), linear(normed, b.wv)};
}

Tensor audio_cross_attention(const Tensor& normed, const Tensor& audio, const BlockParams& b, std::int64_t heads) {
  if (normed.rank() != 3 || audio.rank() != 3 || normed.dim(0) != audio.dim(0))
    throw AlignmentError("cross-attention: hidden " + to_string(normed.dims()) + " and audio " + to_string(audio.dims()) +
                         " must share the frame axis");
  const Tensor q = linear(normed, b.xq);
  const Tensor k = linear(audio, b.xk);
  const Tensor v = linear(audio, b.xv);
  return linear(attention(q, k, v, static_cast<int>(heads)), b.xo);
}

// ---------------------------------------------------------------------------

IDContextCache::IDContextCache(const ModelConfig& cfg, int steps)
    : blocks_(cfg.blocks), steps_(steps), slots_(static_cast<std::size_t>(cfg.blocks * steps)) {
  if (steps < 1) throw CacheError("cache needs at least one step slot");
}

IDContextCache::Slot& IDContextCache::slot(std::int64_t block, int step) {
  if (block < 0 || block >= blocks_ || step < 0 || step >= steps_)
    throw CacheError("cache slot (" + std::to_string(block) + ", " + std::to_string(step) + ") out of range");
  return slots_[static_cast<std::size_t>(block * steps_ + step)];
}

const IDContextCache::Slot& IDContextCache::slot(std::int64_t block, int step) const {
  return const_cast<IDContextCache*>(this)->slot(block, step);
}

void IDContextCache::advance() {
  if (chunk_ == 0)
    for (const auto& s : slots_)
      if (!s.sink_k.defined()) throw CacheError("first chunk finished without filling every sink slot");
  ++chunk_;
}

void IDContextCache::reset() {
  for (auto& s : slots_) s = Slot{};
  chunk_ = 0;
}

std::size_t IDContextCache::bytes() const {
  std::size_t n = 0;
  for (const auto& s : slots_)
    for (const Tensor* t : {&s.sink_k, &s.sink_v, &s.ctx_k, &s.ctx_v})
      if (t->defined()) n += static_cast<std::size_t>(t->numel()) * sizeof(float);
  return n;
}

std::uint64_t IDContextCache::sink_hash() const {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (const auto& s : slots_)
    for (const Tensor* t : {&s.sink_k, &s.sink_v}) h = mix64(h ^ (t->defined() ? content_hash(*t) : 0));
  return h;
}

void IDContextCache::detach() {
  for (auto& s : slots_)
    for (Tensor* t : {&s.sink_k, &s.sink_v, &s.ctx_k, &s.ctx_v})
      if (t->defined()) *t = t->detach();
}

// ---------------------------------------------------------------------------

Tensor dit_forward(const ParamStore& p, const ModelConfig& c, const DitCall& call) {
  const bool student = call.mode == DitMode::student;
  if (student && call.cache == nullptr) throw UsageError("student mode needs an ID-context cache");
  if (!student && call.cache != nullptr) throw UsageError("teacher mode attends over the full sequence; no cache");
  if (student && (call.cache->blocks() != c.blocks || call.step < 0 || call.step >= call.cache->steps()))
    throw UsageError("cache does not match the model or step " + std::to_string(call.step));

  const std::int64_t S = c.tokens_per_frame(), d = c.d_model;
  const Dims frame_dims{c.h, c.w, c.latent_dim};
  const Tensor& frames = call.frames;
  if (frames.rank() != 4 || Dims(frames.dims().begin() + 1, frames.dims().end()) != frame_dims)
    throw ShapeError("frames must be [n," + std::to_string(c.h) + "," + std::to_string(c.w) + "," +
                     std::to_string(c.latent_dim) + "], got " + to_string(frames.dims()));
  const std::int64_t n = frames.dim(0);
  if (call.audio.dims() != Dims{n, c.audio_tokens, c.audio_dim})
    throw AlignmentError("audio " + to_string(call.audio.dims()) + " does not align with " + std::to_string(n) + " frames");
  if (static_cast<std::int64_t>(call.t.size()) != n)
    throw ShapeError(std::to_string(call.t.size()) + " timesteps for " + std::to_string(n) + " frames");
  if (student && n > c.chunk_len)
    throw LayoutError("student chunk of " + std::to_string(n) + " frames exceeds chunk length " + std::to_string(c.chunk_len));
  if (!student && n > 1 + 1024 * (c.chunk_len - 1)) throw LayoutError("sequence too long");

  const std::int64_t chunk = student ? call.cache->chunk_index() : -1;
  const bool has_ref = !student || chunk == 0;
  if (has_ref && call.z_ref.dims() != Dims{1, c.h, c.w, c.latent_dim})
    throw ShapeError("reference latent must be [1," + std::to_string(c.h) + "," + std::to_string(c.w) + "," +
                     std::to_string(c.latent_dim) + "], got " + to_string(call.z_ref.dims()));
  const std::int64_t groups = n + (has_ref ? 1 : 0);
  const std::int64_t N = groups * S;

  // Token bookkeeping: group of each token and its positional rows.
  std::vector<std::int64_t> group_of(static_cast<std::size_t>(N)), frame_pos(static_cast<std::size_t>(N)),
      spatial(static_cast<std::size_t>(N));
  for (std::int64_t g = 0; g < groups; ++g) {
    const bool is_ref = has_ref && g == 0;
    const std::int64_t fi = g - (has_ref ? 1 : 0);
    const std::int64_t pos = is_ref ? c.chunk_len : (student ? fi : teacher_frame_position(fi, c.chunk_len));
    for (std::int64_t s = 0; s < S; ++s) {
      const auto r = static_cast<std::size_t>(g * S + s);
      group_of[r] = g;
      frame_pos[r] = pos;
      spatial[r] = s;
    }
  }
  std::vector<float> tg;
  if (has_ref) tg.push_back(0.0f);
  tg.insert(tg.end(), call.t.begin(), call.t.end());

  Tensor latents = has_ref ? concat({call.z_ref, frames}, 0) : frames;
  Tensor audio = has_ref ? concat({Tensor({1, c.audio_tokens, c.audio_dim}), call.audio}, 0) : call.audio;

  const Tensor pos_table = concat({get(p, "pos.frame"), get(p, "pos.ref")}, 0);
  Tensor x = linear(reshape(latents, {N, c.latent_dim}), get(p, "in.w"), get(p, "in.b"));
  x = add(add(x, gather_rows(pos_table, frame_pos)), gather_rows(get(p, "pos.spatial"), spatial));

  const Tensor temb = timestep_embedding(tg, c.t_dim);
  const Tensor cond = silu(linear(silu(linear(temb, get(p, "t.w1"), get(p, "t.b1"))), get(p, "t.w2"), get(p, "t.b2")));

  for (std::int64_t j = 0; j < c.blocks; ++j) {
    const BlockParams b = block_params(p, j);
    const Tensor mod = gather_rows(linear(cond, b.mod_w, b.mod_b), group_of);

    const Tensor y = modulated_ln(x, mod, 0, d);
    const QKV cur = qkv(y, b);
    Tensor keys = cur.k, values = cur.v;
    bool used_sink = false, used_ctx = false;
    if (student) {
      IDContextCache::Slot& slot = call.cache->slot(j, call.step);
      if (chunk == 0) {
        if (slot.sink_k.defined()) throw CacheError("ID sink written twice; reset the cache between streams");
        slot.sink_k = slice(cur.k, 0, 0, S);
        slot.sink_v = slice(cur.v, 0, 0, S);
        slot.ctx_k = slice(cur.k, 0, S, N);
        slot.ctx_v = slice(cur.v, 0, S, N);
      } else {
        if (!slot.sink_k.defined() || !slot.ctx_k.defined())
          throw CacheError("cache slot (" + std::to_string(j) + ", " + std::to_string(call.step) + ") empty after chunk 0");
        if (slot.ctx_k.dim(0) != N)
          throw CacheError("context holds " + std::to_string(slot.ctx_k.dim(0)) + " tokens, current chunk has " +
                           std::to_string(N) + "; chunk layout changed mid-stream");
        std::vector<Tensor> kp, vp;
        if (!c.no_id_sink) {
          kp.push_back(slot.sink_k);
          vp.push_back(slot.sink_v);
          used_sink = true;
        }
        if (!c.no_context_cache) {
          kp.push_back(slot.ctx_k);
          vp.push_back(slot.ctx_v);
          used_ctx = true;
        }
        kp.push_back(cur.k);
        vp.push_back(cur.v);
        keys = concat(kp, 0);
        values = concat(vp, 0);
        slot.ctx_k = cur.k;
        slot.ctx_v = cur.v;
      }
    }
    const Tensor before = x;
    x = add(x, linear(attention(cur.q, keys, values, static_cast<int>(c.heads)), b.wo, b.bo));
    if (call.trace)
      call.trace->records.push_back(AttentionRecord{chunk, call.step, j, has_ref, used_sink, used_ctx, y, before, x});

    const Tensor y2 = reshape(modulated_ln(x, mod, 1, d), {groups, S, d});
    x = add(x, reshape(audio_cross_attention(y2, audio, b, c.heads), {N, d}));

    const Tensor y3 = modulated_ln(x, mod, 2, d);
    x = add(x, linear(gelu(linear(y3, b.mlp_w1, b.mlp_b1)), b.mlp_w2, b.mlp_b2));
  }

  const Tensor out_mod = gather_rows(linear(cond, get(p, "out.mod.w"), get(p, "out.mod.b")), group_of);
  Tensor v = linear(modulated_ln(x, out_mod, 0, d), get(p, "out.w"), get(p, "out.b"));
  if (has_ref) v = slice(v, 0, S, N);
  return reshape(v, {n, c.h, c.w, c.latent_dim});
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t forward_flops(const ModelConfig& c, std::int64_t groups, std::int64_t keys_tokens) {
  const auto S = static_cast<std::uint64_t>(c.tokens_per_frame());
  const auto d = static_cast<std::uint64_t>(c.d_model);
  const auto G = static_cast<std::uint64_t>(groups);
  const std::uint64_t N = G * S;
  const auto K = static_cast<std::uint64_t>(keys_tokens);
  const auto dv = static_cast<std::uint64_t>(c.latent_dim);
  const auto td = static_cast<std::uint64_t>(c.t_dim);
  const auto m = static_cast<std::uint64_t>(c.mlp_ratio) * d;
  const auto A = static_cast<std::uint64_t>(c.audio_tokens);
  const auto da = static_cast<std::uint64_t>(c.audio_dim);
  std::uint64_t f = 2 * N * dv * d;           // input projection
  f += 2 * G * td * d + 2 * G * d * d;        // timestep MLP
  std::uint64_t blk = 2 * G * d * 6 * d;      // modulation
  blk += 3 * 2 * N * d * d;                   // q, k, v
  blk += 4 * N * K * d;                       // self-attention
  blk += 2 * N * d * d;                       // output projection
  blk += 2 * N * d * d + 2 * 2 * G * A * da * d;  // cross q, k, v
  blk += 4 * G * S * A * d;                   // cross-attention
  blk += 2 * N * d * d;                       // cross output
  blk += 2 * N * d * m + 2 * N * m * d;       // MLP
  f += static_cast<std::uint64_t>(c.blocks) * blk;
  f += 2 * G * d * 2 * d + 2 * N * d * dv;    // output modulation and projection
  return f;
}

}  // namespace

std::uint64_t student_chunk_flops(const ModelConfig& c, std::int64_t chunk_index) {
  const std::int64_t S = c.tokens_per_frame(), f = c.chunk_len;
  if (chunk_index == 0) return forward_flops(c, f + 1, (f + 1) * S);
  const std::int64_t keys = (c.no_id_sink ? 0 : S) + (c.no_context_cache ? 0 : f * S) + f * S;
  return forward_flops(c, f, keys);
}

std::uint64_t teacher_flops(const ModelConfig& c, std::int64_t frames) {
  return forward_flops(c, frames + 1, (frames + 1) * c.tokens_per_frame());
}

std::size_t cache_bytes_formula(const ModelConfig& c, int steps, std::int64_t chunks) {
  if (chunks <= 0) return 0;
  const auto per_slot = static_cast<std::size_t>(2 * (c.tokens_per_frame() + c.chunk_len * c.tokens_per_frame()) * c.d_model);
  return per_slot * static_cast<std::size_t>(c.blocks) * static_cast<std::size_t>(steps) * sizeof(float);
}

std::size_t full_history_cache_bytes(const ModelConfig& c, int steps, std::int64_t chunks) {
  if (chunks <= 0) return 0;
  const auto tokens = static_cast<std::size_t>(c.tokens_per_frame() + chunks * c.chunk_len * c.tokens_per_frame());
  return 2 * tokens * static_cast<std::size_t>(c.d_model * c.blocks) * static_cast<std::size_t>(steps) * sizeof(float);
}

// ---------------------------------------------------------------------------

namespace {

Tensor meta_tensor(const ModelConfig& c) {
  return Tensor({10}, {static_cast<float>(c.blocks), static_cast<float>(c.d_model), static_cast<float>(c.heads),
                       static_cast<float>(c.h), static_cast<float>(c.w), static_cast<float>(c.latent_dim),
                       static_cast<float>(c.chunk_len), static_cast<float>(c.t_dim), static_cast<float>(c.mlp_ratio),
                       static_cast<float>(c.audio_tokens * 1000 + c.audio_dim)});
}

}  // namespace

void save_dit(const std::filesystem::path& path, const ParamStore& p, const ModelConfig& cfg) {
  NamedTensors out(p.begin(), p.end());
  out["meta.arch"] = meta_tensor(cfg);
  save_checkpoint(path, out);
}

ParamStore load_dit(const std::filesystem::path& path, const ModelConfig& cfg) {
  NamedTensors in = load_checkpoint(path);
  auto it = in.find("meta.arch");
  if (it == in.end()) throw IoError(path.string() + " is not a model checkpoint (no meta.arch)");
  if (content_hash(it->second) != content_hash(meta_tensor(cfg)))
    throw IoError(path.string() + " was trained with a different architecture");
  in.erase(it);
  ParamStore p;
  for (auto& [name, t] : in) {
    Tensor leaf = t.detach();
    leaf.set_requires_grad(true);
    p[name] = leaf;
  }
  // Every expected tensor must be present with the expected shape.
  CounterRng probe(0);
  const ParamStore ref = init_dit(cfg, probe);
  for (const auto& [name, t] : ref) {
    auto f = p.find(name);
    if (f == p.end()) throw IoError("checkpoint lacks " + name);
    if (f->second.dims() != t.dims())
      throw IoError(name + " is " + to_string(f->second.dims()) + ", expected " + to_string(t.dims()));
  }
  return p;
}

}  // namespace rest
