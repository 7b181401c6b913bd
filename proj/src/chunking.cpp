#include "rest/chunking.hpp"

#include <cmath>
#include <string>

#include "rest/error.hpp"
#include "rest/ops.hpp"

namespace rest {

ChunkLayout ChunkLayout::make(std::int64_t f_total, std::int64_t chunk_len) {
  if (chunk_len < 2) throw LayoutError("chunk length must be at least 2, got " + std::to_string(chunk_len));
  if (f_total < chunk_len || (f_total - 1) % (chunk_len - 1) != 0) {
    const std::int64_t step = chunk_len - 1;
    const std::int64_t below = f_total <= chunk_len ? chunk_len : 1 + ((f_total - 1) / step) * step;
    const std::int64_t above = f_total <= chunk_len ? chunk_len : below + step;
    std::string msg = "frame count " + std::to_string(f_total) + " does not split into chunks of " +
                      std::to_string(chunk_len) + " (need 1 + k*" + std::to_string(step) + "); nearest valid: ";
    msg += below == above ? std::to_string(below) : std::to_string(below) + " or " + std::to_string(above);
    throw LayoutError(msg);
  }
  return ChunkLayout{f_total, chunk_len, (f_total - 1) / (chunk_len - 1)};
}

ChunkLayout ChunkLayout::with_chunks(std::int64_t k, std::int64_t chunk_len) {
  if (k < 1) throw LayoutError("need at least one chunk");
  return make(1 + k * (chunk_len - 1), chunk_len);
}

std::int64_t ChunkLayout::owner(std::int64_t g) const {
  if (g < 0 || g >= f_total) throw LayoutError("frame " + std::to_string(g) + " outside layout");
  return g == 0 ? 0 : (g - 1) / (chunk_len - 1);
}

std::vector<Tensor> segment(const Tensor& z, const ChunkLayout& layout) {
  if (z.rank() < 1 || z.dim(0) != layout.f_total)
    throw LayoutError("latents " + to_string(z.dims()) + " do not match a layout of " + std::to_string(layout.f_total) +
                      " frames");
  std::vector<Tensor> chunks;
  for (std::int64_t j = 0; j < layout.k; ++j) chunks.push_back(slice(z, 0, layout.begin(j), layout.end(j)));
  return chunks;
}

std::vector<Tensor> segment(const Tensor& z, const Tensor& z_ref, const ChunkLayout& layout) {
  if (z_ref.rank() != z.rank() || z_ref.dim(0) != 1)
    throw LayoutError("reference latent must be a single frame shaped like the sequence, got " + to_string(z_ref.dims()));
  auto chunks = segment(z, layout);
  for (auto& c : chunks) c = concat({z_ref, c}, 0);
  return chunks;
}

Stitched stitch(const std::vector<Tensor>& chunks) {
  if (chunks.empty()) throw LayoutError("nothing to stitch");
  const Dims& d0 = chunks.front().dims();
  if (d0.empty() || d0[0] < 2) throw LayoutError("chunks need at least two frames, got " + to_string(d0));
  std::vector<Tensor> parts{chunks.front()};
  Stitched out;
  for (std::size_t j = 1; j < chunks.size(); ++j) {
    const Tensor& c = chunks[j];
    if (c.dims() != d0) throw LayoutError("chunk " + std::to_string(j) + " is " + to_string(c.dims()) + ", expected " + to_string(d0));
    const Tensor prev_last = slice(chunks[j - 1], 0, d0[0] - 1, d0[0]);
    const Tensor first = slice(c, 0, 0, 1);
    double s = 0.0;
    for (std::int64_t i = 0; i < first.numel(); ++i) {
      const double diff = static_cast<double>(first.at(i)) - prev_last.at(i);
      s += diff * diff;
    }
    out.boundary_disagreement.push_back(std::sqrt(s));
    parts.push_back(slice(c, 0, 1, d0[0]));
  }
  out.latents = concat(parts, 0);
  return out;
}

std::vector<float> async_timesteps(const ChunkLayout& layout, std::span<const float> per_chunk_t) {
  if (static_cast<std::int64_t>(per_chunk_t.size()) != layout.k)
    throw LayoutError(std::to_string(per_chunk_t.size()) + " chunk timesteps for " + std::to_string(layout.k) + " chunks");
  std::vector<float> t{0.0f};
  for (std::int64_t j = 0; j < layout.k; ++j) {
    const float tj = per_chunk_t[static_cast<std::size_t>(j)];
    if (!(tj >= 0.0f && tj <= 1.0f)) throw DomainError("chunk timestep " + std::to_string(tj) + " outside [0, 1]");
    const std::int64_t owned = j == 0 ? layout.chunk_len : layout.chunk_len - 1;
    t.insert(t.end(), static_cast<std::size_t>(owned), tj);
  }
  return t;
}

}  // namespace rest
