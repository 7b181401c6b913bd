#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rest/tensor.hpp"

// Chunk layout over the non-reference latent frames, indexed from 0 here.
// Chunk j (0-based) covers frames [j(f-1), j(f-1) + f - 1]; consecutive
// chunks share one boundary frame, which belongs to the earlier chunk.

namespace rest {

struct ChunkLayout {
  std::int64_t f_total = 0;    // latent frames, reference excluded
  std::int64_t chunk_len = 0;  // f, shared boundary frame included
  std::int64_t k = 0;          // chunk count

  /// Throws LayoutError naming the nearest valid lengths when f_total != 1 + k(f-1).
  static ChunkLayout make(std::int64_t f_total, std::int64_t chunk_len);
  static ChunkLayout with_chunks(std::int64_t k, std::int64_t chunk_len);

  [[nodiscard]] std::int64_t begin(std::int64_t j) const { return j * (chunk_len - 1); }
  [[nodiscard]] std::int64_t end(std::int64_t j) const { return begin(j) + chunk_len; }
  /// First frame chunk j owns: the shared boundary goes to the earlier chunk.
  [[nodiscard]] std::int64_t owned_begin(std::int64_t j) const { return j == 0 ? 0 : begin(j) + 1; }
  /// Chunk owning frame g.
  [[nodiscard]] std::int64_t owner(std::int64_t g) const;
};

/// Splits frame-major latents [f_total, ...] into k chunks [f, ...].
std::vector<Tensor> segment(const Tensor& z, const ChunkLayout& layout);
/// Same, with the reference latent [1, ...] prepended to every chunk.
std::vector<Tensor> segment(const Tensor& z, const Tensor& z_ref, const ChunkLayout& layout);

struct Stitched {
  Tensor latents;                            // [f_total, ...]
  std::vector<double> boundary_disagreement; // L2 norm per shared frame, k - 1 entries
};

/// Inverse of segment; on each shared frame the earlier chunk wins.
Stitched stitch(const std::vector<Tensor>& chunks);

/// Timestep vector [0, t_1 (f times), t_2 (f-1 times), ..., t_k (f-1 times)]
/// of length 1 + f_total. Throws DomainError for t outside [0, 1].
std::vector<float> async_timesteps(const ChunkLayout& layout, std::span<const float> per_chunk_t);

}  // namespace rest
