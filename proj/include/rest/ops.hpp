#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rest/tensor.hpp"

// Differentiable tensor operations. Every function returns a new tensor and
// registers a backward rule when grad mode is on and an input requires grad.
//
// Broadcasting is limited to leading batch dimensions: in binary elementwise
// ops the second operand's dims must equal the first's or be a suffix of them.

namespace rest {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& x, float s) { return scale(x, s); }
inline Tensor operator*(float s, const Tensor& x) { return scale(x, s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0f); }

/// Batched matrix product of [..., m, k] and [..., k, n]. Batch dims must be
/// equal, or one side must be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x·w + bias, with bias optional (undefined tensor).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});
/// Swaps the last two dimensions.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Dims dims);

Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, int axis, std::int64_t begin, std::int64_t end);
/// Row r of the result is row idx[r] of x, where rows run along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> idx);

Tensor softmax(const Tensor& x, int axis);
/// log Σ exp over `axis`; the axis is removed from the result.
Tensor logsumexp(const Tensor& x, int axis);
/// Normalizes over the last axis; gain and bias are optional.
Tensor layer_norm(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {}, float eps = 1e-5f);

/// Scales each slice along the last axis to unit L2 norm; all-zero slices stay zero.
Tensor normalize_last(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);

/// Scalar reductions (dims {}), accumulated in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
/// Cosine similarity of the flattened tensors; 0 when either has zero norm.
Tensor cosine_sim(const Tensor& a, const Tensor& b);

/// Multi-head scaled dot-product attention, fused forward and backward.
/// q: [..., Tq, d], k and v: [..., Tk, d]; d must be divisible by `heads`.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

}  // namespace rest
