#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rest/tensor.hpp"

namespace rest {

/// Named trainable tensors. std::map keeps iteration sorted by name, which is
/// the canonical order for checkpoints and optimizer state.
using ParamStore = std::map<std::string, Tensor>;

std::vector<Tensor> param_list(const ParamStore& params);
void zero_grads(ParamStore& params);
/// Deep copy; the copies are fresh leaves with the same requires_grad flags.
ParamStore clone_params(const ParamStore& params);
std::int64_t param_count(const ParamStore& params);

struct AdamConfig {
  float lr = 1e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

/// First/second moment buffers, one per parameter, in the order of the
/// parameter list passed to adam_step.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update. Parameters without a gradient are treated as
/// having a zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

/// Global L2 norm of all gradients.
double grad_norm(const std::vector<Tensor>& params);
/// Rescales gradients so their global norm is at most max_norm; returns the
/// norm measured before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace rest
