#include "rest/optim.hpp"

#include <cmath>

#include "rest/error.hpp"

namespace rest {

std::vector<Tensor> param_list(const ParamStore& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

void zero_grads(ParamStore& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

ParamStore clone_params(const ParamStore& params) {
  ParamStore out;
  for (const auto& [name, t] : params) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    out.emplace(name, std::move(c));
  }
  return out;
}

std::int64_t param_count(const ParamStore& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: optimizer state does not match parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (m.size() != static_cast<std::size_t>(params[p].numel()))
      throw UsageError("adam_step: moment buffer size mismatch for parameter " + std::to_string(p));
    const auto g = params[p].grad();
    auto w = params[p].mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g.empty() ? 0.0f : g[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

double grad_norm(const std::vector<Tensor>& params) {
  double total = 0.0;
  for (const Tensor& p : params)
    for (float g : p.grad()) total += static_cast<double>(g) * g;
  return std::sqrt(total);
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const auto k = static_cast<float>(max_norm / norm);
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (float& g : p.node()->grad) g *= k;
    }
  }
  return norm;
}

}  // namespace rest
