#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rest/rng.hpp"
#include "rest/tensor.hpp"

namespace rest::verify {

struct GradcheckOptions {
  float eps = 1e-3f;
  /// Entries probed per tensor; 0 probes every entry.
  std::int64_t samples_per_tensor = 0;
  /// Tensors whose analytic and numeric gradient norms both fall below this
  /// are reported as zero error.
  double negligible_norm = 1e-6;
  /// Same, relative to the largest gradient norm of any tensor in the check.
  /// Catches exact symmetries, e.g. a bias that cancels in a difference.
  double negligible_fraction = 0.0;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::int64_t probes = 0;
  [[nodiscard]] bool passed(double tol) const { return max_rel_error <= tol; }
};

using NamedLeaf = std::pair<std::string, Tensor>;

/// Central finite differences against reverse-mode gradients. `loss_fn`
/// must rebuild the loss from the current leaf values on every call. The
/// relative error of a tensor is ||g_analytic - g_numeric|| / max(norms)
/// over the probed entries; the report keeps the worst tensor.
GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<NamedLeaf>& leaves,
                          const GradcheckOptions& opts = {});

}  // namespace rest::verify
