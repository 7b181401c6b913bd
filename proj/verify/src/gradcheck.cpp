#include "rest/verify/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rest::verify {

GradcheckReport gradcheck(const std::function<Tensor()>& loss_fn, const std::vector<NamedLeaf>& leaves,
                          const GradcheckOptions& opts) {
  for (const auto& [name, t] : leaves) Tensor(t).zero_grad();
  Tensor loss = loss_fn();
  backward(loss);

  GradcheckReport report;
  CounterRng rng(opts.seed);
  struct Norms {
    std::string name;
    double diff, denom;
  };
  std::vector<Norms> norms;
  double largest = 0.0;
  for (const auto& [name, leaf] : leaves) {
    Tensor t = leaf;
    const std::int64_t n = t.numel();
    std::vector<std::int64_t> probe(static_cast<std::size_t>(n));
    std::iota(probe.begin(), probe.end(), 0);
    if (opts.samples_per_tensor > 0 && n > opts.samples_per_tensor) {
      for (std::int64_t i = 0; i < opts.samples_per_tensor; ++i)
        std::swap(probe[static_cast<std::size_t>(i)],
                  probe[static_cast<std::size_t>(i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i))))]);
      probe.resize(static_cast<std::size_t>(opts.samples_per_tensor));
    }
    const auto analytic = t.grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto idx : probe) {
      auto values = t.mutable_values();
      const float orig = values[static_cast<std::size_t>(idx)];
      float up = 0.0f, down = 0.0f;
      {
        NoGradGuard ng;
        values[static_cast<std::size_t>(idx)] = orig + opts.eps;
        up = loss_fn().item();
        values[static_cast<std::size_t>(idx)] = orig - opts.eps;
        down = loss_fn().item();
      }
      values[static_cast<std::size_t>(idx)] = orig;
      const double numeric = (static_cast<double>(up) - down) / (2.0 * opts.eps);
      const double a = analytic.empty() ? 0.0 : analytic[static_cast<std::size_t>(idx)];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++report.probes;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    largest = std::max(largest, denom);
    norms.push_back({name, std::sqrt(diff2), denom});
  }
  const double floor = std::max(opts.negligible_norm, opts.negligible_fraction * largest);
  for (const auto& t : norms) {
    const double rel = t.denom < floor ? 0.0 : t.diff / t.denom;
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_tensor = t.name;
    }
  }
  return report;
}

}  // namespace rest::verify
