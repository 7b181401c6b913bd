#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rest/rng.hpp"

namespace rest {

using Dims = std::vector<std::int64_t>;

std::int64_t product(const Dims& dims);
std::string to_string(const Dims& dims);

namespace detail {

// One vertex of the reverse-mode graph. Leaves have no backward rule;
// interior nodes hold their parents and a closure that reads `grad` and
// accumulates into the parents' grads.
struct Node {
  Dims dims;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

/// Lazily allocates and returns the gradient buffer of `node`.
std::span<float> grad_buffer(Node& node);

}  // namespace detail

/// Dense row-major f32 tensor with optional reverse-mode gradients.
///
/// A Tensor is a cheap handle; copies share the underlying buffer. Every
/// operation allocates a fresh result, so results are never aliased and the
/// only in-place writes are parameter updates on leaves.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, bool requires_grad = false);
  Tensor(Dims dims, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor full(Dims dims, float value);
  static Tensor scalar(float value) { return Tensor(Dims{}, std::vector<float>{value}); }
  static Tensor randn(Dims dims, CounterRng& rng, float stddev = 1.0f);
  static Tensor uniform(Dims dims, CounterRng& rng, float lo, float hi);

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] const Dims& dims() const;
  [[nodiscard]] std::size_t rank() const { return dims().size(); }
  /// Size along `axis`; negative axes count from the back.
  [[nodiscard]] std::int64_t dim(int axis) const;
  [[nodiscard]] std::int64_t numel() const;

  [[nodiscard]] std::span<const float> values() const;
  /// Mutable access is reserved for leaves (parameters, inputs).
  std::span<float> mutable_values();
  [[nodiscard]] float item() const;
  [[nodiscard]] float at(std::int64_t flat_index) const { return values()[static_cast<std::size_t>(flat_index)]; }

  [[nodiscard]] bool requires_grad() const;
  void set_requires_grad(bool on);
  [[nodiscard]] bool has_grad() const;
  /// Gradient buffer; empty span when no gradient has been accumulated.
  [[nodiscard]] std::span<const float> grad() const;
  void zero_grad();

  [[nodiscard]] Tensor detach() const;
  [[nodiscard]] Tensor clone() const { return detach(); }

  [[nodiscard]] const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

[[nodiscard]] bool grad_enabled() noexcept;

/// Back-propagates from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed from scratch each time.
void backward(const Tensor& loss);

/// Throws NumericalError naming `what` if any value is NaN or Inf.
void check_finite(const Tensor& t, std::string_view what);
[[nodiscard]] bool all_finite(std::span<const float> values) noexcept;

/// Thread-local multiply-add counter fed by matmul and attention kernels.
/// Counts forward FLOPs only (2 per multiply-accumulate).
class FlopScope {
 public:
  FlopScope();
  [[nodiscard]] std::uint64_t count() const;

 private:
  std::uint64_t start_;
};

namespace detail {
void add_flops(std::uint64_t n) noexcept;

/// Builds an op result; records the graph edge only when grad mode is on
/// and some parent requires a gradient.
Tensor make_result(Dims dims, std::vector<float> data, std::initializer_list<Tensor> parents,
                   const char* op, std::function<void(Node&)> backward_fn);
Tensor make_result(Dims dims, std::vector<float> data, const std::vector<Tensor>& parents,
                   const char* op, std::function<void(Node&)> backward_fn);
}  // namespace detail

}  // namespace rest
