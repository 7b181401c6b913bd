#include "rest/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "rest/error.hpp"

namespace rest {

namespace {
thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_flops = 0;
}  // namespace

std::int64_t product(const Dims& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

namespace detail {

std::span<float> grad_buffer(Node& node) {
  if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), 0.0f);
  return node.grad;
}

void add_flops(std::uint64_t n) noexcept { t_flops += n; }

namespace {
template <class Range>
Tensor make_result_impl(Dims dims, std::vector<float> data, const Range& parents, const char* op,
                        std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  node->op = op;
  if (static_cast<std::int64_t>(node->data.size()) != product(node->dims))
    throw ShapeError(std::string(op) + ": result buffer does not match dims " + to_string(node->dims));
  if (t_grad_enabled) {
    bool any = false;
    for (const Tensor& p : parents) any = any || (p.defined() && p.requires_grad());
    if (any) {
      node->requires_grad = true;
      node->leaf = false;
      for (const Tensor& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(Dims dims, std::vector<float> data, std::initializer_list<Tensor> parents,
                   const char* op, std::function<void(Node&)> backward_fn) {
  return make_result_impl(std::move(dims), std::move(data), parents, op, std::move(backward_fn));
}

Tensor make_result(Dims dims, std::vector<float> data, const std::vector<Tensor>& parents,
                   const char* op, std::function<void(Node&)> backward_fn) {
  return make_result_impl(std::move(dims), std::move(data), parents, op, std::move(backward_fn));
}

}  // namespace detail

Tensor::Tensor(Dims dims, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  for (auto d : dims)
    if (d < 0) throw ShapeError("negative dimension in " + to_string(dims));
  node_->data.assign(static_cast<std::size_t>(product(dims)), 0.0f);
  node_->dims = std::move(dims);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Dims dims, std::vector<float> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (static_cast<std::int64_t>(values.size()) != product(dims))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match dims " +
                     to_string(dims));
  node_->dims = std::move(dims);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::full(Dims dims, float value) {
  Tensor t(std::move(dims));
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::randn(Dims dims, CounterRng& rng, float stddev) {
  Tensor t(std::move(dims));
  for (auto& v : t.node_->data) v = stddev * rng.normal();
  return t;
}

Tensor Tensor::uniform(Dims dims, CounterRng& rng, float lo, float hi) {
  Tensor t(std::move(dims));
  for (auto& v : t.node_->data) v = rng.uniform(lo, hi);
  return t;
}

const Dims& Tensor::dims() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->dims;
}

std::int64_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(dims()));
  return dims()[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(values().size()); }

std::span<const float> Tensor::values() const {
  if (!node_) throw UsageError("use of an undefined tensor");
  return node_->data;
}

std::span<float> Tensor::mutable_values() {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->leaf) throw UsageError(std::string("in-place write to the result of '") + node_->op + "'");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of dims " + to_string(dims()));
  return values()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_) throw UsageError("use of an undefined tensor");
  if (!node_->leaf) throw UsageError("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(dims(), std::vector<float>(values().begin(), values().end())); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() noexcept { return t_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on an undefined tensor");
  if (loss.numel() != 1)
    throw UsageError("backward requires a scalar loss, got dims " + to_string(loss.dims()));
  if (!loss.requires_grad()) throw UsageError("backward on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p != nullptr && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->leaf) n->grad.assign(n->data.size(), 0.0f);
  detail::grad_buffer(*loss.node())[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->leaf && n->backward) n->backward(*n);
  }
}

bool all_finite(std::span<const float> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

void check_finite(const Tensor& t, std::string_view what) {
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << v[i] << " at flat index " << i << " of tensor "
         << to_string(t.dims());
      throw NumericalError(os.str());
    }
  }
}

FlopScope::FlopScope() : start_(t_flops) {}
std::uint64_t FlopScope::count() const { return t_flops - start_; }

}  // namespace rest
