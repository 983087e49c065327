// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rasm/errors.hpp"
#include "rasm/rng.hpp"

namespace rasm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t*& mac_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}

}  // namespace detail

/// True unless a NoGradGuard is alive on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Accumulates the multiply-accumulate count of every product-type op
/// (matmul, convolutions, gathered attention products) executed on this
/// thread while alive. Used to cross-check the analytic FLOPs counter.
class MacCounter {
 public:
  MacCounter() : previous_(detail::mac_sink()) { detail::mac_sink() = &count_; }
  ~MacCounter() { detail::mac_sink() = previous_; }
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* previous_;
};

inline void record_macs(std::uint64_t macs) {
  if (auto* sink = detail::mac_sink()) *sink += macs;
}

/// One recorded value in the computation. Leaves have no backward function.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient buffer, allocated (zeroed) on first use.
  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major array that participates in reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same node. Values are only
/// changed by ops producing new tensors, with the exception of parameter
/// updates through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor axes must be positive, got " + shape_str(shape));
    }
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->seq = detail::node_counter().fetch_add(1);
  }

  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(v));
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = T(1);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) node_->grad_buffer();
    return node_->grad;
  }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

 private:
  NodePtr node_;
};

/// Builds the result node of a differentiable op. The backward function is
/// only attached when recording is on and some input requires a gradient.
template <typename T, typename Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs, Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto* in : inputs) node.parents.push_back(in->node());
  node.backward = std::forward<Fn>(backward);
  return out;
}

/// Ordered list of the recorded operations reachable from a scalar loss,
/// in reverse creation order. Creation order is a topological order of the
/// graph, so replaying in this order visits every node after all its
/// consumers.
template <typename T>
class ComputationRecord {
 public:
  explicit ComputationRecord(const Tensor<T>& loss) : loss_(loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("loss does not depend on any tensor that requires a gradient");
    }
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.node().get()};
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      nodes_.push_back(n);
      for (auto& p : n->parents) {
        if (p->requires_grad) stack.push_back(p.get());
      }
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
  }

  std::size_t size() const { return nodes_.size(); }
  std::vector<const char*> ops() const {
    std::vector<const char*> out;
    for (auto* n : nodes_) out.push_back(n->op);
    return out;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate;
  /// intermediate gradient buffers are released once consumed.
  void backward() {
    loss_.node()->grad_buffer()[0] += T(1);
    for (auto* n : nodes_) {
      if (!n->backward) continue;
      if (n->grad.size() == n->data.size()) n->backward(*n);
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }

 private:
  Tensor<T> loss_;
  std::vector<Node<T>*> nodes_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  ComputationRecord<T>(loss).backward();
}

}  // namespace rasm
