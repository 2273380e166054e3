#pragma once

// Dense row-major tensors with a tape-free reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Values are immutable once an
// op has produced them; only leaf parameters are written in place (by the
// optimizer), and the grad slot is filled by backward().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "siamav/error.hpp"

namespace siamav {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Scalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

template <Scalar T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <Scalar T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero dimension");
    }
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static constexpr DType dtype() { return dtype_of<T>(); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // In-place access is reserved for leaves (parameters, optimizer updates).
  std::span<T> mutable_data() {
    if (!node_->is_leaf) throw ContractError("in-place write to a non-leaf tensor");
    return node_->data;
  }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) node_->ensure_grad();
    return node_->grad;
  }
  // Leaf-only, for gradient clipping.
  std::span<T> mutable_grad() {
    if (!node_->is_leaf) throw ContractError("in-place grad write to a non-leaf tensor");
    return node_->ensure_grad();
  }
  void zero_grad() { node_->grad.clear(); }

  Tensor detach_copy() const { return Tensor(shape(), node_->data); }

  detail::Node<T>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Creates an op output. Parents are retained only when some parent needs a
// gradient, so inference graphs are freed eagerly.
template <Scalar T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  if (shape.empty()) shape = {1};
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->is_leaf = false;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor<T>& p) { return p.requires_grad(); });
  if (any) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>::from_node(std::move(n));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls;
// every reachable node is visited exactly once in reverse topological order.
template <Scalar T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  using N = detail::Node<T>;
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  std::vector<std::pair<N*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      N* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* node = *it;
    if (node->backward_fn) {
      for (auto& p : node->parents) {
        if (p->requires_grad) p->ensure_grad();
      }
      node->backward_fn(*node);
    }
  }
  // Intermediate grads are no longer needed; leaves keep theirs.
  for (N* node : order) {
    if (!node->is_leaf) std::vector<T>().swap(node->grad);
  }
}

}  // namespace siamav
