#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kpn/errors.hpp"

namespace kpn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  // Empty until something accumulates into it.
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<Real>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

// Shared handle onto a node of the differentiation tape. Copies alias the
// same storage; use clone() for an independent leaf.
template <typename Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_extents(shape);
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_extents(shape);
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> values() const { return node_->value; }
  // Mutable access for optimizers and initializers only; ops never write
  // through it.
  std::span<Real> mutable_values() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ShapeError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Real item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + shape_str(shape()));
    return node_->value[0];
  }

  // New leaf with copied values and no history.
  Tensor detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    return Tensor(std::move(node));
  }

  // Independent leaf that keeps requires_grad.
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void check_extents(const Shape& shape) {
    for (auto e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

// Builds an op result. History is recorded only when a parent needs grads,
// so forward passes through frozen networks leave no tape behind.
template <typename Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> value,
                         std::initializer_list<Tensor<Real>> parents,
                         std::function<void(TensorNode<Real>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<Real>(std::move(node));
}

// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
// interior grads are reset so the same graph can be swept more than once.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  using Node = TensorNode<Real>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->value.size(), Real(0));
  }
  loss.node()->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

}  // namespace kpn
