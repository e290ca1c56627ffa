#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfkd/common.hpp"
#include "dfkd/tensor.hpp"

namespace dfkd {

// Reverse-mode automatic differentiation over Tensor<T>. Each forward op
// produces a Node holding the output value plus a closure that scatters the
// incoming gradient to the op's inputs. The tape is rebuilt every step and
// torn down as backward() consumes it.

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // lazily allocated; persists on leaves until zero_grad
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node<T>>> parents;  // inputs that require grad
  std::function<void(Node<T>&)> backward_fn;      // reads this->grad
};

template <typename T>
inline void accumulate_grad(Node<T>& n, const Tensor<T>& g) {
  DFKD_CHECK(g.same_shape(n.value), "grad shape " << g.shape_str() << " != value shape " << n.value.shape_str());
  if (!n.grad.defined()) n.grad = Tensor<T>(n.value.shape());
  T* dst = n.grad.data();
  const T* src = g.data();
  const std::int64_t m = g.numel();
  for (std::int64_t i = 0; i < m; ++i) dst[i] += src[i];
}

template <typename T>
class Variable {
 public:
  Variable() = default;
  explicit Variable(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Variable leaf(Tensor<T> value, bool requires_grad) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->is_leaf = true;
    return Variable(std::move(n));
  }

  static Variable constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.defined(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  void set_requires_grad(bool v) {
    DFKD_CHECK(node_ && node_->is_leaf, "set_requires_grad: only leaf variables");
    node_->requires_grad = v;
  }

  void zero_grad() {
    if (node_ && node_->grad.defined()) node_->grad.fill(T(0));
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

  // Backpropagate from a scalar root. Non-leaf nodes release their gradient
  // buffers and closures as soon as they have been consumed, so peak memory
  // falls while the tape unwinds.
  void backward() {
    DFKD_CHECK(defined() && node_->value.numel() == 1, "backward: root must be a defined scalar");
    if (!node_->requires_grad) return;

    std::vector<std::shared_ptr<Node<T>>> order;  // postorder: producers before consumers
    std::unordered_set<Node<T>*> visited;
    struct Frame {
      std::shared_ptr<Node<T>> node;
      std::size_t next_parent = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({node_});
    visited.insert(node_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        auto& p = f.node->parents[f.next_parent++];
        if (p->requires_grad && visited.insert(p.get()).second) stack.push_back({p});
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }

    node_->grad = Tensor<T>::full(node_->value.shape(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward_fn && n.grad.defined()) n.backward_fn(n);
      if (!n.is_leaf) {
        n.grad = Tensor<T>();
        n.backward_fn = nullptr;
        n.parents.clear();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op node. The closure receives the output node (value + grad) and
// must guard per-input accumulation with requires_grad() checks of the nodes
// it captured. Ops whose inputs are all constant skip the tape entirely.
template <typename T>
Variable<T> make_op(Tensor<T> value, const std::vector<Variable<T>>& inputs,
                    std::function<void(Node<T>&)> backward_fn) {
  bool req = false;
  for (const auto& in : inputs) req = req || in.requires_grad();
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (req) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->backward_fn = std::move(backward_fn);
    for (const auto& in : inputs)
      if (in.requires_grad()) n->parents.push_back(in.node());
  }
  return Variable<T>(std::move(n));
}

}  // namespace dfkd
