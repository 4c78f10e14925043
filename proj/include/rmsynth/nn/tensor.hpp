#pragma once

// Minimal reverse-mode tensor: a shared node holding a value buffer, a lazily
// allocated gradient buffer and, for op results, the parents plus a closure
// that pushes this node's gradient into them.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace rmsynth::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("Tensor: data length does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; meant for leaves (parameters, optimizer updates).
  std::span<T> mutable_data() { return node_->value; }
  T item() const {
    if (size() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw std::logic_error("Tensor::grad: no gradient accumulated");
    return node_->grad;
  }
  std::span<T> grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Leaf copy with the same values and no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Reverse sweep from this scalar; leaf gradients accumulate.
  void backward() const {
    if (size() != 1) throw std::logic_error("backward() needs a scalar output");
    if (!requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (auto* n : order)
      if (n->backward) n->grad.clear();
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. `backward` runs only when some parent needs a gradient
/// and receives the result node, whose grad buffer is filled.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
  }
  return out;
}

// Gradient buffer of parent `i` if it takes part in differentiation.
template <class T>
std::vector<T>* parent_grad(Node<T>& n, std::size_t i) {
  auto& p = *n.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

template <class T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class T>
void set_trainable(ParamList<T>& params, bool on) {
  for (auto& p : params) p.tensor.set_requires_grad(on);
}

}  // namespace rmsynth::nn
