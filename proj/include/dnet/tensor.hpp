#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dnet/error.hpp"

namespace dnet {

/// Dense 4-D extent in (batch, height, width, channels) order. Kernels reuse
/// the same type as (kh, kw, in_channels, out_channels).
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Row-major NHWC tensor participating in reverse-mode differentiation.
///
/// A Tensor is a cheap handle: copies share the underlying storage. Values
/// produced by operations are never mutated afterwards; only leaves (model
/// parameters) are updated in place by the optimizer between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{0, 0, 0, 0}) {}
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false)
      : Tensor(shape, std::vector<T>(data), requires_grad) {}

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return full({1, 1, 1, 1}, value); }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  bool empty() const { return node_->data.empty(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(int n, int i, int j, int c) const {
    const Shape& s = node_->shape;
    return node_->data[((static_cast<std::size_t>(n) * s.h + i) * s.w + j) *
                           s.c + c];
  }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; all zeros when nothing has flowed here yet.
  std::vector<T> grad() const;
  std::span<const T> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no graph history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node) {
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node<T>> node)
      : node_(std::move(node)) {}

  std::shared_ptr<detail::Node<T>> node_;
};

/// Reverse topological order is the backward schedule.
template <typename T>
class Graph {
 public:
  /// Records every node reachable from `root`, inputs before consumers.
  /// Throws ErrorCode::graph if the recorded history contains a cycle.
  static Graph trace(const Tensor<T>& root);

  std::span<detail::Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }
  bool contains(const Tensor<T>& t) const;

 private:
  std::vector<detail::Node<T>*> order_;
};

/// Runs backward from a scalar loss. Every tensor with requires_grad set
/// that the loss depends on receives d(loss)/d(tensor) added to its grad.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void backward(const Tensor<T>& loss, const Graph<T>& graph);

/// Builds an operation result. When no input requires a gradient the result
/// is a plain constant and `rule` is discarded.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> rule);

// Elementwise and structural operations.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
/// Sum of all elements as a 1x1x1x1 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
  return concat_channels<T>(std::span<const Tensor<T>>(parts.begin(), parts.size()));
}
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int count);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Per-channel batch normalisation over (N, H, W). In training mode the
/// batch statistics are used and blended into the running estimates with
/// `momentum`; otherwise the running estimates are used.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T momentum = T(0.1),
                     T eps = T(1e-5));

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}

/// Converts between element types (values only, no history).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(out));
}

}  // namespace dnet
