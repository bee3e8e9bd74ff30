// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nic/error.hpp"

namespace nic {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle.
///
/// Copies share the underlying buffer (the computation tape needs stable
/// identities); use clone() for an independent copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_shape(shape);
    node_->data.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    check_shape(shape);
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape[1] + c]; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Deep copy, detached from any tape.
  Tensor clone() const {
    Tensor t(shape(), std::vector<T>(node_->data), requires_grad());
    return t;
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(v), requires_grad());
  }

  bool is(const Tensor& other) const noexcept { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations for reverse-mode replay.
///
/// A non-recording tape evaluates operations eagerly and keeps nothing,
/// which is what inference uses.
template <class T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Whether an op over these operands must be recorded.
  template <class... Ts>
  bool tracks(const Ts&... operands) const {
    return recording_ && (operands.requires_grad() || ...);
  }

  bool tracks_any(std::span<const Tensor<T>> operands) const {
    return recording_ && std::any_of(operands.begin(), operands.end(),
                                     [](const Tensor<T>& t) { return t.requires_grad(); });
  }

  /// `pullback` reads the output gradient and accumulates into operand grads.
  void record(const Tensor<T>& output, std::function<void(std::span<const T>)> pullback) {
    entries_.push_back({output.node(), std::move(pullback)});
  }

  /// Reverse sweep from a scalar root. Intermediate gradients are recomputed
  /// from scratch on every call; leaf gradients accumulate.
  void backward(const Tensor<T>& root) {
    if (!root.defined() || root.size() != 1) {
      throw DimensionError("backward root must be a scalar, got " +
                           (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
    }
    std::size_t end = entries_.size();
    while (end > 0 && entries_[end - 1].output != root.node()) --end;
    if (end == 0) throw Error("backward root was not produced on this tape");

    for (auto& e : entries_) e.output->grad.clear();
    root.node()->grad.assign(1, T(1));
    for (std::size_t i = end; i-- > 0;) {
      auto& e = entries_[i];
      if (e.output->grad.empty()) continue;  // not reachable from root
      e.pullback(e.output->grad);
    }
  }

 private:
  struct Entry {
    NodePtr output;
    std::function<void(std::span<const T>)> pullback;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace nic
