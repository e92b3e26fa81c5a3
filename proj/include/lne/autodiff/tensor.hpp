#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lne::ad {

using Shape = std::vector<std::size_t>;

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public AutodiffError {
 public:
  using AutodiffError::AutodiffError;
};

class NonFiniteError : public AutodiffError {
 public:
  using AutodiffError::AutodiffError;
};

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // Identity of the tape that produced this tensor; 0 for leaves.
  std::uint64_t tape_id = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(shape_size(shape), T(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(shape_size(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t tape_id() const { return node_->tape_id; }
  bool is_leaf() const { return node_->tape_id == 0; }

  std::span<const T> data() const { return node_->value; }
  // Mutable access for leaves (optimizer updates, running statistics).
  std::span<T> mutable_data() { return node_->value; }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  Tensor clone() const {
    Tensor out(node_->shape, node_->value, node_->requires_grad);
    return out;
  }

  // Same values, cut from any tape; never receives gradients.
  Tensor detached() const { return Tensor(node_->shape, node_->value, false); }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  TensorNode<T>& node() const { return *node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace lne::ad
