#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <string_view>
#include <vector>

#include "lne/autodiff/tensor.hpp"

namespace lne::ad {

namespace detail {
std::uint64_t next_tape_id();
}

/// Records the backward closures of executed operations in execution order.
/// A tape is single-use: backward() consumes it.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : id_(detail::next_tape_id()), recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const noexcept { return id_; }
  bool recording() const noexcept { return recording_; }
  bool consumed() const noexcept { return consumed_; }
  std::size_t size() const noexcept { return backward_fns_.size(); }

  /// Wraps an op result. Gradients are tracked when recording and any input
  /// of the op requires them. Rejects non-finite values.
  Tensor<T> make_output(std::string_view op, Shape shape, std::vector<T> values, bool inputs_need_grad) {
    for (const T& v : values) {
      if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + " produced a non-finite value");
    }
    Tensor<T> out(std::move(shape), std::move(values), recording_ && inputs_need_grad);
    out.node().tape_id = id_;
    return out;
  }

  void record(std::function<void()> backward_fn) {
    if (consumed_) throw AutodiffError("cannot record onto a consumed tape");
    backward_fns_.push_back(std::move(backward_fn));
  }

  /// Reverse pass from a scalar loss produced on this tape. Gradients
  /// accumulate into every requires_grad tensor reachable from the loss.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw AutodiffError("backward called twice on the same tape; re-run the forward pass");
    if (!loss.defined() || loss.size() != 1) throw AutodiffError("backward requires a scalar loss");
    if (loss.tape_id() != id_) throw AutodiffError("loss tensor was not produced on this tape");
    consumed_ = true;
    if (!loss.requires_grad()) {
      backward_fns_.clear();
      return;
    }
    loss.node().ensure_grad();
    loss.node().grad[0] += T(1);
    for (auto it = backward_fns_.rbegin(); it != backward_fns_.rend(); ++it) (*it)();
    backward_fns_.clear();
  }

 private:
  std::uint64_t id_;
  bool recording_;
  bool consumed_ = false;
  std::vector<std::function<void()>> backward_fns_;
};

}  // namespace lne::ad
