#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lne/autodiff/ops.hpp"

namespace lne::ad {

using ScalarFunction = std::function<TensorD(Tape<double>&, std::span<const TensorD>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t input_index = 0;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double analytic, double numeric);

/// Compares the reverse-mode gradient of a scalar function against central
/// differences (f(x+h) - f(x-h)) / 2h for every coordinate of every input.
/// Inputs must be leaves with requires_grad set; their values are restored
/// and their gradients left holding the reverse-mode result.
GradCheckResult grad_check(const ScalarFunction& function, std::vector<TensorD>& inputs, double step = 1e-5);

struct GradCheckOptions {
  double step = 1e-5;
  /// Check at most this many coordinates per input, sampled without
  /// replacement (0 = all).
  std::size_t max_per_input = 0;
  std::uint64_t seed = 0;
};

GradCheckResult grad_check(const ScalarFunction& function, std::vector<TensorD>& inputs,
                           const GradCheckOptions& options);

namespace testing {

/// Identity in the forward pass whose backward multiplies the incoming
/// gradient by `factor`. Used to prove that the gradient checker catches a
/// broken backward rule.
template <typename T>
Tensor<T> faulty_identity(Tape<T>& tape, const Tensor<T>& input, T factor);

}  // namespace testing

}  // namespace lne::ad
