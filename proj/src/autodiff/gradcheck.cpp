#include "lne/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lne/seed.hpp"

namespace lne::ad {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const ScalarFunction& function, std::vector<TensorD>& inputs, double step) {
  GradCheckOptions options;
  options.step = step;
  return grad_check(function, inputs, options);
}

GradCheckResult grad_check(const ScalarFunction& function, std::vector<TensorD>& inputs,
                           const GradCheckOptions& options) {
  const double step = options.step;
  for (const auto& t : inputs) {
    if (!t.is_leaf() || !t.requires_grad()) throw AutodiffError("grad_check inputs must be requires_grad leaves");
  }
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    TensorD loss = function(tape, inputs);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.size(), 0.0);
  }

  auto evaluate = [&]() {
    Tape<double> tape(false);
    return function(tape, inputs).item();
  };

  GradCheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_per_input > 0 && coords.size() > options.max_per_input) {
      Rng rng = make_rng(options.seed, "gradcheck", i);
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double original = values[j];
      values[j] = original + step;
      const double fp = evaluate();
      values[j] = original - step;
      const double fm = evaluate();
      values[j] = original;
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = relative_error(analytic[i][j], numeric);
      ++result.coordinates_checked;
      if (err > result.max_rel_error || result.coordinates_checked == 1) {
        result.max_rel_error = err;
        result.input_index = i;
        result.coordinate = j;
        result.analytic = analytic[i][j];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

namespace testing {

template <typename T>
Tensor<T> faulty_identity(Tape<T>& tape, const Tensor<T>& input, T factor) {
  std::vector<T> out(input.data().begin(), input.data().end());
  Tensor<T> result = tape.make_output("faulty_identity", input.shape(), std::move(out), input.requires_grad());
  if (result.requires_grad()) {
    auto on = result.node_ptr(), xn = input.node_ptr();
    tape.record([=]() {
      if (on->grad.empty() || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += factor * on->grad[i];
    });
  }
  return result;
}

template Tensor<float> faulty_identity(Tape<float>&, const Tensor<float>&, float);
template Tensor<double> faulty_identity(Tape<double>&, const Tensor<double>&, double);

}  // namespace testing

}  // namespace lne::ad
