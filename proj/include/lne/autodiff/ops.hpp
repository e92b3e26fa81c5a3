#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lne/autodiff/tape.hpp"
#include "lne/autodiff/tensor.hpp"

// Differentiable operations. Every op takes the tape it records onto as its
// first argument and returns a fresh tensor owned by that tape.
namespace lne::ad {

/// 3x3 cross-correlation, zero padding 1, stride 1.
/// input [B,C,H,W], kernel [K,C,3,3], bias [K] -> [B,K,H,W].
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias);

/// max(x, slope*x) elementwise; slope in (0,1).
template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& input, T slope);

/// Non-overlapping 2x2 max pooling. Ties route to the first element in
/// row-major window order.
template <typename T>
Tensor<T> maxpool2(Tape<T>& tape, const Tensor<T>& input);

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample2(Tape<T>& tape, const Tensor<T>& input);

enum class BatchNormMode { Train, Eval };

/// Running statistics of one batchnorm layer; both tensors have shape [C]
/// and are updated in place in train mode.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over batch and spatial axes of [B,C,...].
/// Train mode normalizes by batch statistics (biased variance) and blends
/// them into the running statistics (unbiased variance); eval mode uses the
/// running statistics.
template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormStats<T>& stats, BatchNormMode mode, double eps = kBatchNormEps,
                    double momentum = kBatchNormMomentum);

/// input [B,N], weight [M,N], bias [M] -> [B,M].
template <typename T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// a.b / (max(|a|,eps) * max(|b|,eps)) for two vectors of equal length.
template <typename T>
Tensor<T> cosine_similarity(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps);

/// Row-wise cosine similarity of two [N,d] matrices -> [N].
template <typename T>
Tensor<T> cosine_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps);

/// Mean of squared elementwise differences.
template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input);

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& input);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T factor);

/// Elementwise product with a constant tensor of the same shape.
template <typename T>
Tensor<T> mul_const(Tape<T>& tape, const Tensor<T>& input, std::span<const T> factors);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape shape);

/// Concatenation along axis 0; trailing dimensions must agree.
template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& input, std::size_t begin, std::size_t end);

/// [N,p] ++ [N,q] -> [N,p+q].
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Divides row i of [N,...] by divisors[i].
template <typename T>
Tensor<T> row_divide(Tape<T>& tape, const Tensor<T>& input, std::span<const T> divisors);

/// Constant [N,N] row-major matrix times [N,d] input.
template <typename T>
Tensor<T> matmul_const(Tape<T>& tape, std::span<const T> matrix, const Tensor<T>& input);

/// Repeats a [d] vector into [n,d].
template <typename T>
Tensor<T> tile_rows(Tape<T>& tape, const Tensor<T>& vec, std::size_t n);

/// (x - shift[j]) * scale[j] per column j of [N,d]; shift and scale are constants.
template <typename T>
Tensor<T> affine_columns(Tape<T>& tape, const Tensor<T>& input, std::span<const T> shift, std::span<const T> scale);

/// Weighted mean softmax cross-entropy over rows of logits [N,C]:
/// sum_i w[y_i] * CE_i / sum_i w[y_i].
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels,
                                std::span<const T> class_weights);

}  // namespace lne::ad
