#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "malvit/tensor.hpp"

// Differentiable operations. Each takes the tape it records onto; on a tape
// that is not recording (or when no input is tracked) ops only compute values.
//
// Broadcasting is limited to leading dimensions: where an op accepts two
// operands of different rank, the second one's shape must equal a suffix of the
// first one's shape.
namespace malvit::ops {

/// a[..., m, k] x b[..., k, n] (or b[..., n, k] when transpose_b). b may be a
/// plain matrix shared by every leading batch index of a.
template <typename T>
Tensor<T> matmul(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b,
                 bool transpose_b = false);

/// x[..., k] W[k, n] + bias[n]; bias may be undefined.
template <typename T>
Tensor<T> linear(GradientTape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
Tensor<T> add(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(GradientTape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(GradientTape<T>& tape, const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> exp(GradientTape<T>& tape, const Tensor<T>& a);

/// Sum of all elements, as a scalar tensor.
template <typename T>
Tensor<T> sum(GradientTape<T>& tape, const Tensor<T>& a);

/// Reduction over one axis; the axis is removed from the result.
template <typename T>
Tensor<T> sum_axis(GradientTape<T>& tape, const Tensor<T>& a, int axis);

template <typename T>
Tensor<T> mean_axis(GradientTape<T>& tape, const Tensor<T>& a, int axis);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(GradientTape<T>& tape, const Tensor<T>& a, int axis);

/// Normalizes over the last dimension, then applies gamma/beta of that size.
template <typename T>
Tensor<T> layer_norm(GradientTape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-6);

/// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(GradientTape<T>& tape, const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(GradientTape<T>& tape, const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> permute(GradientTape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& axes);

template <typename T>
Tensor<T> slice(GradientTape<T>& tape, const Tensor<T>& x, int axis, std::size_t start,
                std::size_t length);

template <typename T>
Tensor<T> concat(GradientTape<T>& tape, const std::vector<Tensor<T>>& parts, int axis);

/// Repeats x along a new leading axis of size `count`.
template <typename T>
Tensor<T> expand_leading(GradientTape<T>& tape, const Tensor<T>& x, std::size_t count);

/// images[B, H, W, C] -> patches[B, N, P*P*C], patches in row-major grid order,
/// each flattened as (row, col, channel).
template <typename T>
Tensor<T> patchify(GradientTape<T>& tape, const Tensor<T>& images, std::size_t patch);

enum class Reduction { mean, sum };

/// Numerically stable binary cross-entropy on logits[B, n] against {0,1}
/// labels (row-major B x n). Returns per-task losses[n], reduced over the batch.
template <typename T>
Tensor<T> bce_with_logits(GradientTape<T>& tape, const Tensor<T>& logits,
                          std::span<const std::uint8_t> labels, Reduction reduction);

/// Scalar helpers shared with the loss code and tests.
double softplus(double x);
double gelu_value(double x);

}  // namespace malvit::ops
