#pragma once

// Tensor kernels for the equilibrium classifier and their vector-Jacobian
// products. Convolutions are 3x3, stride 1, zero "same" padding,
// cross-correlation (no kernel flip). Batch items are processed in parallel
// with OpenMP; every output element has a fixed reduction order, so results
// are bitwise reproducible for a given thread count.

#include <span>
#include <utility>
#include <vector>

#include "deqnca/tensor.hpp"

namespace deqnca::ops {

inline constexpr std::size_t kKernel = 3;

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

/// input [B,Cin,H,W], weight [Cout,Cin,3,3], bias [Cout] -> [B,Cout,H,W].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
/// Bias-free variant.
Tensor conv2d(const Tensor& input, const Tensor& weight);

ConvGrads conv2d_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out);
/// Only the input cotangent; skips the weight reduction.
Tensor conv2d_vjp_input(const Tensor& weight, const Tensor& grad_out);
/// Weight and bias cotangents only (input slot left empty).
ConvGrads conv2d_vjp_params(const Tensor& input, const Tensor& grad_out);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
/// Uses the forward input; relu'(0) is taken as 0.
Tensor relu_vjp(const Tensor& x, const Tensor& grad_out);
/// Uses the forward output y = tanh(x).
Tensor tanh_vjp(const Tensor& y, const Tensor& grad_out);

/// Stacks `a` in the leading channels and `b` after it.
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first_channels);

/// [B,C,H,W] -> [B,C] spatial mean.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_vjp(const Tensor& grad_out, std::size_t height, std::size_t width);

struct LinearGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};

/// input [B,F], weight [G,F], bias [G] -> [B,G].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
LinearGrads linear_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out);

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean softmax cross-entropy over the batch; grad is (softmax - onehot) / B.
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Classical momentum: v <- momentum * v + g; p <- p - lr * v.
struct SgdState {
  double learning_rate = 0.005;
  double momentum = 0.9;
  std::vector<Tensor> velocity;
};

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, SgdState& state);

}  // namespace deqnca::ops
