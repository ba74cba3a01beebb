#pragma once

// Serial nested-loop kernels. Kept as the correctness baseline for the
// parallel im2col/GEMM kernels in ops.hpp and as the benchmark reference.

#include "deqnca/ops.hpp"

namespace deqnca::reference {

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias);
ops::ConvGrads conv2d_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out);

}  // namespace deqnca::reference
