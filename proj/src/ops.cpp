#include "deqnca/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace deqnca::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

constexpr std::size_t kTaps = kKernel * kKernel;

struct ConvDims {
  std::size_t batch, in_ch, out_ch, height, width;
  std::size_t plane() const { return height * width; }
};

ConvDims check_conv(const Tensor& input, const Tensor& weight) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(2) != kKernel || weight.dim(3) != kKernel) {
    throw ShapeError("conv2d expects 3x3 kernels, got weight " + to_string(weight.shape()));
  }
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(input.shape()) + ", weight " +
                     to_string(weight.shape()));
  }
  return {input.dim(0), input.dim(1), weight.dim(0), input.dim(2), input.dim(3)};
}

// Unfolds one [C,H,W] item into a [C*9, H*W] row-major patch matrix.
void im2col(const double* src, const ConvDims& d, double* cols) {
  const std::size_t H = d.height, W = d.width;
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    const double* plane = src + c * H * W;
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kw = 0; kw < kKernel; ++kw) {
        double* row = cols + ((c * kKernel + kh) * kKernel + kw) * H * W;
        for (std::size_t h = 0; h < H; ++h) {
          double* out = row + h * W;
          const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
          if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + W, 0.0);
            continue;
          }
          const double* in = plane + static_cast<std::size_t>(sh) * W;
          if (kw == 0) {
            out[0] = 0.0;
            if (W > 1) std::memcpy(out + 1, in, (W - 1) * sizeof(double));
          } else if (kw == 1) {
            std::memcpy(out, in, W * sizeof(double));
          } else {
            if (W > 1) std::memcpy(out, in + 1, (W - 1) * sizeof(double));
            out[W - 1] = 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch cotangents back onto a [C,H,W] item.
void col2im(const double* cols, const ConvDims& d, double* dst) {
  const std::size_t H = d.height, W = d.width;
  std::fill(dst, dst + d.in_ch * H * W, 0.0);
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    double* plane = dst + c * H * W;
    for (std::size_t kh = 0; kh < kKernel; ++kh) {
      for (std::size_t kw = 0; kw < kKernel; ++kw) {
        const double* row = cols + ((c * kKernel + kh) * kKernel + kw) * H * W;
        for (std::size_t h = 0; h < H; ++h) {
          const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
          if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) continue;
          double* out = plane + static_cast<std::size_t>(sh) * W;
          const double* in = row + h * W;
          if (kw == 0) {
            for (std::size_t w = 1; w < W; ++w) out[w - 1] += in[w];
          } else if (kw == 1) {
            for (std::size_t w = 0; w < W; ++w) out[w] += in[w];
          } else {
            for (std::size_t w = 0; w + 1 < W; ++w) out[w + 1] += in[w];
          }
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  const ConvDims d = check_conv(input, weight);
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != d.out_ch)) {
    throw ShapeError("conv2d bias " + to_string(bias->shape()) + " does not match weight " +
                     to_string(weight.shape()));
  }
  Tensor out({d.batch, d.out_ch, d.height, d.width});
  const std::size_t P = d.plane();
  const std::size_t K = d.in_ch * kTaps;
  ConstMatrixMap w(weight.data(), static_cast<Eigen::Index>(d.out_ch), static_cast<Eigen::Index>(K));
  const long long batch = static_cast<long long>(d.batch);

#pragma omp parallel if (batch > 1)
  {
    std::vector<double> cols(K * P);
#pragma omp for schedule(static)
    for (long long b = 0; b < batch; ++b) {
      const std::size_t bi = static_cast<std::size_t>(b);
      im2col(input.data() + bi * d.in_ch * P, d, cols.data());
      ConstMatrixMap patches(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      MatrixMap y(out.data() + bi * d.out_ch * P, static_cast<Eigen::Index>(d.out_ch),
                  static_cast<Eigen::Index>(P));
      y.noalias() = w * patches;
      if (bias != nullptr) {
        for (std::size_t c = 0; c < d.out_ch; ++c) y.row(static_cast<Eigen::Index>(c)).array() += (*bias)[c];
      }
    }
  }
  return out;
}

void check_grad_out(const Tensor& grad_out, std::size_t batch, std::size_t out_ch, std::size_t h,
                    std::size_t w) {
  require_rank(grad_out, 4, "conv2d_vjp grad_out");
  if (grad_out.shape() != Shape{batch, out_ch, h, w}) {
    throw ShapeError("conv2d_vjp grad_out " + to_string(grad_out.shape()) + " inconsistent with forward");
  }
}

template <typename Fn>
Tensor map_elementwise(const Tensor& x, Fn fn) {
  Tensor out = Tensor::zeros_like(x);
  const double* in = x.data();
  double* o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = fn(in[i]);
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  return conv_forward(input, weight, &bias);
}

Tensor conv2d(const Tensor& input, const Tensor& weight) { return conv_forward(input, weight, nullptr); }

Tensor conv2d_vjp_input(const Tensor& weight, const Tensor& grad_out) {
  require_rank(weight, 4, "conv2d_vjp weight");
  require_rank(grad_out, 4, "conv2d_vjp grad_out");
  if (weight.dim(0) != grad_out.dim(1)) {
    throw ShapeError("conv2d_vjp grad_out " + to_string(grad_out.shape()) + " inconsistent with weight " +
                     to_string(weight.shape()));
  }
  const ConvDims d{grad_out.dim(0), weight.dim(1), weight.dim(0), grad_out.dim(2), grad_out.dim(3)};
  const std::size_t P = d.plane();
  const std::size_t K = d.in_ch * kTaps;
  Tensor grad_input({d.batch, d.in_ch, d.height, d.width});
  ConstMatrixMap w(weight.data(), static_cast<Eigen::Index>(d.out_ch), static_cast<Eigen::Index>(K));
  const long long batch = static_cast<long long>(d.batch);

#pragma omp parallel if (batch > 1)
  {
    std::vector<double> cols(K * P);
#pragma omp for schedule(static)
    for (long long b = 0; b < batch; ++b) {
      const std::size_t bi = static_cast<std::size_t>(b);
      ConstMatrixMap g(grad_out.data() + bi * d.out_ch * P, static_cast<Eigen::Index>(d.out_ch),
                       static_cast<Eigen::Index>(P));
      MatrixMap dcols(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      dcols.noalias() = w.transpose() * g;
      col2im(cols.data(), d, grad_input.data() + bi * d.in_ch * P);
    }
  }
  return grad_input;
}

ConvGrads conv2d_vjp_params(const Tensor& input, const Tensor& grad_out) {
  require_rank(input, 4, "conv2d_vjp input");
  require_rank(grad_out, 4, "conv2d_vjp grad_out");
  if (grad_out.dim(0) != input.dim(0) || grad_out.dim(2) != input.dim(2) || grad_out.dim(3) != input.dim(3)) {
    throw ShapeError("conv2d_vjp grad_out " + to_string(grad_out.shape()) + " inconsistent with input " +
                     to_string(input.shape()));
  }
  const ConvDims d{input.dim(0), input.dim(1), grad_out.dim(1), input.dim(2), input.dim(3)};
  const std::size_t P = d.plane();
  const std::size_t K = d.in_ch * kTaps;

  // Per-item partials, summed afterwards in batch order.
  std::vector<RowMatrix> partial(d.batch);
  const long long batch = static_cast<long long>(d.batch);
#pragma omp parallel if (batch > 1)
  {
    std::vector<double> cols(K * P);
#pragma omp for schedule(static)
    for (long long b = 0; b < batch; ++b) {
      const std::size_t bi = static_cast<std::size_t>(b);
      im2col(input.data() + bi * d.in_ch * P, d, cols.data());
      ConstMatrixMap patches(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
      ConstMatrixMap g(grad_out.data() + bi * d.out_ch * P, static_cast<Eigen::Index>(d.out_ch),
                       static_cast<Eigen::Index>(P));
      partial[bi].noalias() = g * patches.transpose();
    }
  }

  ConvGrads grads;
  grads.weight = Tensor({d.out_ch, d.in_ch, kKernel, kKernel});
  grads.bias = Tensor({d.out_ch});
  MatrixMap gw(grads.weight.data(), static_cast<Eigen::Index>(d.out_ch), static_cast<Eigen::Index>(K));
  for (const RowMatrix& p : partial) gw += p;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.out_ch; ++c) {
      const double* g = grad_out.data() + (b * d.out_ch + c) * P;
      double acc = 0.0;
      for (std::size_t i = 0; i < P; ++i) acc += g[i];
      grads.bias[c] += acc;
    }
  }
  return grads;
}

ConvGrads conv2d_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out) {
  const ConvDims d = check_conv(input, weight);
  check_grad_out(grad_out, d.batch, d.out_ch, d.height, d.width);
  ConvGrads grads = conv2d_vjp_params(input, grad_out);
  grads.input = conv2d_vjp_input(weight, grad_out);
  return grads;
}

Tensor relu(const Tensor& x) {
  return map_elementwise(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor tanh(const Tensor& x) {
  // Vectorised through Eigen's exp: tanh|v| = (1 - e) / (1 + e) with
  // e = exp(-2|v|), and an odd Taylor polynomial near zero where 1 - e
  // would cancel.
  Tensor out = Tensor::zeros_like(x);
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const Eigen::ArrayXd> v(x.data(), n);
  Eigen::Map<Eigen::ArrayXd> y(out.data(), n);
  const Eigen::ArrayXd a = v.abs();
  const Eigen::ArrayXd e = (-2.0 * a).exp();
  const Eigen::ArrayXd far = (1.0 - e) / (1.0 + e);
  const Eigen::ArrayXd a2 = a * a;
  const Eigen::ArrayXd near =
      a * (1.0 + a2 * (-1.0 / 3 + a2 * (2.0 / 15 + a2 * (-17.0 / 315 + a2 * (62.0 / 2835 +
          a2 * (-1382.0 / 155925 + a2 * (21844.0 / 6081075 + a2 * (-929569.0 / 638512875))))))));
  y = (a < 0.125).select(near, far) * v.sign();
  return out;
}

Tensor relu_vjp(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "relu_vjp");
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return out;
}

Tensor tanh_vjp(const Tensor& y, const Tensor& grad_out) {
  require_same_shape(y, grad_out, "tanh_vjp");
  Tensor out = Tensor::zeros_like(y);
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = grad_out[i] * (1.0 - y[i] * y[i]);
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels batch/spatial mismatch: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  const std::size_t B = a.dim(0), P = a.dim(2) * a.dim(3);
  const std::size_t ca = a.dim(1), cb = b.dim(1);
  Tensor out({B, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data() + n * ca * P, ca * P, out.data() + n * (ca + cb) * P);
    std::copy_n(b.data() + n * cb * P, cb * P, out.data() + (n * (ca + cb) + ca) * P);
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first_channels) {
  require_rank(t, 4, "split_channels");
  if (first_channels == 0 || first_channels >= t.dim(1)) {
    throw ShapeError("split_channels: cannot split " + to_string(t.shape()) + " at channel " +
                     std::to_string(first_channels));
  }
  const std::size_t B = t.dim(0), C = t.dim(1), P = t.dim(2) * t.dim(3);
  const std::size_t ca = first_channels, cb = C - first_channels;
  Tensor a({B, ca, t.dim(2), t.dim(3)});
  Tensor b({B, cb, t.dim(2), t.dim(3)});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(t.data() + n * C * P, ca * P, a.data() + n * ca * P);
    std::copy_n(t.data() + (n * C + ca) * P, cb * P, b.data() + n * cb * P);
  }
  return {std::move(a), std::move(b)};
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor out({B, C});
  for (std::size_t i = 0; i < B * C; ++i) {
    const double* p = x.data() + i * P;
    double acc = 0.0;
    for (std::size_t k = 0; k < P; ++k) acc += p[k];
    out[i] = acc / static_cast<double>(P);
  }
  return out;
}

Tensor global_avg_pool_vjp(const Tensor& grad_out, std::size_t height, std::size_t width) {
  require_rank(grad_out, 2, "global_avg_pool_vjp");
  const std::size_t B = grad_out.dim(0), C = grad_out.dim(1), P = height * width;
  Tensor out({B, C, height, width});
  for (std::size_t i = 0; i < B * C; ++i) {
    std::fill_n(out.data() + i * P, P, grad_out[i] / static_cast<double>(P));
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  if (weight.dim(1) != input.dim(1) || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear shape mismatch: input " + to_string(input.shape()) + ", weight " +
                     to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  const std::size_t B = input.dim(0), F = input.dim(1), G = weight.dim(0);
  Tensor out({B, G});
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t g = 0; g < G; ++g) {
      double acc = bias[g];
      for (std::size_t f = 0; f < F; ++f) acc += weight[g * F + f] * input[n * F + f];
      out[n * G + g] = acc;
    }
  }
  return out;
}

LinearGrads linear_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out) {
  require_rank(grad_out, 2, "linear_vjp grad_out");
  const std::size_t B = input.dim(0), F = input.dim(1), G = weight.dim(0);
  if (grad_out.shape() != Shape{B, G} || weight.dim(1) != F) {
    throw ShapeError("linear_vjp shape mismatch: grad_out " + to_string(grad_out.shape()));
  }
  LinearGrads grads{Tensor({B, F}), Tensor({G, F}), Tensor({G})};
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t g = 0; g < G; ++g) {
      const double go = grad_out[n * G + g];
      grads.bias[g] += go;
      for (std::size_t f = 0; f < F; ++f) {
        grads.weight[g * F + f] += go * input[n * F + f];
        grads.input[n * F + f] += go * weight[g * F + f];
      }
    }
  }
  return grads;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(B));
  }
  LossResult result{0.0, Tensor({B, K})};
  for (std::size_t n = 0; n < B; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " out of range");
    }
    const double* row = logits.data() + n * K;
    const double peak = *std::max_element(row, row + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(row[k] - peak);
    const double log_sum = std::log(sum);
    result.loss += -(row[label] - peak - log_sum);
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(row[k] - peak - log_sum);
      result.grad_logits[n * K + k] = (p - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0)) / static_cast<double>(B);
    }
  }
  result.loss /= static_cast<double>(B);
  return result;
}

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, SgdState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(grads.size()) + " grads");
  }
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.push_back(Tensor::zeros_like(*p));
  }
  if (state.velocity.size() != params.size()) throw ShapeError("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], grads[i], "sgd_step");
    require_same_shape(*params[i], state.velocity[i], "sgd_step velocity");
    Tensor& v = state.velocity[i];
    Tensor& p = *params[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = state.momentum * v[k] + grads[i][k];
      p[k] -= state.learning_rate * v[k];
    }
  }
}

}  // namespace deqnca::ops
