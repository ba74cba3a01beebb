#include "deqnca/reference.hpp"

namespace deqnca::reference {

namespace {

// Input value at (b, c, h + dh, w + dw) with zero padding outside the image.
double padded(const Tensor& x, std::size_t b, std::size_t c, std::ptrdiff_t h, std::ptrdiff_t w) {
  if (h < 0 || w < 0 || h >= static_cast<std::ptrdiff_t>(x.dim(2)) ||
      w >= static_cast<std::ptrdiff_t>(x.dim(3))) {
    return 0.0;
  }
  return x.at(b, c, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank(input, 4, "reference conv2d input");
  require_rank(weight, 4, "reference conv2d weight");
  if (weight.dim(1) != input.dim(1) || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("reference conv2d shape mismatch");
  }
  const std::size_t B = input.dim(0), Cin = input.dim(1), Cout = weight.dim(0);
  const std::size_t H = input.dim(2), W = input.dim(3);
  Tensor out({B, Cout, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          double acc = bias[co];
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t kh = 0; kh < 3; ++kh)
              for (std::size_t kw = 0; kw < 3; ++kw) {
                const auto sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
                const auto sw = static_cast<std::ptrdiff_t>(w + kw) - 1;
                acc += weight.at(co, ci, kh, kw) * padded(input, b, ci, sh, sw);
              }
          out.at(b, co, h, w) = acc;
        }
  return out;
}

ops::ConvGrads conv2d_vjp(const Tensor& input, const Tensor& weight, const Tensor& grad_out) {
  const std::size_t B = input.dim(0), Cin = input.dim(1), Cout = weight.dim(0);
  const std::size_t H = input.dim(2), W = input.dim(3);
  if (grad_out.shape() != Shape{B, Cout, H, W}) throw ShapeError("reference conv2d_vjp shape mismatch");
  ops::ConvGrads g{Tensor::zeros_like(input), Tensor::zeros_like(weight), Tensor({Cout})};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double go = grad_out.at(b, co, h, w);
          g.bias[co] += go;
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t kh = 0; kh < 3; ++kh)
              for (std::size_t kw = 0; kw < 3; ++kw) {
                const auto sh = static_cast<std::ptrdiff_t>(h + kh) - 1;
                const auto sw = static_cast<std::ptrdiff_t>(w + kw) - 1;
                if (sh < 0 || sw < 0 || sh >= static_cast<std::ptrdiff_t>(H) ||
                    sw >= static_cast<std::ptrdiff_t>(W)) {
                  continue;
                }
                const auto uh = static_cast<std::size_t>(sh), uw = static_cast<std::size_t>(sw);
                g.weight.at(co, ci, kh, kw) += go * input.at(b, ci, uh, uw);
                g.input.at(b, ci, uh, uw) += go * weight.at(co, ci, kh, kw);
              }
        }
  return g;
}

}  // namespace deqnca::reference
