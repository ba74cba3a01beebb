#include "deqnca/model.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "deqnca/ops.hpp"
#include "parallel.hpp"

namespace deqnca::model {

namespace {

constexpr std::size_t kTaps = ops::kKernel * ops::kKernel;

// Copies input channels [first, first + count) of a conv weight.
Tensor weight_channels(const Tensor& weight, std::size_t first, std::size_t count) {
  const std::size_t cout = weight.dim(0), cin = weight.dim(1);
  Tensor out({cout, count, ops::kKernel, ops::kKernel});
  for (std::size_t o = 0; o < cout; ++o) {
    std::copy_n(weight.data() + (o * cin + first) * kTaps, count * kTaps, out.data() + o * count * kTaps);
  }
  return out;
}

void fill_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

void check_input(const Tensor& x, const char* what) {
  require_rank(x, 4, what);
  if (x.dim(1) != 1) throw ShapeError(std::string(what) + ": expected one input channel, got " + to_string(x.shape()));
}

}  // namespace

std::array<Tensor*, ModelParams::kTensorCount> ModelParams::tensors() {
  return {&k1_weight, &k1_bias, &k2_weight, &k2_bias, &mlp1_weight, &mlp1_bias, &mlp2_weight, &mlp2_bias};
}

std::array<const Tensor*, ModelParams::kTensorCount> ModelParams::tensors() const {
  return {&k1_weight, &k1_bias, &k2_weight, &k2_bias, &mlp1_weight, &mlp1_bias, &mlp2_weight, &mlp2_bias};
}

ModelParams ModelParams::zeros(const Widths& w) {
  if (w.encoder == 0 || w.state == 0 || w.mlp == 0) throw ShapeError("model widths must be positive");
  ModelParams p;
  p.widths = w;
  p.k1_weight = Tensor({w.encoder, 1, ops::kKernel, ops::kKernel});
  p.k1_bias = Tensor({w.encoder});
  p.k2_weight = Tensor({w.state, w.encoder + w.state, ops::kKernel, ops::kKernel});
  p.k2_bias = Tensor({w.state});
  p.mlp1_weight = Tensor({w.mlp, w.state});
  p.mlp1_bias = Tensor({w.mlp});
  p.mlp2_weight = Tensor({kClasses, w.mlp});
  p.mlp2_bias = Tensor({kClasses});
  return p;
}

std::size_t param_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const Tensor* t : params.tensors()) n += t->size();
  return n;
}

ModelParams init_params(const Widths& widths, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(widths);
  std::mt19937_64 rng(seed);
  fill_uniform(p.k1_weight, 1.0 / std::sqrt(static_cast<double>(kTaps)), rng);
  fill_uniform(p.k2_weight, 0.1 / std::sqrt(static_cast<double>((widths.encoder + widths.state) * kTaps)), rng);
  fill_uniform(p.mlp1_weight, 1.0 / std::sqrt(static_cast<double>(widths.state)), rng);
  fill_uniform(p.mlp2_weight, 1.0 / std::sqrt(static_cast<double>(widths.mlp)), rng);
  return p;
}

Tensor encode(const ModelParams& params, const Tensor& x) {
  check_input(x, "encode");
  return ops::relu(ops::conv2d(x, params.k1_weight, params.k1_bias));
}

Tensor sample_initial_state(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                            std::uint64_t seed) {
  Tensor z({batch, channels, height, width});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : z.values()) v = dist(rng);
  return z;
}

EquilibriumMap::EquilibriumMap(const ModelParams& params)
    : inject_weight_(weight_channels(params.k2_weight, 0, params.widths.encoder)),
      state_weight_(weight_channels(params.k2_weight, params.widths.encoder, params.widths.state)),
      bias_(params.k2_bias) {}

Tensor EquilibriumMap::injection_drive(const Tensor& injected) const {
  return ops::conv2d(injected, inject_weight_, bias_);
}

deq::EquilibriumContext EquilibriumMap::make_context(Tensor injected, const fp::SolverConfig& solver,
                                                     const deq::BackwardConfig& backward) const {
  deq::EquilibriumContext ctx;
  ctx.injection_drive = injection_drive(injected);
  ctx.injected = std::move(injected);
  ctx.solver = solver;
  ctx.backward = backward;
  return ctx;
}

Tensor EquilibriumMap::activation(const Tensor& z, const deq::EquilibriumContext& ctx) const {
  if (z.rank() != 4 || z.dim(1) != state_weight_.dim(0)) {
    throw ShapeError("equilibrium state has shape " + to_string(z.shape()) + ", expected " +
                     std::to_string(state_weight_.dim(0)) + " channels");
  }
  Tensor pre = ops::conv2d(z, state_weight_);
  pre += ctx.injection_drive.empty() ? injection_drive(ctx.injected) : ctx.injection_drive;
  return ops::tanh(pre);
}

Tensor EquilibriumMap::apply(const Tensor& z, const deq::EquilibriumContext& ctx) const {
  Tensor out = activation(z, ctx);
  out += z;
  return out;
}

Tensor EquilibriumMap::vjp_z(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& cotangent) const {
  return linearize(z, ctx)(cotangent);
}

std::function<Tensor(const Tensor&)> EquilibriumMap::linearize(const Tensor& z,
                                                               const deq::EquilibriumContext& ctx) const {
  Tensor slope = activation(z, ctx);
  for (double& v : slope.values()) v = 1.0 - v * v;
  return [this, slope = std::move(slope)](const Tensor& a) {
    require_same_shape(slope, a, "vjp_z");
    Tensor scaled = a;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= slope[i];
    Tensor out = ops::conv2d_vjp_input(state_weight_, scaled);
    out += a;  // residual branch
    return out;
  };
}

std::vector<Tensor> EquilibriumMap::vjp_params(const Tensor& z, const deq::EquilibriumContext& ctx,
                                               const Tensor& cotangent) const {
  const Tensor grad_pre = ops::tanh_vjp(activation(z, ctx), cotangent);
  ops::ConvGrads g = ops::conv2d_vjp_params(ops::concat_channels(ctx.injected, z), grad_pre);
  std::vector<Tensor> out;
  out.push_back(std::move(g.weight));
  out.push_back(std::move(g.bias));
  return out;
}

Tensor EquilibriumMap::vjp_injection(const Tensor& z, const deq::EquilibriumContext& ctx,
                                     const Tensor& cotangent) const {
  const Tensor grad_pre = ops::tanh_vjp(activation(z, ctx), cotangent);
  return ops::conv2d_vjp_input(inject_weight_, grad_pre);
}

Tensor readout(const ModelParams& params, const Tensor& z_star) {
  const Tensor pooled = ops::global_avg_pool(z_star);
  const Tensor hidden = ops::relu(ops::linear(pooled, params.mlp1_weight, params.mlp1_bias));
  return ops::linear(hidden, params.mlp2_weight, params.mlp2_bias);
}

Tensor decode_local(const ModelParams& params, const Tensor& z_star) {
  require_rank(z_star, 4, "decode_local");
  const std::size_t B = z_star.dim(0), C = z_star.dim(1), H = z_star.dim(2), W = z_star.dim(3);
  const std::size_t P = H * W;
  // Gather pixels as rows, apply the MLP, scatter back to channel planes.
  Tensor pixels({B * P, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) pixels[(b * P + p) * C + c] = z_star[(b * C + c) * P + p];
  const Tensor hidden = ops::relu(ops::linear(pixels, params.mlp1_weight, params.mlp1_bias));
  const Tensor logits = ops::linear(hidden, params.mlp2_weight, params.mlp2_bias);
  Tensor out({B, kClasses, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < kClasses; ++k)
      for (std::size_t p = 0; p < P; ++p) out[(b * kClasses + k) * P + p] = logits[(b * P + p) * kClasses + k];
  return out;
}

ForwardResult forward(const ModelParams& params, const Tensor& x, const fp::SolverConfig& solver,
                      std::uint64_t seed) {
  check_input(x, "forward");
  return forward(params, x, solver, sample_initial_state(x.dim(0), params.widths.state, x.dim(2), x.dim(3), seed));
}

ForwardResult forward(const ModelParams& params, const Tensor& x, const fp::SolverConfig& solver,
                      const Tensor& z0) {
  check_input(x, "forward");
  if (z0.shape() != Shape{x.dim(0), params.widths.state, x.dim(2), x.dim(3)}) {
    throw ShapeError("forward: initial state " + to_string(z0.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  const EquilibriumMap map(params);
  const Tensor injected = encode(params, x);

  ForwardResult result;
  result.solves.resize(batch);
  std::vector<Tensor> states(batch);
  detail::parallel_for(batch, [&](std::size_t b) {
    const deq::EquilibriumContext ctx = map.make_context(injected.slice_batch(b, 1), solver);
    result.solves[b] = deq::deq_forward(map, ctx, z0.slice_batch(b, 1));
    states[b] = result.solves[b].z_star;
  });
  result.z_star = concat_batch(states);
  result.logits = readout(params, result.z_star);
  return result;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "argmax_rows");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t n = 0; n < B; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[n * K + k] > logits[n * K + best]) best = k;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

TrainStep loss_and_gradients(const ModelParams& params, const Tensor& x, std::span<const int> labels,
                             const TrainOptions& options, const Tensor& z0) {
  check_input(x, "loss_and_gradients");
  const std::size_t batch = x.dim(0), H = x.dim(2), W = x.dim(3);
  if (z0.shape() != Shape{batch, params.widths.state, H, W}) {
    throw ShapeError("loss_and_gradients: initial state " + to_string(z0.shape()) + " does not match input");
  }
  const EquilibriumMap map(params);
  const Tensor enc_pre = ops::conv2d(x, params.k1_weight, params.k1_bias);
  const Tensor injected = ops::relu(enc_pre);

  TrainStep step;
  step.solves.resize(batch);
  std::vector<deq::EquilibriumContext> contexts(batch);
  std::vector<Tensor> states(batch);
  detail::parallel_for(batch, [&](std::size_t b) {
    contexts[b] = map.make_context(injected.slice_batch(b, 1), options.solver, options.backward);
    step.solves[b] = deq::deq_forward(map, contexts[b], z0.slice_batch(b, 1));
    states[b] = step.solves[b].z_star;
  });
  const Tensor z_star = concat_batch(states);

  // Readout forward and backward.
  const Tensor pooled = ops::global_avg_pool(z_star);
  const Tensor h1 = ops::linear(pooled, params.mlp1_weight, params.mlp1_bias);
  const Tensor a1 = ops::relu(h1);
  const Tensor logits = ops::linear(a1, params.mlp2_weight, params.mlp2_bias);
  ops::LossResult loss = ops::softmax_cross_entropy(logits, labels);
  step.loss = loss.loss;

  ops::LinearGrads g2 = ops::linear_vjp(a1, params.mlp2_weight, loss.grad_logits);
  ops::LinearGrads g1 = ops::linear_vjp(pooled, params.mlp1_weight, ops::relu_vjp(h1, g2.input));
  const Tensor grad_z = ops::global_avg_pool_vjp(g1.input, H, W);

  // Implicit backward per item.
  std::vector<deq::BackwardResult> backs(batch);
  std::vector<ops::ConvGrads> encoder_grads(batch);
  std::vector<char> fell_back(batch, 0);
  detail::parallel_for(batch, [&](std::size_t b) {
    const Tensor g = grad_z.slice_batch(b, 1);
    try {
      backs[b] = deq::deq_backward(map, contexts[b], states[b], g);
    } catch (const fp::DivergenceError&) {
      deq::EquilibriumContext truncated = contexts[b];
      truncated.backward.method = deq::BackwardMethod::kNeumann;
      truncated.backward.max_iters = options.fallback_terms;
      truncated.backward.tol = 0.0;
      truncated.backward.blowup_factor = std::numeric_limits<double>::infinity();
      backs[b] = deq::deq_backward(map, truncated, states[b], g);
      fell_back[b] = 1;
    }
    const Tensor grad_enc = ops::relu_vjp(enc_pre.slice_batch(b, 1), backs[b].grad_injection);
    encoder_grads[b] = ops::conv2d_vjp_params(x.slice_batch(b, 1), grad_enc);
  });

  step.grads = ModelParams::zeros(params.widths);
  for (std::size_t b = 0; b < batch; ++b) {
    step.grads.k2_weight += backs[b].grad_params[0];
    step.grads.k2_bias += backs[b].grad_params[1];
    step.grads.k1_weight += encoder_grads[b].weight;
    step.grads.k1_bias += encoder_grads[b].bias;
    if (!step.solves[b].converged) ++step.unconverged_forward;
    if (!backs[b].converged) ++step.unconverged_backward;
    step.backward_fallbacks += fell_back[b];
  }
  step.grads.mlp1_weight = std::move(g1.weight);
  step.grads.mlp1_bias = std::move(g1.bias);
  step.grads.mlp2_weight = std::move(g2.weight);
  step.grads.mlp2_bias = std::move(g2.bias);
  return step;
}

}  // namespace deqnca::model
