#pragma once

// The equilibrium classifier:
//   u  = ReLU(K1 * x)                           (encoder, computed once)
//   z* = z* + tanh(K2 * concat(u, z*) + b2)     (equilibrium layer)
//   y  = MLP(AvgPool(z*))                       (readout)

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "deqnca/deq.hpp"
#include "deqnca/fixed_point.hpp"
#include "deqnca/tensor.hpp"

namespace deqnca::model {

inline constexpr std::size_t kClasses = 10;

struct Widths {
  std::size_t encoder = 8;  // channels of u
  std::size_t state = 32;   // channels of z
  std::size_t mlp = 64;     // hidden units of the readout MLP

  friend bool operator==(const Widths&, const Widths&) = default;
};

struct ModelParams {
  Widths widths;
  Tensor k1_weight;    // [Ce,1,3,3]
  Tensor k1_bias;      // [Ce]
  Tensor k2_weight;    // [Cz,Ce+Cz,3,3]
  Tensor k2_bias;      // [Cz]
  Tensor mlp1_weight;  // [Hm,Cz]
  Tensor mlp1_bias;    // [Hm]
  Tensor mlp2_weight;  // [10,Hm]
  Tensor mlp2_bias;    // [10]

  static constexpr std::size_t kTensorCount = 8;

  /// All tensors in checkpoint order.
  std::array<Tensor*, kTensorCount> tensors();
  std::array<const Tensor*, kTensorCount> tensors() const;

  /// Zero tensors with the shapes `widths` implies.
  static ModelParams zeros(const Widths& widths);

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

std::size_t param_count(const ModelParams& params);

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), K2 further scaled by 0.1, zero biases.
ModelParams init_params(const Widths& widths, std::uint64_t seed);

/// ReLU(K1 * x): [B,1,H,W] -> [B,Ce,H,W].
Tensor encode(const ModelParams& params, const Tensor& x);

/// N(0, 1) initial hidden state for a batch, drawn item by item from one stream.
Tensor sample_initial_state(std::size_t batch, std::size_t channels, std::size_t height, std::size_t width,
                            std::uint64_t seed);

/// The update map z -> z + tanh(K2 * concat(u, z) + b2) for a fixed parameter set.
class EquilibriumMap final : public deq::EquilibriumFunction {
 public:
  explicit EquilibriumMap(const ModelParams& params);

  /// Contribution of the injected features: K2[:, :Ce] * u + b2.
  Tensor injection_drive(const Tensor& injected) const;

  /// Context with the injection drive precomputed.
  deq::EquilibriumContext make_context(Tensor injected, const fp::SolverConfig& solver,
                                       const deq::BackwardConfig& backward = {}) const;

  Tensor apply(const Tensor& z, const deq::EquilibriumContext& ctx) const override;
  Tensor vjp_z(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& cotangent) const override;
  /// {dK2, db2}.
  std::vector<Tensor> vjp_params(const Tensor& z, const deq::EquilibriumContext& ctx,
                                 const Tensor& cotangent) const override;
  Tensor vjp_injection(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& cotangent) const override;
  std::function<Tensor(const Tensor&)> linearize(const Tensor& z, const deq::EquilibriumContext& ctx) const override;

 private:
  Tensor activation(const Tensor& z, const deq::EquilibriumContext& ctx) const;

  Tensor inject_weight_;  // K2[:, :Ce]
  Tensor state_weight_;   // K2[:, Ce:]
  Tensor bias_;
};

/// AvgPool + MLP on a batch of equilibrium states: [B,Cz,H,W] -> [B,10].
Tensor readout(const ModelParams& params, const Tensor& z_star);

/// The readout MLP applied at every pixel: [B,Cz,H,W] -> [B,10,H,W].
Tensor decode_local(const ModelParams& params, const Tensor& z_star);

struct ForwardResult {
  Tensor logits;
  Tensor z_star;
  /// One solve per batch item.
  std::vector<fp::SolverResult> solves;
};

/// Works for any spatial size; nothing is flattened across space.
ForwardResult forward(const ModelParams& params, const Tensor& x, const fp::SolverConfig& solver,
                      std::uint64_t seed);
ForwardResult forward(const ModelParams& params, const Tensor& x, const fp::SolverConfig& solver,
                      const Tensor& z0);

/// Index of the largest logit per row, ties to the lowest class.
std::vector<int> argmax_rows(const Tensor& logits);

struct TrainStep {
  double loss = 0.0;
  ModelParams grads;
  std::vector<fp::SolverResult> solves;
  int unconverged_forward = 0;
  int unconverged_backward = 0;
  /// Items whose adjoint diverged and fell back to a truncated Neumann gradient.
  int backward_fallbacks = 0;
};

struct TrainOptions {
  fp::SolverConfig solver;
  deq::BackwardConfig backward;
  /// Neumann terms used when the exact adjoint diverges.
  int fallback_terms = 2;
};

/// Mean cross-entropy over the batch and its implicit gradient w.r.t. every parameter.
TrainStep loss_and_gradients(const ModelParams& params, const Tensor& x, std::span<const int> labels,
                             const TrainOptions& options, const Tensor& z0);

}  // namespace deqnca::model
