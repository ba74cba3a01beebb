#pragma once

// Equilibrium layer: forward fixed-point solve, implicit (adjoint) backward
// pass and the plain step-by-step rollout of the same map.

#include <functional>
#include <string_view>
#include <vector>

#include "deqnca/fixed_point.hpp"
#include "deqnca/tensor.hpp"

namespace deqnca::deq {

enum class BackwardMethod { kNeumann, kAdjointFixedPoint };

BackwardMethod parse_backward_method(std::string_view name);
std::string_view backward_method_name(BackwardMethod method);

struct BackwardConfig {
  BackwardMethod method = BackwardMethod::kAdjointFixedPoint;
  int max_iters = 40;
  double tol = 1e-4;
  /// The Neumann series counts as divergent once ||a|| exceeds this multiple of ||g||.
  double blowup_factor = 1e6;
};

/// Per-input state shared by the forward solve and the backward pass.
struct EquilibriumContext {
  /// Injected input features; constant for the whole solve.
  Tensor injected;
  /// Optional cache of the injected features' contribution to the update,
  /// filled by whoever builds the context. Empty means "recompute".
  Tensor injection_drive;
  fp::SolverConfig solver;
  BackwardConfig backward;
};

/// One application of an equilibrium map plus the VJPs the implicit backward needs.
class EquilibriumFunction {
 public:
  virtual ~EquilibriumFunction() = default;

  virtual Tensor apply(const Tensor& z, const EquilibriumContext& ctx) const = 0;
  virtual Tensor vjp_z(const Tensor& z, const EquilibriumContext& ctx, const Tensor& cotangent) const = 0;
  /// Gradients for the parameters owned by the map, in a fixed order.
  virtual std::vector<Tensor> vjp_params(const Tensor& z, const EquilibriumContext& ctx,
                                         const Tensor& cotangent) const = 0;
  virtual Tensor vjp_injection(const Tensor& z, const EquilibriumContext& ctx, const Tensor& cotangent) const = 0;

  /// a -> vjp_z(z, ctx, a) with z-dependent work done once. The default
  /// simply forwards to vjp_z.
  virtual std::function<Tensor(const Tensor&)> linearize(const Tensor& z, const EquilibriumContext& ctx) const;
};

fp::SolverResult deq_forward(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z0);

struct BackwardResult {
  std::vector<Tensor> grad_params;
  Tensor grad_injection;
  /// Solution of a = g + J_f(z*)^T a.
  Tensor adjoint;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

/// Implicit gradient through z* = f(z*). Throws fp::DivergenceError when the
/// adjoint iteration blows up.
BackwardResult deq_backward(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z_star,
                            const Tensor& grad_zstar);

struct RolloutResult {
  std::vector<double> residual_trace;
  /// z_0 .. z_steps, only populated when requested.
  std::vector<Tensor> states;
  Tensor final_state;
};

/// Undamped repeated application z_k = f(z_{k-1}) for exactly `steps` steps.
/// The observer sees every new state. A non-finite state raises
/// fp::DivergenceError carrying the residuals of the steps before the failure.
RolloutResult nca_rollout(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z0, int steps,
                          const fp::Observer& observer = {}, bool keep_states = false);

}  // namespace deqnca::deq
