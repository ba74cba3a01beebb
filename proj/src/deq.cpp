#include "deqnca/deq.hpp"

#include <stdexcept>
#include <string>

namespace deqnca::deq {

BackwardMethod parse_backward_method(std::string_view name) {
  if (name == "neumann") return BackwardMethod::kNeumann;
  if (name == "adjoint_fixed_point" || name == "adjoint-fixed-point") return BackwardMethod::kAdjointFixedPoint;
  throw std::invalid_argument("unknown backward method '" + std::string(name) + "'");
}

std::string_view backward_method_name(BackwardMethod method) {
  return method == BackwardMethod::kNeumann ? "neumann" : "adjoint_fixed_point";
}

std::function<Tensor(const Tensor&)> EquilibriumFunction::linearize(const Tensor& z,
                                                                    const EquilibriumContext& ctx) const {
  return [this, z, &ctx](const Tensor& a) { return vjp_z(z, ctx, a); };
}

fp::SolverResult deq_forward(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z0) {
  return fp::solve([&](const Tensor& z) { return f.apply(z, ctx); }, z0, ctx.solver);
}

BackwardResult deq_backward(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z_star,
                            const Tensor& grad_zstar) {
  require_same_shape(z_star, grad_zstar, "deq_backward");
  const BackwardConfig& cfg = ctx.backward;
  if (cfg.max_iters < 0) throw std::invalid_argument("backward max_iters must be >= 0");
  const auto jt = f.linearize(z_star, ctx);
  BackwardResult result;

  if (cfg.method == BackwardMethod::kNeumann) {
    // a_{k+1} = g + J^T a_k, starting from a_0 = g.
    const double g_norm = norm(grad_zstar);
    Tensor a = grad_zstar;
    for (int k = 0; k < cfg.max_iters; ++k) {
      Tensor next = jt(a);
      next += grad_zstar;
      const double incr = fp::relative_residual(a, next);
      result.trace.push_back(incr);
      result.iterations = k + 1;
      if (!next.all_finite() || norm(next) > cfg.blowup_factor * (g_norm + fp::kResidualEps)) {
        throw fp::DivergenceError("adjoint Neumann series diverged at term " + std::to_string(k + 1),
                                  result.trace);
      }
      a = std::move(next);
      if (incr < cfg.tol) break;
    }
    result.converged = result.trace.empty() ? g_norm == 0.0 : result.trace.back() <= cfg.tol;
    result.adjoint = std::move(a);
  } else {
    fp::SolverConfig solver;
    solver.method = fp::Method::kAnderson;
    solver.max_iters = std::max(cfg.max_iters, 1);
    solver.tol = cfg.tol;
    solver.anderson_memory = ctx.solver.anderson_memory;
    fp::SolverResult adj = fp::solve_anderson(
        [&](const Tensor& a) {
          Tensor next = jt(a);
          next += grad_zstar;
          return next;
        },
        grad_zstar, solver);
    result.trace = std::move(adj.residual_trace);
    result.iterations = adj.iterations;
    result.converged = adj.converged;
    result.adjoint = std::move(adj.z_star);
  }

  result.grad_params = f.vjp_params(z_star, ctx, result.adjoint);
  result.grad_injection = f.vjp_injection(z_star, ctx, result.adjoint);
  return result;
}

RolloutResult nca_rollout(const EquilibriumFunction& f, const EquilibriumContext& ctx, const Tensor& z0, int steps,
                          const fp::Observer& observer, bool keep_states) {
  if (steps < 1) throw std::invalid_argument("rollout needs at least one step");
  fp::SolverConfig cfg;
  cfg.method = fp::Method::kPicard;
  cfg.picard_damping = 1.0;
  cfg.tol = 0.0;
  cfg.max_iters = steps;

  RolloutResult rollout;
  if (keep_states) rollout.states.push_back(z0);
  Tensor last = z0;
  fp::SolverResult solved = fp::solve_picard(
      [&](const Tensor& z) { return f.apply(z, ctx); }, z0, cfg,
      [&](int step, const Tensor& z, double residual) {
        if (keep_states) rollout.states.push_back(z);
        last = z;
        if (observer) observer(step, z, residual);
      });
  rollout.residual_trace = std::move(solved.residual_trace);
  rollout.final_state = std::move(last);
  return rollout;
}

}  // namespace deqnca::deq
