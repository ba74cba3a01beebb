#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "deqnca/tensor.hpp"

namespace deqnca::fp {

enum class Method { kPicard, kAnderson, kBroyden };

Method parse_method(std::string_view name);
std::string_view method_name(Method method);

struct SolverConfig {
  Method method = Method::kBroyden;
  int max_iters = 40;
  /// Relative-residual threshold. A value of 0 disables early stopping.
  double tol = 1e-3;
  double picard_damping = 1.0;
  int anderson_memory = 5;
  double anderson_mixing = 1.0;
  int broyden_memory = 20;

  void validate() const;
};

/// Residual of iterate z is ||f(z) - z|| / (||f(z)|| + kResidualEps).
inline constexpr double kResidualEps = 1e-8;

struct SolverResult {
  /// Iterate with the smallest residual seen during the solve.
  Tensor z_star;
  /// Residual of z_star.
  double residual = 0.0;
  std::vector<double> residual_trace;
  int iterations = 0;
  bool converged = false;
};

/// Raised when an iterate stops being finite; carries the trace up to that point.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

using Map = std::function<Tensor(const Tensor&)>;

/// Called after every iteration with the 1-based iteration index, the new
/// iterate and the residual measured during that iteration. Must not retain z.
using Observer = std::function<void(int iteration, const Tensor& z, double residual)>;

double relative_residual(const Tensor& z, const Tensor& fz);

/// Damped fixed-point iteration z <- (1 - b) z + b f(z).
/// Iteration k evaluates f at z_{k-1} and records that iterate's residual.
SolverResult solve_picard(const Map& f, const Tensor& z0, const SolverConfig& cfg,
                          const Observer& observer = {});

/// Anderson acceleration with a sliding window of cfg.anderson_memory iterates.
SolverResult solve_anderson(const Map& f, const Tensor& z0, const SolverConfig& cfg,
                            const Observer& observer = {});

/// Limited-memory "good" Broyden on g(z) = f(z) - z, inverse Jacobian seeded
/// with -I. Iteration k takes one quasi-Newton step and records the residual
/// of the new iterate.
SolverResult solve_broyden(const Map& f, const Tensor& z0, const SolverConfig& cfg,
                           const Observer& observer = {});

/// Dispatches on cfg.method.
SolverResult solve(const Map& f, const Tensor& z0, const SolverConfig& cfg, const Observer& observer = {});

/// "iter,residual" header followed by one 1-based row per entry, 17 significant digits.
std::string format_residual_csv(const std::vector<double>& trace);

}  // namespace deqnca::fp
