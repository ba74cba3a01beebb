#include "deqnca/fixed_point.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <deque>

namespace deqnca::fp {

namespace {

using Vec = Eigen::Map<Eigen::VectorXd>;

Vec view(Tensor& t) { return {t.data(), static_cast<Eigen::Index>(t.size())}; }

Tensor apply_checked(const Map& f, const Tensor& z) {
  Tensor fz = f(z);
  require_same_shape(z, fz, "fixed-point map");
  return fz;
}

// Shared bookkeeping for the three solvers.
class Tracker {
 public:
  Tracker(const SolverConfig& cfg, const Observer& observer) : cfg_(cfg), observer_(observer) {}

  // Registers the residual of `measured`; `next` is the iterate handed to the observer.
  void record(const Tensor& measured, double residual, const Tensor& next) {
    if (!std::isfinite(residual) || !next.all_finite()) {
      throw DivergenceError("fixed-point solve diverged at iteration " + std::to_string(result_.iterations + 1),
                            result_.residual_trace);
    }
    result_.residual_trace.push_back(residual);
    result_.iterations = static_cast<int>(result_.residual_trace.size());
    consider(measured, residual);
    if (observer_) observer_(result_.iterations, next, residual);
  }

  void consider(const Tensor& z, double residual) {
    if (result_.z_star.empty() || residual < result_.residual) {
      result_.z_star = z;
      result_.residual = residual;
    }
  }

  bool done() const { return !result_.residual_trace.empty() && result_.residual_trace.back() < cfg_.tol; }

  SolverResult finish() {
    result_.converged = !result_.residual_trace.empty() && result_.residual_trace.back() <= cfg_.tol;
    return std::move(result_);
  }

 private:
  const SolverConfig& cfg_;
  const Observer& observer_;
  SolverResult result_;
};

}  // namespace

Method parse_method(std::string_view name) {
  if (name == "picard") return Method::kPicard;
  if (name == "anderson") return Method::kAnderson;
  if (name == "broyden") return Method::kBroyden;
  throw std::invalid_argument("unknown solver method '" + std::string(name) + "'");
}

std::string_view method_name(Method method) {
  switch (method) {
    case Method::kPicard: return "picard";
    case Method::kAnderson: return "anderson";
    case Method::kBroyden: return "broyden";
  }
  return "unknown";
}

void SolverConfig::validate() const {
  if (max_iters < 1) throw std::invalid_argument("solver max_iters must be >= 1");
  if (!(tol >= 0.0)) throw std::invalid_argument("solver tol must be non-negative");
  if (!(picard_damping > 0.0 && picard_damping <= 1.0)) {
    throw std::invalid_argument("picard damping must lie in (0, 1]");
  }
  if (anderson_memory < 1 || broyden_memory < 1) throw std::invalid_argument("solver memory must be >= 1");
}

double relative_residual(const Tensor& z, const Tensor& fz) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = fz[i] - z[i];
    diff += d * d;
    scale += fz[i] * fz[i];
  }
  return std::sqrt(diff) / (std::sqrt(scale) + kResidualEps);
}

SolverResult solve_picard(const Map& f, const Tensor& z0, const SolverConfig& cfg, const Observer& observer) {
  cfg.validate();
  Tracker tracker(cfg, observer);
  const double beta = cfg.picard_damping;
  Tensor z = z0;
  for (int k = 0; k < cfg.max_iters; ++k) {
    Tensor fz = apply_checked(f, z);
    const double r = relative_residual(z, fz);
    Tensor next;
    if (beta == 1.0) {
      next = std::move(fz);
    } else {
      next = Tensor::zeros_like(z);
      for (std::size_t i = 0; i < z.size(); ++i) next[i] = (1.0 - beta) * z[i] + beta * fz[i];
    }
    tracker.record(z, r, next);
    if (tracker.done()) break;
    z = std::move(next);
  }
  return tracker.finish();
}

SolverResult solve_anderson(const Map& f, const Tensor& z0, const SolverConfig& cfg, const Observer& observer) {
  cfg.validate();
  Tracker tracker(cfg, observer);
  const double beta = cfg.anderson_mixing;
  const auto memory = static_cast<std::size_t>(cfg.anderson_memory);
  std::deque<Tensor> xs, fs;
  Tensor z = z0;

  for (int k = 0; k < cfg.max_iters; ++k) {
    Tensor fz = apply_checked(f, z);
    const double r = relative_residual(z, fz);
    xs.push_back(z);
    fs.push_back(fz);
    if (xs.size() > memory) {
      xs.pop_front();
      fs.pop_front();
    }
    const auto n = static_cast<Eigen::Index>(xs.size());

    // Mixing weights alpha minimise ||sum_i alpha_i (f_i - x_i)|| with sum alpha = 1.
    Eigen::VectorXd alpha;
    if (n > 1) {
      Eigen::MatrixXd g(static_cast<Eigen::Index>(z.size()), n);
      for (Eigen::Index j = 0; j < n; ++j) g.col(j) = view(fs[static_cast<std::size_t>(j)]) - view(xs[static_cast<std::size_t>(j)]);
      Eigen::MatrixXd gram = g.transpose() * g;
      const double scale = gram.trace() / static_cast<double>(n);
      gram.diagonal().array() += 1e-10 * (scale > 0.0 ? scale : 1.0);
      Eigen::VectorXd w = gram.colPivHouseholderQr().solve(Eigen::VectorXd::Ones(n));
      const double total = w.sum();
      if (w.allFinite() && std::abs(total) > 1e-300) {
        alpha = w / total;
        if (!alpha.allFinite()) alpha.resize(0);
      }
    }

    Tensor next = Tensor::zeros_like(z);
    Vec out = view(next);
    if (alpha.size() == n && n > 1) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(j);
        out += alpha[j] * (beta * view(fs[idx]) + (1.0 - beta) * view(xs[idx]));
      }
    } else {
      // Degenerate least squares: damped Picard step.
      out = beta * view(fz) + (1.0 - beta) * view(z);
    }
    tracker.record(z, r, next);
    if (tracker.done()) break;
    z = std::move(next);
  }
  return tracker.finish();
}

SolverResult solve_broyden(const Map& f, const Tensor& z0, const SolverConfig& cfg, const Observer& observer) {
  cfg.validate();
  Tracker tracker(cfg, observer);
  const auto memory = static_cast<std::size_t>(cfg.broyden_memory);
  Tensor z = z0;
  Tensor fz = apply_checked(f, z);
  tracker.consider(z, relative_residual(z, fz));
  Eigen::VectorXd g = view(fz) - view(z);

  // Inverse Jacobian estimate H = -I + sum_i u_i v_i^T.
  std::deque<Eigen::VectorXd> us, vs;
  auto apply_h = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd out = -x;
    for (std::size_t i = 0; i < us.size(); ++i) out += us[i] * vs[i].dot(x);
    return out;
  };
  auto apply_ht = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd out = -x;
    for (std::size_t i = 0; i < us.size(); ++i) out += vs[i] * us[i].dot(x);
    return out;
  };

  for (int k = 0; k < cfg.max_iters; ++k) {
    Eigen::VectorXd step = -apply_h(g);
    const double limit = 2.0 * std::max(view(z).norm(), 1.0);
    const double step_norm = step.norm();
    if (step_norm > limit) step *= limit / step_norm;

    Tensor z_next = z;
    view(z_next) += step;
    Tensor f_next = apply_checked(f, z_next);
    const double r = relative_residual(z_next, f_next);
    tracker.record(z_next, r, z_next);
    if (tracker.done()) break;

    Eigen::VectorXd g_next = view(f_next) - view(z_next);
    const Eigen::VectorXd dg = g_next - g;
    const Eigen::VectorXd h_dg = apply_h(dg);
    const double denom = step.dot(h_dg);
    if (std::abs(denom) > 1e-30 * std::max(1.0, step.squaredNorm())) {
      Eigen::VectorXd v = apply_ht(step);
      us.push_back((step - h_dg) / denom);
      vs.push_back(std::move(v));
      if (us.size() > memory) {
        us.pop_front();
        vs.pop_front();
      }
    }
    z = std::move(z_next);
    g = std::move(g_next);
  }
  return tracker.finish();
}

SolverResult solve(const Map& f, const Tensor& z0, const SolverConfig& cfg, const Observer& observer) {
  switch (cfg.method) {
    case Method::kPicard: return solve_picard(f, z0, cfg, observer);
    case Method::kAnderson: return solve_anderson(f, z0, cfg, observer);
    case Method::kBroyden: return solve_broyden(f, z0, cfg, observer);
  }
  throw std::invalid_argument("unknown solver method");
}

std::string format_residual_csv(const std::vector<double>& trace) {
  std::string out = "iter,residual\n";
  char line[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g\n", i + 1, trace[i]);
    out += line;
  }
  return out;
}

}  // namespace deqnca::fp
