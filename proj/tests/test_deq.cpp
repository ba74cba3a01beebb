#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "deqnca/deq.hpp"
#include "support.hpp"

using namespace deqnca;
using deqnca::testing::max_rel_error;
using deqnca::testing::numeric_gradient;
using deqnca::testing::random_tensor;

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Vec as_vec(const Tensor& t) { return Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(t.size())); }
Tensor as_tensor(const Vec& v) { return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size())); }

// Dense test map on flat vectors:
//   affine:     f(z) = W z + V u + c
//   residual:   f(z) = z + tanh(W z + V u + c)
class DenseMap final : public deq::EquilibriumFunction {
 public:
  DenseMap(Mat w, Mat v, Vec c, bool residual) : w_(std::move(w)), v_(std::move(v)), c_(std::move(c)), residual_(residual) {}

  Tensor apply(const Tensor& z, const deq::EquilibriumContext& ctx) const override {
    const Vec pre = w_ * as_vec(z) + v_ * as_vec(ctx.injected) + c_;
    return as_tensor(residual_ ? Vec(as_vec(z) + pre.array().tanh().matrix()) : pre);
  }
  Tensor vjp_z(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& g) const override {
    const Vec s = inner(z, ctx, g);
    return as_tensor(residual_ ? Vec(as_vec(g) + w_.transpose() * s) : Vec(w_.transpose() * s));
  }
  std::vector<Tensor> vjp_params(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& g) const override {
    return {as_tensor(inner(z, ctx, g))};
  }
  Tensor vjp_injection(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& g) const override {
    return as_tensor(v_.transpose() * inner(z, ctx, g));
  }

  // Jacobian of f with respect to z.
  Mat jacobian(const Tensor& z, const Tensor& u) const {
    if (!residual_) return w_;
    const Vec y = (w_ * as_vec(z) + v_ * as_vec(u) + c_).array().tanh();
    return Mat::Identity(w_.rows(), w_.cols()) + (1.0 - y.array().square()).matrix().asDiagonal() * w_;
  }

  Vec c_;

 private:
  // Cotangent pulled back through the activation.
  Vec inner(const Tensor& z, const deq::EquilibriumContext& ctx, const Tensor& g) const {
    if (!residual_) return as_vec(g);
    const Vec y = (w_ * as_vec(z) + v_ * as_vec(ctx.injected) + c_).array().tanh();
    return (1.0 - y.array().square()).matrix().cwiseProduct(as_vec(g));
  }

  Mat w_, v_;
  bool residual_;
};

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  return m;
}

// Residual map whose Jacobian I + D W stays a contraction: W = -I + small noise.
DenseMap contractive_residual_map(Eigen::Index n, Eigen::Index m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Mat w = -Mat::Identity(n, n) + random_matrix(n, n, rng, 0.3 / std::sqrt(static_cast<double>(n)));
  return DenseMap(std::move(w), random_matrix(n, m, rng, 1.0), random_matrix(n, 1, rng, 0.5), true);
}

deq::EquilibriumContext context(Tensor injected, double fwd_tol, deq::BackwardMethod method, double bwd_tol) {
  deq::EquilibriumContext ctx;
  ctx.injected = std::move(injected);
  ctx.solver.method = fp::Method::kBroyden;
  ctx.solver.tol = fwd_tol;
  ctx.solver.max_iters = 500;
  ctx.backward.method = method;
  ctx.backward.tol = bwd_tol;
  ctx.backward.max_iters = 500;
  return ctx;
}

}  // namespace

TEST(BackwardConfig, Defaults) {
  const deq::BackwardConfig cfg;
  EXPECT_EQ(cfg.method, deq::BackwardMethod::kAdjointFixedPoint);
  EXPECT_EQ(deq::parse_backward_method("neumann"), deq::BackwardMethod::kNeumann);
  EXPECT_EQ(deq::parse_backward_method("adjoint-fixed-point"), deq::BackwardMethod::kAdjointFixedPoint);
  EXPECT_THROW(deq::parse_backward_method("phantom"), std::invalid_argument);
}

TEST(DeqForward, ZeroMapKeepsTheInitialState) {
  // Residual map with W = 0, V = 0, c = 0 is the identity.
  const DenseMap f(Mat::Zero(4, 4), Mat::Zero(4, 2), Vec::Zero(4), true);
  const Tensor z0 = random_tensor({4}, 1);
  const auto r = deq::deq_forward(f, context(Tensor({2}, 1.0), 1e-6, deq::BackwardMethod::kNeumann, 1e-8), z0);
  EXPECT_EQ(r.residual_trace.front(), 0.0);
  EXPECT_EQ(r.z_star, z0);
}

TEST(DeqForward, FixedPointCertificate) {
  const DenseMap f = contractive_residual_map(12, 3, 2);
  const auto ctx = context(random_tensor({3}, 3), 1e-9, deq::BackwardMethod::kAdjointFixedPoint, 1e-10);
  const auto r = deq::deq_forward(f, ctx, random_tensor({12}, 4));
  ASSERT_TRUE(r.converged);
  EXPECT_LE(fp::relative_residual(r.z_star, f.apply(r.z_star, ctx)), 1e-9);
}

TEST(DeqBackward, AffineAdjointMatchesDenseSolve) {
  std::mt19937_64 rng(5);
  const Eigen::Index n = 10;
  Mat j = random_matrix(n, n, rng, 1.0);
  j *= 0.6 / Eigen::JacobiSVD<Mat>(j).singularValues()[0];
  const DenseMap f(j, random_matrix(n, 2, rng, 1.0), random_matrix(n, 1, rng, 1.0), false);
  const Tensor g = random_tensor({static_cast<std::size_t>(n)}, 6);
  // Oracle: a = (I - J^T)^{-1} g.
  const Vec oracle = (Mat::Identity(n, n) - j.transpose()).partialPivLu().solve(as_vec(g));
  for (auto method : {deq::BackwardMethod::kNeumann, deq::BackwardMethod::kAdjointFixedPoint}) {
    const auto ctx = context(random_tensor({2}, 7), 1e-12, method, 1e-12);
    const auto fwd = deq::deq_forward(f, ctx, Tensor({static_cast<std::size_t>(n)}));
    const auto bwd = deq::deq_backward(f, ctx, fwd.z_star, g);
    EXPECT_TRUE(bwd.converged);
    EXPECT_LT((as_vec(bwd.adjoint) - oracle).norm() / oracle.norm(), 1e-6) << deq::backward_method_name(method);
  }
}

TEST(DeqBackward, NonlinearAdjointMatchesDenseSolve) {
  const DenseMap f = contractive_residual_map(8, 3, 8);
  const auto ctx = context(random_tensor({3}, 9), 1e-12, deq::BackwardMethod::kAdjointFixedPoint, 1e-12);
  const auto fwd = deq::deq_forward(f, ctx, Tensor({8}));
  const Tensor g = random_tensor({8}, 10);
  const Mat jac = f.jacobian(fwd.z_star, ctx.injected);
  const Vec oracle = (Mat::Identity(8, 8) - jac.transpose()).partialPivLu().solve(as_vec(g));
  const auto bwd = deq::deq_backward(f, ctx, fwd.z_star, g);
  EXPECT_LT((as_vec(bwd.adjoint) - oracle).norm() / oracle.norm(), 1e-6);
}

TEST(DeqBackward, NeumannBlowupRaises) {
  std::mt19937_64 rng(11);
  const DenseMap f(1.5 * Mat::Identity(3, 3), random_matrix(3, 1, rng, 1.0), Vec::Zero(3), false);
  auto ctx = context(Tensor({1}, 1.0), 1e-8, deq::BackwardMethod::kNeumann, 1e-10);
  ctx.backward.max_iters = 200;
  EXPECT_THROW(deq::deq_backward(f, ctx, Tensor({3}), Tensor({3}, 1.0)), fp::DivergenceError);
}

TEST(DeqBackward, TruncatedNeumannWithZeroTermsIsTheCotangent) {
  const DenseMap f = contractive_residual_map(5, 2, 12);
  auto ctx = context(random_tensor({2}, 13), 1e-10, deq::BackwardMethod::kNeumann, 0.0);
  ctx.backward.max_iters = 0;
  const Tensor g = random_tensor({5}, 14);
  const auto bwd = deq::deq_backward(f, ctx, random_tensor({5}, 15), g);
  EXPECT_EQ(bwd.adjoint, g);
  EXPECT_EQ(bwd.iterations, 0);
}

// Property: implicit gradients of L = h . z*(c, u) match central differences
// of the re-solved loss over random small instances.
TEST(DeqBackward, ImplicitGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const Eigen::Index n = 4 + static_cast<Eigen::Index>(seed % 5), m = 2 + static_cast<Eigen::Index>(seed % 3);
    DenseMap f = contractive_residual_map(n, m, 100 + seed);
    const Tensor u = random_tensor({static_cast<std::size_t>(m)}, 200 + seed);
    const Tensor h = random_tensor({static_cast<std::size_t>(n)}, 300 + seed);
    const Tensor z0 = random_tensor({static_cast<std::size_t>(n)}, 400 + seed);
    const auto ctx = context(u, 1e-13, deq::BackwardMethod::kAdjointFixedPoint, 1e-13);

    const auto fwd = deq::deq_forward(f, ctx, z0);
    const auto bwd = deq::deq_backward(f, ctx, fwd.z_star, h);

    const auto loss_u = [&](const Tensor& uu) {
      return dot(h, deq::deq_forward(f, context(uu, 1e-13, deq::BackwardMethod::kAdjointFixedPoint, 1e-13), z0).z_star);
    };
    EXPECT_LT(max_rel_error(bwd.grad_injection, numeric_gradient(loss_u, u)), 1e-6) << "seed " << seed;

    const Vec c0 = f.c_;
    const auto loss_c = [&](const Tensor& c) {
      f.c_ = as_vec(c);
      const double l = dot(h, deq::deq_forward(f, ctx, z0).z_star);
      f.c_ = c0;
      return l;
    };
    EXPECT_LT(max_rel_error(bwd.grad_params[0], numeric_gradient(loss_c, as_tensor(c0))), 1e-6) << "seed " << seed;
  }
}

TEST(Rollout, ReproducesPicardTrajectoryExactly) {
  const DenseMap f = contractive_residual_map(6, 2, 20);
  const auto ctx = context(random_tensor({2}, 21), 1e-3, deq::BackwardMethod::kNeumann, 1e-3);
  const Tensor z0 = random_tensor({6}, 22);
  const Tensor injected_before = ctx.injected;

  std::vector<Tensor> picard_states;
  fp::SolverConfig cfg;
  cfg.method = fp::Method::kPicard;
  cfg.tol = 0.0;
  cfg.max_iters = 60;
  const auto picard = fp::solve_picard([&](const Tensor& z) { return f.apply(z, ctx); }, z0, cfg,
                                       [&](int, const Tensor& z, double) { picard_states.push_back(z); });

  const auto rollout = deq::nca_rollout(f, ctx, z0, 60, {}, true);
  ASSERT_EQ(rollout.states.size(), 61u);
  EXPECT_EQ(rollout.states.front(), z0);
  for (std::size_t k = 0; k < 60; ++k) EXPECT_EQ(rollout.states[k + 1], picard_states[k]);
  EXPECT_EQ(rollout.residual_trace, picard.residual_trace);
  EXPECT_EQ(rollout.residual_trace[49], picard.residual_trace[49]);
  EXPECT_EQ(rollout.final_state, picard_states.back());
  EXPECT_EQ(ctx.injected, injected_before);
}

TEST(Rollout, ZeroMapKeepsEveryState) {
  const DenseMap f(Mat::Zero(3, 3), Mat::Zero(3, 1), Vec::Zero(3), true);
  const auto ctx = context(Tensor({1}, 1.0), 1e-3, deq::BackwardMethod::kNeumann, 1e-3);
  const Tensor z0 = random_tensor({3}, 23);
  const auto rollout = deq::nca_rollout(f, ctx, z0, 10, {}, true);
  for (const Tensor& s : rollout.states) EXPECT_EQ(s, z0);
}

TEST(Rollout, NonFiniteStateAbortsWithStep) {
  const DenseMap f(3.0 * Mat::Identity(2, 2), Mat::Zero(2, 1), Vec::Zero(2), false);
  const auto ctx = context(Tensor({1}, 1.0), 1e-3, deq::BackwardMethod::kNeumann, 1e-3);
  try {
    deq::nca_rollout(f, ctx, Tensor({2}, 1e300), 5);
    FAIL() << "expected divergence";
  } catch (const fp::DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 1"), std::string::npos);
    EXPECT_TRUE(e.trace().empty());
  }
}
