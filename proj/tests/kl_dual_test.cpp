#include "trl/kl_dual.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "trl/verify/dual_checks.hpp"
#include "trl/verify/finite_diff.hpp"
#include "trl/verify/random_instances.hpp"

namespace trl {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Root of s - 1 - ln s = 0.1 on [1, 4] by bisection, and the matching
// multiplier from 1/s = (eta + 1/4) / (eta + 1).
constexpr double kGoldenCov = 1.516221161425022;
constexpr double kGoldenEta = 1.2028656630999677;

VectorXd precisions(const VectorXd& var) { return var.cwiseInverse(); }

TEST(DualValueAndGrad, EndpointAndLimit) {
  verify::Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const VectorXd prec = precisions(verify::random_variances(rng, 4));
    const VectorXd prec_old = precisions(verify::random_variances(rng, 4));
    const double eps = 0.05;
    const auto at_zero = dual_value_and_grad(0.0, prec, prec_old, eps);
    EXPECT_NEAR(at_zero.grad, eps - kl_cov_from_precisions(prec, prec_old), 1e-12);
    const auto at_inf = dual_value_and_grad(1e6, prec, prec_old, eps);
    EXPECT_NEAR(at_inf.grad, eps, 1e-4);
  }
}

TEST(DualValueAndGrad, GradientMatchesFiniteDifferences) {
  verify::Rng rng(2);
  for (int i = 0; i < 50; ++i) {
    const bool full = i % 2 == 1;
    const int d = 1 + i % 6;
    const double eps = 0.01 + 0.1 * std::uniform_real_distribution<>(0, 1)(rng);
    const double eta = std::exp(std::uniform_real_distribution<>(-3, 3)(rng));
    double analytic, numeric;
    if (full) {
      const MatrixXd prec = verify::random_spd(rng, d).inverse();
      const MatrixXd prec_old = verify::random_spd(rng, d).inverse();
      analytic = dual_value_and_grad(eta, prec, prec_old, eps).grad;
      numeric = verify::directional_fd(
          [&](double t) { return dual_value_and_grad(eta + t, prec, prec_old, eps).value; },
          1e-5 * std::max(1.0, eta));
    } else {
      const VectorXd prec = precisions(verify::random_variances(rng, d));
      const VectorXd prec_old = precisions(verify::random_variances(rng, d));
      analytic = dual_value_and_grad(eta, prec, prec_old, eps).grad;
      numeric = verify::directional_fd(
          [&](double t) { return dual_value_and_grad(eta + t, prec, prec_old, eps).value; },
          1e-5 * std::max(1.0, eta));
    }
    EXPECT_LT(verify::relative_error(analytic, numeric, 1e-3), 1e-6)
        << analytic << " vs " << numeric;
  }
}

TEST(SolveDual, GoldenScalarCase) {
  const VectorXd prec = VectorXd::Constant(1, 0.25);
  const VectorXd prec_old = VectorXd::Constant(1, 1.0);
  const DualSolveResult r = solve_dual(prec, prec_old, 0.1);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.eta_star, kGoldenEta, 1e-7);
  EXPECT_LT(std::abs(r.grad_residual), 1e-8);
  const VectorXd cov = interpolate_precision(r.eta_star, prec, prec_old).cwiseInverse();
  EXPECT_NEAR(cov(0), kGoldenCov, 1e-8);
}

TEST(SolveDual, InactiveReturnsZero) {
  const VectorXd prec = VectorXd::Constant(2, 1.0 / 1.1);
  const VectorXd prec_old = VectorXd::Ones(2);
  const DualSolveResult r = solve_dual(prec, prec_old, 0.5);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.eta_star, 0.0);
  EXPECT_GE(r.grad_residual, 0.0);
}

TEST(SolveDual, KktAndComplementarySlackness) {
  verify::Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const int d = 1 + i % 8;
    const VectorXd prec = precisions(verify::random_variances(rng, d));
    const VectorXd prec_old = precisions(verify::random_variances(rng, d));
    const double eps = 0.001 + 0.2 * std::uniform_real_distribution<>(0, 1)(rng);
    const DualSolveResult r = solve_dual(prec, prec_old, eps);
    ASSERT_TRUE(r.converged);
    EXPECT_GE(r.eta_star, 0.0);
    if (r.eta_star > 0.0) {
      EXPECT_LT(std::abs(r.grad_residual), 1e-8);
    } else {
      EXPECT_GT(r.grad_residual, -1e-8);
    }
    EXPECT_LT(std::abs(r.eta_star * r.grad_residual), 1e-8 * std::max(1.0, r.eta_star));
  }
}

TEST(SolveDual, ConvexAlongEta) {
  verify::Rng rng(4);
  std::uniform_real_distribution<> u(-4, 4);
  for (int i = 0; i < 1000; ++i) {
    const int d = 1 + i % 8;
    const VectorXd prec = precisions(verify::random_variances(rng, d));
    const VectorXd prec_old = precisions(verify::random_variances(rng, d));
    const double eps = 0.05;
    const double eta = std::exp(u(rng));
    const double h = 1e-3 * std::max(1.0, eta);
    const double second = dual_value_and_grad(eta + h, prec, prec_old, eps).value -
                          2.0 * dual_value_and_grad(eta, prec, prec_old, eps).value +
                          dual_value_and_grad(eta - h, prec, prec_old, eps).value;
    EXPECT_GE(second, -1e-8);
  }
}

TEST(SolveDual, AgreesWithGridSearchOracle) {
  verify::Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const VectorXd prec = precisions(verify::random_variances(rng, 8));
    const VectorXd prec_old = precisions(verify::random_variances(rng, 8));
    const double eps = 0.05;
    if (kl_cov_from_precisions(prec, prec_old) <= eps) continue;
    const DualSolveResult r = solve_dual(prec, prec_old, eps);
    // g is flat at its minimum; argmin is determined to ~sqrt(machine eps)
    // relative by values alone, so the comparison is scaled by eta.
    EXPECT_NEAR(r.eta_star, verify::grid_argmin_dual(prec, prec_old, eps), 1e-6 * std::max(1.0, r.eta_star));
  }
}

TEST(SolveDual, DiagonalMatchesFull) {
  verify::Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    const int d = 1 + i % 8;
    const VectorXd prec = precisions(verify::random_variances(rng, d));
    const VectorXd prec_old = precisions(verify::random_variances(rng, d));
    const MatrixXd prec_f = prec.asDiagonal();
    const MatrixXd prec_old_f = prec_old.asDiagonal();
    const double eps = 0.02;
    const double eta = 0.7;
    const auto vd = dual_value_and_grad(eta, prec, prec_old, eps);
    const auto vf = dual_value_and_grad(eta, prec_f, prec_old_f, eps);
    EXPECT_NEAR(vd.value, vf.value, 1e-10 * std::max(1.0, std::abs(vf.value)));
    EXPECT_NEAR(vd.grad, vf.grad, 1e-10 * std::max(1.0, std::abs(vf.grad)));
    const auto rd = solve_dual(prec, prec_old, eps);
    const auto rf = solve_dual(prec_f, prec_old_f, eps);
    EXPECT_NEAR(rd.eta_star, rf.eta_star, 1e-10 * std::max(1.0, rf.eta_star));
  }
}

TEST(SolveDual, NonConvergenceIsReported) {
  const VectorXd prec = VectorXd::Constant(3, 1e-3);
  const VectorXd prec_old = VectorXd::Ones(3);
  DualSolveOptions opts;
  opts.max_iterations = 1;
  opts.tolerance = 1e-300;
  try {
    solve_dual(prec, prec_old, 0.01, opts);
    FAIL() << "expected DualSolveError";
  } catch (const DualSolveError& e) {
    EXPECT_FALSE(e.result().converged);
    EXPECT_GT(e.result().iterations, 0);
  }
}

// Projected precision as a function of the prediction precision.
template <class Mat>
Mat projected(const Mat& prec, const Mat& prec_old, double eps) {
  if (kl_cov_from_precisions(prec, prec_old) <= eps) return prec;
  const auto r = solve_dual(prec, prec_old, eps);
  return interpolate_precision(r.eta_star, prec, prec_old);
}

TEST(ImplicitGradients, InactiveIsIdentity) {
  DualSolveResult r;
  r.converged = true;
  const VectorXd g = VectorXd::LinSpaced(3, 1.0, 3.0);
  const auto out = implicit_gradients(r, VectorXd(VectorXd::Ones(3)),
                                      VectorXd(VectorXd::Ones(3)), g, true);
  EXPECT_EQ(out.grad_precision, g);
  EXPECT_EQ(out.grad_old_precision->norm(), 0.0);
}

TEST(ImplicitGradients, UnconvergedThrows) {
  DualSolveResult r;
  const VectorXd v = VectorXd::Ones(2);
  EXPECT_THROW(implicit_gradients(r, v, v, v), std::logic_error);
}

TEST(ImplicitGradients, DiagonalMatchesFiniteDifferences) {
  verify::Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const int d = 2 + i % 3;
    const VectorXd prec = precisions(verify::random_variances(rng, d));
    const VectorXd prec_old = precisions(verify::random_variances(rng, d));
    const double eps = 0.02;
    if (kl_cov_from_precisions(prec, prec_old) <= 2.0 * eps) continue;
    const VectorXd up = verify::random_vector(rng, d);
    const auto r = solve_dual(prec, prec_old, eps);
    const auto grads = implicit_gradients(r, prec, prec_old, up, true);
    const VectorXd fd = verify::numerical_gradient(
        [&](const VectorXd& x) { return up.dot(projected(x, prec_old, eps)); }, prec, 1e-6);
    EXPECT_LT(verify::relative_error(grads.grad_precision, fd), 1e-4);
    const VectorXd fd_old = verify::numerical_gradient(
        [&](const VectorXd& x) { return up.dot(projected(prec, x, eps)); }, prec_old, 1e-6);
    EXPECT_LT(verify::relative_error(*grads.grad_old_precision, fd_old), 1e-4);
  }
}

TEST(ImplicitGradients, FullMatchesFiniteDifferences) {
  verify::Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    const int d = 2 + i % 3;
    const MatrixXd prec = verify::random_spd(rng, d).inverse();
    const MatrixXd prec_old = verify::random_spd(rng, d).inverse();
    const double eps = 0.02;
    if (kl_cov_from_precisions(prec, prec_old) <= 2.0 * eps) continue;
    MatrixXd up = verify::random_spd(rng, d) - MatrixXd::Identity(d, d);
    up = (0.5 * (up + up.transpose())).eval();
    const auto r = solve_dual(prec, prec_old, eps);
    const auto grads = implicit_gradients(r, prec, prec_old, up, true);
    // Directional derivatives along random symmetric directions.
    for (int k = 0; k < 3; ++k) {
      MatrixXd dir = MatrixXd::Random(d, d);
      dir = (0.5 * (dir + dir.transpose())).eval();
      const double fd = verify::directional_fd(
          [&](double t) {
            return (up.array() * projected(MatrixXd(prec + t * dir), prec_old, eps).array()).sum();
          },
          1e-6);
      const double an = (grads.grad_precision.array() * dir.array()).sum();
      EXPECT_LT(verify::relative_error(an, fd, 1e-6), 1e-4);
      const double fd_old = verify::directional_fd(
          [&](double t) {
            return (up.array() * projected(prec, MatrixXd(prec_old + t * dir), eps).array()).sum();
          },
          1e-6);
      const double an_old = (grads.grad_old_precision->array() * dir.array()).sum();
      EXPECT_LT(verify::relative_error(an_old, fd_old, 1e-6), 1e-4);
    }
  }
}

TEST(ImplicitGradients, OneSidedAtComplementarySlacknessBoundary) {
  // Constraint exactly tight at eta = 0. Moving away from the old precision
  // activates the constraint; moving towards it keeps the map the identity.
  VectorXd prec(2), prec_old(2);
  prec << 0.3, 2.5;
  prec_old << 1.0, 1.0;
  const double eps = kl_cov_from_precisions(prec, prec_old);
  const VectorXd dir = prec - prec_old;
  const VectorXd up(VectorXd::LinSpaced(2, 0.5, -1.5));
  const double h = 1e-7;
  const double base = up.dot(projected(prec, prec_old, eps));
  const double active_side =
      (up.dot(projected(VectorXd(prec + h * dir), prec_old, eps)) - base) / h;
  const double inactive_side =
      (base - up.dot(projected(VectorXd(prec - h * dir), prec_old, eps))) / h;

  DualSolveResult at_boundary;
  at_boundary.converged = true;
  EXPECT_NEAR(inactive_side,
              implicit_gradients(at_boundary, prec, prec_old, up).grad_precision.dot(dir),
              1e-6);
  // Limit of the active branch as eta -> 0+.
  at_boundary.eta_star = 1e-300;
  const double active_formula =
      implicit_gradients(at_boundary, prec, prec_old, up).grad_precision.dot(dir);
  EXPECT_NEAR(active_side, active_formula, 1e-5);
  EXPECT_GT(std::abs(active_side - inactive_side), 1e-3);
}

}  // namespace
}  // namespace trl
