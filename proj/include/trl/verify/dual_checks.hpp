#pragma once

// Randomized checks of the KL dual solver.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "trl/kl_dual.hpp"
#include "trl/verify/random_instances.hpp"

namespace trl::verify {

/// Value-only minimization of g over [0, 1e3]: log-spaced grid, then golden
/// section search on the bracketing cells.
template <class Mat>
double grid_argmin_dual(const Mat& prec, const Mat& prec_old, double eps) {
  auto g = [&](double eta) { return dual_value_and_grad(eta, prec, prec_old, eps).value; };
  std::vector<double> grid{0.0};
  for (int k = 0; k <= 20000; ++k) grid.push_back(std::pow(10.0, -6.0 + 9.0 * k / 20000));
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    if (g(grid[k]) < g(grid[best])) best = k;
  }
  double lo = grid[best == 0 ? 0 : best - 1];
  double hi = grid[std::min(best + 1, grid.size() - 1)];
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    if (g(a) < g(b)) hi = b; else lo = a;
  }
  return 0.5 * (lo + hi);
}

struct DualSweep {
  int instances = 0;
  int failures = 0;
  double worst = 0.0;  // largest residual / most negative curvature / largest gap
};

/// KKT at the solution: eta >= 0, |residual| < tol when eta > 0, residual >
/// -tol when eta = 0, and |eta residual| < tol max(1, eta).
inline DualSweep kkt_sweep(int trials, std::uint64_t seed, double tol = 1e-8) {
  Rng rng(seed);
  DualSweep out;
  for (int i = 0; i < trials; ++i) {
    const int d = 1 + i % 8;
    const Eigen::VectorXd prec = random_variances(rng, d).cwiseInverse();
    const Eigen::VectorXd prec_old = random_variances(rng, d).cwiseInverse();
    const double eps = 0.001 + 0.2 * std::uniform_real_distribution<>(0, 1)(rng);
    const DualSolveResult r = solve_dual(prec, prec_old, eps);
    const double res = r.eta_star > 0.0 ? std::abs(r.grad_residual)
                                         : std::max(0.0, -r.grad_residual);
    const bool ok = r.converged && r.eta_star >= 0.0 && res < tol &&
                    std::abs(r.eta_star * r.grad_residual) < tol * std::max(1.0, r.eta_star);
    out.worst = std::max(out.worst, res);
    ++out.instances;
    if (!ok) ++out.failures;
  }
  return out;
}

/// Second differences of g along eta; `worst` is the most negative.
inline DualSweep convexity_sweep(int trials, std::uint64_t seed, double tol = 1e-8) {
  Rng rng(seed);
  std::uniform_real_distribution<> u(-4, 4);
  DualSweep out;
  out.worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < trials; ++i) {
    const int d = 1 + i % 8;
    const Eigen::VectorXd prec = random_variances(rng, d).cwiseInverse();
    const Eigen::VectorXd prec_old = random_variances(rng, d).cwiseInverse();
    const double eps = 0.05;
    const double eta = std::exp(u(rng));
    const double h = 1e-3 * std::max(1.0, eta);
    const double second = dual_value_and_grad(eta + h, prec, prec_old, eps).value -
                          2.0 * dual_value_and_grad(eta, prec, prec_old, eps).value +
                          dual_value_and_grad(eta - h, prec, prec_old, eps).value;
    out.worst = std::min(out.worst, second);
    ++out.instances;
    if (second < -tol) ++out.failures;
  }
  return out;
}

/// Solver against the grid-search argmin on active 8-D instances. The dual
/// is flat at its minimum, so the tolerance scales with max(1, eta).
inline DualSweep grid_oracle_sweep(int trials, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  DualSweep out;
  while (out.instances < trials) {
    const Eigen::VectorXd prec = random_variances(rng, 8).cwiseInverse();
    const Eigen::VectorXd prec_old = random_variances(rng, 8).cwiseInverse();
    const double eps = 0.05;
    if (kl_cov_from_precisions(prec, prec_old) <= eps) continue;
    const DualSolveResult r = solve_dual(prec, prec_old, eps);
    const double gap = std::abs(r.eta_star - grid_argmin_dual(prec, prec_old, eps)) /
                       std::max(1.0, r.eta_star);
    out.worst = std::max(out.worst, gap);
    ++out.instances;
    if (!(gap < tol)) ++out.failures;
  }
  return out;
}

}  // namespace trl::verify
