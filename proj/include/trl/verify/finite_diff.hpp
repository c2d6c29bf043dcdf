#pragma once

// Central finite differences used to check backward passes.

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

namespace trl::verify {

/// Central difference of f along `direction` at step h.
inline double directional_fd(const std::function<double(double)>& f_of_t,
                             double h) {
  return (f_of_t(h) - f_of_t(-h)) / (2.0 * h);
}

/// Gradient of f: R^n -> R by central differences.
inline Eigen::VectorXd numerical_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    xp(i) = xi + h;
    const double fp = f(xp);
    xp(i) = xi - h;
    const double fm = f(xp);
    xp(i) = xi;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                             double floor = 1e-8) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

}  // namespace trl::verify
