#pragma once

// One-dimensional convex dual of the KL covariance projection and implicit
// gradients through its optimum.
//
// With precisions L (prediction) and L_old, the projected precision is
//   L~(eta) = (eta * L_old + L) / (eta + 1)
// and the dual
//   g(eta) = eta*eps - d - (1 + eta) log|L~| + log|L| + eta log|L_old|
// is convex with g'(eta) = eps - KLcov(eta), where
//   KLcov(eta) = tr(L_old S~) - d + log|L~| - log|L_old|,   S~ = L~^{-1}.

#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "trl/cov_algebra.hpp"

namespace trl {

struct DualSolveOptions {
  int max_iterations = 100;
  double tolerance = 1e-8;
};

struct DualSolveResult {
  double eta_star = 0.0;
  double dual_value = 0.0;
  /// eps - KLcov at eta_star.
  double grad_residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

class DualSolveError : public std::runtime_error {
 public:
  explicit DualSolveError(const DualSolveResult& r)
      : std::runtime_error(describe(r)), result_(r) {}
  const DualSolveResult& result() const { return result_; }

 private:
  static std::string describe(const DualSolveResult& r) {
    std::ostringstream os;
    os << "KL dual did not converge: eta=" << r.eta_star
       << " residual=" << r.grad_residual << " iterations=" << r.iterations;
    return os.str();
  }
  DualSolveResult result_;
};

struct DualValueAndGrad {
  double value;
  double grad;
};

/// KL covariance term tr(L_old S) - d + log|S_old| - log|S| evaluated from
/// precisions.
template <class Mat>
double kl_cov_from_precisions(const Mat& prec, const Mat& prec_old) {
  using A = algebra_for_t<Mat>;
  const Mat cov = A::inv(prec);
  return A::inner(prec_old, cov) - A::dim(prec) + A::logdet(prec) -
         A::logdet(prec_old);
}

template <class Mat>
Mat interpolate_precision(double eta, const Mat& prec, const Mat& prec_old) {
  return (eta * prec_old + prec) / (eta + 1.0);
}

template <class Mat>
DualValueAndGrad dual_value_and_grad(double eta, const Mat& prec,
                                     const Mat& prec_old, double eps_cov) {
  using A = algebra_for_t<Mat>;
  if (eta < 0.0) throw std::invalid_argument("dual_value_and_grad: eta < 0");
  const int d = A::dim(prec);
  const Mat interp = interpolate_precision(eta, prec, prec_old);
  const double logdet_interp = A::logdet(interp);
  const double logdet_old = A::logdet(prec_old);
  const double value = eta * eps_cov - d - (1.0 + eta) * logdet_interp +
                       A::logdet(prec) + eta * logdet_old;
  const Mat cov = A::inv(interp);
  const double kl = A::inner(prec_old, cov) - d + logdet_interp - logdet_old;
  return {value, eps_cov - kl};
}

namespace detail {

struct DualPoint {
  double residual;  // eps - KLcov
  double slope;     // d residual / d eta  (= g'' >= 0)
};

template <class Mat>
DualPoint dual_point(double eta, const Mat& prec, const Mat& prec_old,
                     double eps_cov) {
  using A = algebra_for_t<Mat>;
  const int d = A::dim(prec);
  const Mat interp = interpolate_precision(eta, prec, prec_old);
  const Mat cov = A::inv(interp);
  const double kl = A::inner(prec_old, cov) - d + A::logdet(interp) -
                    A::logdet(prec_old);
  const Mat diff = interp - prec_old;
  // <S~ (L~ - L_old) S~, L~ - L_old> / (1 + eta)
  const double slope = A::inner(A::sandwich(cov, diff), diff) / (1.0 + eta);
  return {eps_cov - kl, slope};
}

}  // namespace detail

/// Safeguarded Newton iteration on eps - KLcov(eta) = 0 with a bisection
/// fallback. The bracket starts at [0, 1] and its upper end doubles until the
/// residual turns non-negative.
template <class Mat>
DualSolveResult solve_dual(const Mat& prec, const Mat& prec_old, double eps_cov,
                           const DualSolveOptions& opts = {}) {
  if (!(eps_cov > 0.0)) throw std::invalid_argument("solve_dual: eps_cov <= 0");
  DualSolveResult out;
  auto finish = [&](double eta, double residual) {
    out.eta_star = eta;
    out.grad_residual = residual;
    out.dual_value = dual_value_and_grad(eta, prec, prec_old, eps_cov).value;
    return out;
  };

  const detail::DualPoint at_zero =
      detail::dual_point(0.0, prec, prec_old, eps_cov);
  // Inactive, or violated by less than the tolerance.
  if (at_zero.residual > -opts.tolerance) {
    out.converged = true;
    return finish(0.0, at_zero.residual);
  }

  double lo = 0.0;
  double hi = 1.0;
  detail::DualPoint at_hi = detail::dual_point(hi, prec, prec_old, eps_cov);
  for (int grow = 0; at_hi.residual < 0.0; ++grow) {
    if (grow > 200) {
      out.converged = false;
      finish(hi, at_hi.residual);
      throw DualSolveError(out);
    }
    lo = hi;
    hi *= 2.0;
    at_hi = detail::dual_point(hi, prec, prec_old, eps_cov);
  }
  if (std::abs(at_hi.residual) < opts.tolerance) {
    out.converged = true;
    return finish(hi, at_hi.residual);
  }

  double eta = 0.5 * (lo + hi);
  detail::DualPoint cur{};
  for (int it = 1; it <= opts.max_iterations; ++it) {
    out.iterations = it;
    cur = detail::dual_point(eta, prec, prec_old, eps_cov);
    if (std::abs(cur.residual) < opts.tolerance) {
      // One more Newton step so that downstream finite differences do not
      // see solver noise at the tolerance level.
      if (cur.slope > 0.0) {
        const double polished = eta - cur.residual / cur.slope;
        const detail::DualPoint p =
            detail::dual_point(polished, prec, prec_old, eps_cov);
        if (polished > 0.0 && std::abs(p.residual) < std::abs(cur.residual)) {
          eta = polished;
          cur = p;
        }
      }
      out.converged = true;
      return finish(eta, cur.residual);
    }
    if (cur.residual < 0.0) {
      lo = eta;
    } else {
      hi = eta;
    }
    double next = cur.slope > 0.0 ? eta - cur.residual / cur.slope : lo - 1.0;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (next == eta) break;
    eta = next;
  }
  out.converged = false;
  finish(eta, cur.residual);
  throw DualSolveError(out);
}

template <class Mat>
struct ImplicitGradients {
  Mat grad_precision;
  std::optional<Mat> grad_old_precision;
};

/// Vector-Jacobian product of L -> L~(eta*(L), L) given the upstream gradient
/// with respect to L~. In the active case eta* is differentiated through the
/// stationarity condition eps - KLcov(L~(eta*, L)) = 0; in the inactive case
/// eta* = 0 locally and the map is the identity.
template <class Mat>
ImplicitGradients<Mat> implicit_gradients(const DualSolveResult& result,
                                          const Mat& prec, const Mat& prec_old,
                                          const Mat& grad_interp,
                                          bool want_old = false) {
  using A = algebra_for_t<Mat>;
  if (!result.converged) {
    throw std::logic_error("implicit_gradients: dual solve did not converge");
  }
  ImplicitGradients<Mat> out;
  const double eta = result.eta_star;
  if (eta <= 0.0) {
    out.grad_precision = grad_interp;
    if (want_old) {
      out.grad_old_precision = Mat::Zero(grad_interp.rows(), grad_interp.cols());
    }
    return out;
  }
  const Mat interp = interpolate_precision(eta, prec, prec_old);
  const Mat cov = A::inv(interp);
  const Mat diff = interp - prec_old;
  // dKLcov / dL~ = S~ (L~ - L_old) S~
  const Mat k = A::sandwich(cov, diff);
  const double curvature = A::inner(k, diff);  // > 0 when active
  const double scale = 1.0 / (1.0 + eta);
  // d eta / dL = K / <K, L~ - L_old>
  const double g_eta = A::inner(grad_interp, Mat(prec_old - interp)) * scale;
  out.grad_precision = Mat(scale * grad_interp + (g_eta / curvature) * k);
  if (want_old) {
    // Direct dependence of L~ on L_old plus the effect through eta*, where
    // dKLcov/dL_old = (S~ - S_old) + eta/(1+eta) K.
    const Mat cov_old = A::inv(prec_old);
    const Mat dkl_dold = Mat(cov - cov_old) + (eta * scale) * k;
    out.grad_old_precision =
        Mat((eta * scale) * grad_interp +
            (g_eta / (curvature * scale)) * dkl_dold);
  }
  return out;
}

}  // namespace trl
