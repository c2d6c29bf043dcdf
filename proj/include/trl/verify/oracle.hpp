#pragma once

// Independent numerical solver for the per-state projection problems
//   argmin_x f(x)  s.t.  c(x) <= bound
// used to check the closed-form and dual-based layers. It only evaluates f and
// c: derivatives come from finite differences, the inner problems
// min f + lambda c are solved by damped Newton, and lambda is found by
// bisection in log space on c(x(lambda)) = bound.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include <Eigen/Dense>

#include "trl/gauss.hpp"

namespace trl::verify {

struct ConstrainedProblem {
  std::function<double(const Eigen::VectorXd&)> objective;
  std::function<double(const Eigen::VectorXd&)> constraint;
  double bound = 0.0;
  /// Unconstrained minimizer of the objective (the prediction).
  Eigen::VectorXd start;
};

struct OracleOptions {
  double fd_step = 1e-5;
  int newton_iterations = 60;
  int bisection_iterations = 80;
};

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

using Fn = std::function<double(const Eigen::VectorXd&)>;

inline void fd_derivatives(const Fn& f, const Eigen::VectorXd& x, double h,
                           Eigen::VectorXd& grad, Eigen::MatrixXd& hess) {
  const Eigen::Index n = x.size();
  grad.resize(n);
  hess.resize(n, n);
  const double f0 = f(x);
  Eigen::VectorXd y = x;
  Eigen::VectorXd fp(n), fm(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    y(i) = x(i) + h;
    fp(i) = f(y);
    y(i) = x(i) - h;
    fm(i) = f(y);
    y(i) = x(i);
    grad(i) = (fp(i) - fm(i)) / (2.0 * h);
    hess(i, i) = (fp(i) - 2.0 * f0 + fm(i)) / (h * h);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      y(i) = x(i) + h;
      y(j) = x(j) + h;
      const double fpp = f(y);
      y(i) = x(i) - h;
      y(j) = x(j) - h;
      const double fmm = f(y);
      y(i) = x(i);
      y(j) = x(j);
      // f(x+hi+hj) + f(x-hi-hj) - 2 f0 = h^2 (Hii + Hjj + 2 Hij)
      const double hij =
          ((fpp + fmm - 2.0 * f0) / (h * h) - hess(i, i) - hess(j, j)) / 2.0;
      hess(i, j) = hij;
      hess(j, i) = hij;
    }
  }
}

inline Eigen::VectorXd newton_minimize(const Fn& f, Eigen::VectorXd x,
                                       const OracleOptions& opts) {
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  double fx = f(x);
  for (int it = 0; it < opts.newton_iterations; ++it) {
    fd_derivatives(f, x, opts.fd_step, g, h);
    if (g.norm() < 1e-10) break;
    // Levenberg-style damping keeps the step a descent direction.
    double damping = 0.0;
    Eigen::VectorXd step;
    for (int attempt = 0; attempt < 30; ++attempt) {
      const Eigen::MatrixXd hd =
          h + damping * Eigen::MatrixXd::Identity(x.size(), x.size());
      Eigen::LLT<Eigen::MatrixXd> llt(hd);
      if (llt.info() == Eigen::Success) {
        step = -llt.solve(g);
        break;
      }
      damping = damping == 0.0 ? 1e-8 * (1.0 + h.cwiseAbs().maxCoeff())
                               : damping * 10.0;
    }
    if (step.size() == 0) step = -g;
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Eigen::VectorXd cand = x + t * step;
      const double fc = f(cand);
      if (std::isfinite(fc) && fc <= fx + 1e-4 * t * g.dot(step)) {
        x = cand;
        fx = fc;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved || (t * step).norm() < 1e-13) break;
  }
  return x;
}

}  // namespace detail

inline Eigen::VectorXd minimize_constrained(const ConstrainedProblem& p,
                                           const OracleOptions& opts = {}) {
  if (p.constraint(p.start) <= p.bound) return p.start;

  auto inner = [&](double lambda, const Eigen::VectorXd& warm) {
    detail::Fn lagrangian = [&](const Eigen::VectorXd& x) {
      const double fx = p.objective(x);
      const double cx = p.constraint(x);
      if (!std::isfinite(fx) || !std::isfinite(cx)) return detail::kInf;
      return fx + lambda * cx;
    };
    return detail::newton_minimize(lagrangian, warm, opts);
  };

  // Bracket: c(x(lo)) > bound >= c(x(hi)).
  double lo = 0.0;
  double hi = 1.0;
  Eigen::VectorXd x_hi = inner(hi, p.start);
  while (p.constraint(x_hi) > p.bound) {
    lo = hi;
    hi *= 4.0;
    if (hi > 1e12) throw std::runtime_error("oracle: failed to bracket lambda");
    x_hi = inner(hi, x_hi);
  }
  Eigen::VectorXd x = x_hi;
  for (int it = 0; it < opts.bisection_iterations; ++it) {
    const double mid = lo == 0.0 ? 0.5 * hi : std::sqrt(lo * hi);
    const Eigen::VectorXd xm = inner(mid, x);
    const double cm = p.constraint(xm);
    if (cm > p.bound) {
      lo = mid;
    } else {
      hi = mid;
      x = xm;
    }
    if (std::abs(cm - p.bound) < 1e-13 * (1.0 + p.bound)) {
      x = xm;
      break;
    }
    if (lo > 0.0 && hi / lo < 1.0 + 1e-13) break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Projection problems written directly from their definitions.

namespace detail {

inline Eigen::VectorXd pack_symmetric(const Eigen::MatrixXd& m) {
  const Eigen::Index d = m.rows();
  Eigen::VectorXd v(d * (d + 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) v(k++) = m(i, j);
  return v;
}

inline Eigen::MatrixXd unpack_symmetric(const Eigen::VectorXd& v, Eigen::Index d) {
  Eigen::MatrixXd m(d, d);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = i; j < d; ++j) {
      m(i, j) = v(k);
      m(j, i) = v(k);
      ++k;
    }
  return m;
}

inline double logdet_or_inf(const Eigen::MatrixXd& m, bool* ok) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  *ok = llt.info() == Eigen::Success;
  if (!*ok) return kInf;
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

/// argmin (mu - x)^T L_old (mu - x) s.t. (mu_old - x)^T L_old (mu_old - x) <= eps
inline Eigen::VectorXd oracle_mean(const Eigen::VectorXd& mu,
                                   const Eigen::VectorXd& mu_old,
                                   const Eigen::MatrixXd& cov_old, double eps) {
  const Eigen::MatrixXd prec = cov_old.inverse();
  ConstrainedProblem p;
  p.objective = [=](const Eigen::VectorXd& x) {
    return (mu - x).dot(prec * (mu - x));
  };
  p.constraint = [=](const Eigen::VectorXd& x) {
    return (mu_old - x).dot(prec * (mu_old - x));
  };
  p.bound = eps;
  p.start = mu;
  return minimize_constrained(p);
}

/// Frobenius covariance projection over symmetric matrices (or diagonals).
inline Eigen::MatrixXd oracle_cov_frobenius(const Eigen::MatrixXd& cov,
                                            const Eigen::MatrixXd& cov_old,
                                            double eps, bool diagonal) {
  const Eigen::Index d = cov.rows();
  ConstrainedProblem p;
  auto to_mat = [=](const Eigen::VectorXd& x) -> Eigen::MatrixXd {
    if (diagonal) return x.asDiagonal();
    return detail::unpack_symmetric(x, d);
  };
  p.objective = [=](const Eigen::VectorXd& x) {
    return (cov - to_mat(x)).squaredNorm();
  };
  p.constraint = [=](const Eigen::VectorXd& x) {
    return (cov_old - to_mat(x)).squaredNorm();
  };
  p.bound = eps;
  p.start = diagonal ? Eigen::VectorXd(cov.diagonal())
                     : detail::pack_symmetric(cov);
  return to_mat(minimize_constrained(p));
}

/// KL covariance projection:
///   argmin tr(S^{-1} X) - log|X|  s.t.  tr(S_old^{-1} X) - d + log|S_old| - log|X| <= eps
inline Eigen::MatrixXd oracle_cov_kl(const Eigen::MatrixXd& cov,
                                     const Eigen::MatrixXd& cov_old, double eps,
                                     bool diagonal) {
  const Eigen::Index d = cov.rows();
  const Eigen::MatrixXd prec = cov.inverse();
  const Eigen::MatrixXd prec_old = cov_old.inverse();
  bool ok = true;
  const double logdet_old = detail::logdet_or_inf(cov_old, &ok);
  auto to_mat = [=](const Eigen::VectorXd& x) -> Eigen::MatrixXd {
    if (diagonal) return x.asDiagonal();
    return detail::unpack_symmetric(x, d);
  };
  ConstrainedProblem p;
  p.objective = [=](const Eigen::VectorXd& x) {
    const Eigen::MatrixXd m = to_mat(x);
    bool pd = true;
    const double ld = detail::logdet_or_inf(m, &pd);
    if (!pd) return detail::kInf;
    return (prec.array() * m.array()).sum() - ld;
  };
  p.constraint = [=](const Eigen::VectorXd& x) {
    const Eigen::MatrixXd m = to_mat(x);
    bool pd = true;
    const double ld = detail::logdet_or_inf(m, &pd);
    if (!pd) return detail::kInf;
    return (prec_old.array() * m.array()).sum() - static_cast<double>(d) +
           logdet_old - ld;
  };
  p.bound = eps;
  p.start = diagonal ? Eigen::VectorXd(cov.diagonal())
                     : detail::pack_symmetric(cov);
  return to_mat(minimize_constrained(p));
}

/// Metric-W2 covariance projection for diagonal covariances (exact problem):
///   argmin sum (v_i + x_i - 2 sqrt(v_i x_i)) / o_i
///   s.t.   sum (1 + x_i / o_i - 2 sqrt(x_i / o_i)) <= eps
inline Eigen::VectorXd oracle_cov_w2_diagonal(const Eigen::VectorXd& var,
                                              const Eigen::VectorXd& var_old,
                                              double eps) {
  ConstrainedProblem p;
  p.objective = [=](const Eigen::VectorXd& x) {
    if ((x.array() <= 0.0).any()) return detail::kInf;
    const Eigen::ArrayXd v = var.array(), o = var_old.array(), xa = x.array();
    return ((v + xa - 2.0 * (v * xa).sqrt()) / o).sum();
  };
  p.constraint = [=](const Eigen::VectorXd& x) {
    if ((x.array() <= 0.0).any()) return detail::kInf;
    const Eigen::ArrayXd o = var_old.array(), xa = x.array();
    return (1.0 + xa / o - 2.0 * (xa / o).sqrt()).sum();
  };
  p.bound = eps;
  p.start = var;
  return minimize_constrained(p);
}

/// W2 covariance projection for full covariances under the commuting
/// assumption, with the square root R of the covariance as variable:
///   argmin tr((R - S^{1/2}) L_old (R - S^{1/2}))
///   s.t.   tr((R - S_old^{1/2}) L_old (R - S_old^{1/2})) <= eps
/// Returns R R.
inline Eigen::MatrixXd oracle_cov_w2_commuting(const Eigen::MatrixXd& cov,
                                               const Eigen::MatrixXd& cov_old,
                                               double eps) {
  const Eigen::Index d = cov.rows();
  const Eigen::MatrixXd root = symmetric_sqrt(cov);
  const Eigen::MatrixXd root_old = symmetric_sqrt(cov_old);
  const Eigen::MatrixXd prec_old = cov_old.inverse();
  ConstrainedProblem p;
  p.objective = [=](const Eigen::VectorXd& x) {
    const Eigen::MatrixXd diff = detail::unpack_symmetric(x, d) - root;
    return (diff * prec_old * diff).trace();
  };
  p.constraint = [=](const Eigen::VectorXd& x) {
    const Eigen::MatrixXd diff = detail::unpack_symmetric(x, d) - root_old;
    return (diff * prec_old * diff).trace();
  };
  p.bound = eps;
  p.start = detail::pack_symmetric(root);
  const Eigen::MatrixXd r = detail::unpack_symmetric(minimize_constrained(p), d);
  return r * r;
}

}  // namespace trl::verify
