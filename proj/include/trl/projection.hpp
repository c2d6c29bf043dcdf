#pragma once

// Differentiable trust-region projection layers for Gaussian policies.
//
// Every projection is an interpolation between the prediction and the old
// policy in a kind-specific parametrization: the mean in Euclidean
// coordinates, the covariance itself (Frobenius), its symmetric square root
// (W2) or its inverse (KL). Multipliers are functions of the inputs and the
// backward passes differentiate through them.

#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "trl/cov_algebra.hpp"
#include "trl/gauss.hpp"
#include "trl/kl_dual.hpp"

namespace trl {

struct EntropySchedule {
  double initial = 0.0;      // H0
  double final_value = 0.0;  // kappa
  double temperature = 0.5;  // tau, in (0, 1)
  int total_steps = 1;       // N
};

/// kappa + (H0 - kappa) * tau^(10 i / N)
inline double entropy_target(const EntropySchedule& s, int step) {
  return s.final_value + (s.initial - s.final_value) *
                             std::pow(s.temperature, 10.0 * step / s.total_steps);
}

struct TrustRegionConfig {
  SimilarityKind kind = SimilarityKind::Wasserstein2Metric;
  double eps_mean = 0.005;
  double eps_cov = 0.0005;
  std::optional<EntropySchedule> entropy;
  double penalty_alpha = 0.0;

  void validate() const {
    if (!(eps_mean > 0.0)) throw std::invalid_argument("eps_mean must be > 0");
    if (!(eps_cov > 0.0)) throw std::invalid_argument("eps_cov must be > 0");
    if (!(penalty_alpha >= 0.0)) {
      throw std::invalid_argument("penalty_alpha must be >= 0");
    }
    if (entropy) {
      if (!(entropy->temperature > 0.0 && entropy->temperature < 1.0)) {
        throw std::invalid_argument("entropy temperature must be in (0, 1)");
      }
      if (entropy->total_steps <= 0) {
        throw std::invalid_argument("entropy total_steps must be positive");
      }
    }
  }
};

/// Gradient with respect to a GaussianParams. `cov` is a symmetric d x d
/// matrix: dL = <cov, dSigma> for symmetric perturbations. For diagonal
/// storage only its diagonal (gradient w.r.t. the variances) is meaningful.
struct GaussianGrad {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  static GaussianGrad zero(int d) {
    return {Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Zero(d, d)};
  }
};

// ---------------------------------------------------------------------------
// Trust-region measures, split into mean and covariance parts.

struct TrustRegionValue {
  double mean = 0.0;
  double cov = 0.0;
};

namespace detail {

template <class A>
double frobenius_cov_term(const typename A::Mat& cov,
                          const typename A::Mat& cov_old) {
  const typename A::Mat diff = cov - cov_old;
  return A::inner(diff, diff);
}

/// ||Sigma_old^{-1/2} (Sigma^{1/2} - Sigma_old^{1/2})||_F^2, which equals
/// tr(I + L_old Sigma - 2 Sigma_old^{-1/2} Sigma^{1/2}).
template <class A>
double w2_cov_term(const typename A::Mat& cov, const typename A::Mat& cov_old) {
  using Mat = typename A::Mat;
  const Mat diff = Mat(A::sqrtm(cov) - A::sqrtm(cov_old));
  const Mat prec_old = A::inv(cov_old);
  return A::inner(diff, A::mul(prec_old, diff));
}

template <class A>
double kl_cov_term(const typename A::Mat& cov, const typename A::Mat& cov_old) {
  const typename A::Mat prec_old = A::inv(cov_old);
  return A::inner(prec_old, cov) - A::dim(cov) + A::logdet(cov_old) -
         A::logdet(cov);
}

template <class A>
double cov_term(SimilarityKind kind, const typename A::Mat& cov,
                const typename A::Mat& cov_old) {
  switch (kind) {
    case SimilarityKind::FrobeniusMetric:
      return frobenius_cov_term<A>(cov, cov_old);
    case SimilarityKind::Wasserstein2Metric:
      return w2_cov_term<A>(cov, cov_old);
    case SimilarityKind::ReverseKL:
      return kl_cov_term<A>(cov, cov_old);
  }
  throw std::logic_error("unknown similarity kind");
}

}  // namespace detail

/// Kind-matched trust-region measure of p against the reference q: the
/// Mahalanobis mean term in the metric of q and the kind's covariance term.
/// For W2 the covariance term is the commuting form the projection enforces;
/// it coincides with the metric W2 covariance term for commuting covariances.
inline TrustRegionValue trust_region_value(SimilarityKind kind,
                                           const GaussianParams& p,
                                           const GaussianParams& q) {
  detail::require_same_dim(p, q, "trust_region_value");
  TrustRegionValue v;
  v.mean = mahalanobis_sq(p.mean(), q.mean(), q);
  if (p.is_diagonal() && q.is_diagonal()) {
    v.cov = detail::cov_term<DiagAlgebra>(kind, p.variances(), q.variances());
  } else {
    v.cov = detail::cov_term<DenseAlgebra>(kind, p.covariance(), q.covariance());
  }
  return v;
}

// ---------------------------------------------------------------------------
// Mean projection.

struct MeanProjection {
  Eigen::VectorXd mean;
  double omega = 0.0;
  bool skipped = true;
};

inline MeanProjection project_mean(const Eigen::VectorXd& mu,
                                   const Eigen::VectorXd& mu_old,
                                   const GaussianParams& old, double eps_mean) {
  if (!(eps_mean > 0.0)) throw std::invalid_argument("project_mean: eps <= 0");
  const double maha = mahalanobis_sq(mu, mu_old, old);
  if (maha <= eps_mean) return {mu, 0.0, true};
  const double omega = std::sqrt(maha / eps_mean) - 1.0;
  return {(mu + omega * mu_old) / (1.0 + omega), omega, false};
}

/// VJP of the mean projection w.r.t. mu (mu_old and Sigma_old are constants).
inline Eigen::VectorXd project_mean_backward(const Eigen::VectorXd& mu,
                                             const Eigen::VectorXd& mu_old,
                                             const GaussianParams& old,
                                             double eps_mean, bool skipped,
                                             const Eigen::VectorXd& upstream) {
  if (skipped) return upstream;
  // mu~ = mu_old + s (mu - mu_old), s = sqrt(eps / m)
  const Eigen::VectorXd delta = mu - mu_old;
  const double m = mahalanobis_sq(mu, mu_old, old);
  const double s = std::sqrt(eps_mean / m);
  Eigen::VectorXd prec_delta;
  if (old.is_diagonal()) {
    prec_delta = delta.cwiseQuotient(old.variances());
  } else {
    prec_delta = old.precision() * delta;
  }
  return s * upstream - (s / m) * upstream.dot(delta) * prec_delta;
}

// ---------------------------------------------------------------------------
// Covariance projections. `Mat` is Eigen::MatrixXd (full) or Eigen::VectorXd
// (variances of a diagonal covariance).

template <class Mat>
struct CovProjection {
  Mat cov;
  double eta = 0.0;
  bool skipped = true;
};

template <class Mat>
CovProjection<Mat> project_cov_frobenius(const Mat& cov, const Mat& cov_old,
                                         double eps_cov) {
  using A = algebra_for_t<Mat>;
  if (!(eps_cov > 0.0)) throw std::invalid_argument("eps_cov <= 0");
  const double c = detail::frobenius_cov_term<A>(cov, cov_old);
  if (c <= eps_cov) return {cov, 0.0, true};
  const double eta = std::sqrt(c / eps_cov) - 1.0;
  return {Mat((cov + eta * cov_old) / (1.0 + eta)), eta, false};
}

template <class Mat>
Mat project_cov_frobenius_backward(const Mat& cov, const Mat& cov_old,
                                   double eps_cov, bool skipped,
                                   const Mat& upstream) {
  using A = algebra_for_t<Mat>;
  if (skipped) return upstream;
  const Mat diff = cov - cov_old;
  const double c = A::inner(diff, diff);
  const double s = std::sqrt(eps_cov / c);
  return Mat(s * upstream - (s / c) * A::inner(upstream, diff) * diff);
}

template <class Mat>
CovProjection<Mat> project_cov_wasserstein(const Mat& cov, const Mat& cov_old,
                                           double eps_cov) {
  using A = algebra_for_t<Mat>;
  if (!(eps_cov > 0.0)) throw std::invalid_argument("eps_cov <= 0");
  const Mat root = A::sqrtm(cov);
  const Mat root_old = A::sqrtm(cov_old);
  const Mat diff = root - root_old;
  const double c = A::inner(diff, A::mul(A::inv(cov_old), diff));
  if (c <= eps_cov) return {cov, 0.0, true};
  const double eta = std::sqrt(c / eps_cov) - 1.0;
  const Mat root_new = (root + eta * root_old) / (1.0 + eta);
  return {A::sym(A::mul(root_new, root_new)), eta, false};
}

template <class Mat>
Mat project_cov_wasserstein_backward(const Mat& cov, const Mat& cov_old,
                                     double eps_cov, bool skipped,
                                     const Mat& upstream) {
  using A = algebra_for_t<Mat>;
  if (skipped) return upstream;
  const Mat root = A::sqrtm(cov);
  const Mat root_old = A::sqrtm(cov_old);
  const Mat prec_old = A::inv(cov_old);
  const Mat diff = root - root_old;
  const double c = A::inner(diff, A::mul(prec_old, diff));
  const double s = std::sqrt(eps_cov / c);
  const Mat root_new = root_old + s * diff;
  // Sigma~ = R~ R~  ->  gradient w.r.t. R~
  const Mat g_root_new =
      A::sym(Mat(A::mul(upstream, root_new) + A::mul(root_new, upstream)));
  const Mat dc_droot =
      A::sym(Mat(A::mul(prec_old, diff) + A::mul(diff, prec_old)));
  const Mat g_root = Mat(s * g_root_new - (s / (2.0 * c)) *
                                              A::inner(g_root_new, diff) *
                                              dc_droot);
  return A::sqrt_backward(root, g_root);
}

template <class Mat>
struct KlCovProjection {
  Mat cov;
  double eta = 0.0;
  bool skipped = true;
  DualSolveResult dual;
};

template <class Mat>
KlCovProjection<Mat> project_cov_kl(const Mat& cov, const Mat& cov_old,
                                    double eps_cov,
                                    const DualSolveOptions& opts = {}) {
  using A = algebra_for_t<Mat>;
  if (!(eps_cov > 0.0)) throw std::invalid_argument("eps_cov <= 0");
  const double c = detail::kl_cov_term<A>(cov, cov_old);
  if (c <= eps_cov) {
    DualSolveResult r;
    r.converged = true;
    r.grad_residual = eps_cov - c;
    return {cov, 0.0, true, r};
  }
  const Mat prec = A::inv(cov);
  const Mat prec_old = A::inv(cov_old);
  const DualSolveResult r = solve_dual(prec, prec_old, eps_cov, opts);
  const Mat prec_new = interpolate_precision(r.eta_star, prec, prec_old);
  return {A::inv(prec_new), r.eta_star, false, r};
}

template <class Mat>
Mat project_cov_kl_backward(const Mat& cov, const Mat& cov_old,
                            const DualSolveResult& dual, bool skipped,
                            const Mat& upstream) {
  using A = algebra_for_t<Mat>;
  if (skipped) return upstream;
  const Mat prec = A::inv(cov);
  const Mat prec_old = A::inv(cov_old);
  const Mat cov_new =
      A::inv(interpolate_precision(dual.eta_star, prec, prec_old));
  // Sigma~ = L~^{-1}
  const Mat g_prec_new = Mat(-1.0 * A::sandwich(cov_new, upstream));
  const Mat g_prec =
      implicit_gradients(dual, prec, prec_old, g_prec_new).grad_precision;
  // L = Sigma^{-1}
  return Mat(-1.0 * A::sandwich(prec, g_prec));
}

// ---------------------------------------------------------------------------
// Entropy control.

namespace detail {

/// Factor applied to Sigma (the square of the std-dev factor) so that the
/// entropy becomes beta; 1 when H >= beta.
inline double entropy_cov_factor(double h, double beta, int d) {
  if (h >= beta) return 1.0;
  return std::exp(2.0 * (beta - h) / d);
}

inline GaussianParams scale_covariance(const GaussianParams& p, double factor) {
  if (factor == 1.0) return p;
  if (p.is_diagonal()) {
    return GaussianParams::diagonal(p.mean(), factor * p.variances());
  }
  return GaussianParams::from_cholesky(p.mean(), std::sqrt(factor) * p.cholesky());
}

}  // namespace detail

/// Scales the standard deviation by exp((beta - H) / d) when H < beta.
inline GaussianParams entropy_scale(const GaussianParams& p, double beta) {
  return detail::scale_covariance(
      p, detail::entropy_cov_factor(entropy(p), beta, p.dim()));
}

/// VJP of entropy_scale w.r.t. the covariance of p.
template <class Mat>
Mat entropy_scale_backward(const Mat& cov, double beta, const Mat& upstream) {
  using A = algebra_for_t<Mat>;
  const int d = A::dim(cov);
  const double h =
      0.5 * (d * std::log(2.0 * std::numbers::pi * std::numbers::e) +
             A::logdet(cov));
  const double factor = detail::entropy_cov_factor(h, beta, d);
  if (factor == 1.0) return upstream;
  // Sigma' = f Sigma with f = exp(2 (beta - H) / d), dH = <Sigma^{-1}, dSigma>/2
  return Mat(factor * upstream -
             (factor / d) * A::inner(upstream, cov) * A::inv(cov));
}

// ---------------------------------------------------------------------------
// Full layer.

struct LayerCache {
  GaussianParams pred;
  GaussianParams old;
  TrustRegionConfig config;
  GaussianParams cov_projected;  // before entropy scaling
  std::optional<double> entropy_beta;
  DualSolveResult dual;
};

struct ProjectionResult {
  GaussianParams projected;
  double omega = 0.0;
  double eta = 0.0;
  bool mean_skipped = true;
  bool cov_skipped = true;
  bool entropy_scaled = false;
  std::shared_ptr<const LayerCache> backward_cache;
};

namespace detail {

template <class A>
CovProjection<typename A::Mat> project_cov_kind(SimilarityKind kind,
                                                const typename A::Mat& cov,
                                                const typename A::Mat& cov_old,
                                                double eps, DualSolveResult* dual) {
  switch (kind) {
    case SimilarityKind::FrobeniusMetric:
      return project_cov_frobenius(cov, cov_old, eps);
    case SimilarityKind::Wasserstein2Metric:
      return project_cov_wasserstein(cov, cov_old, eps);
    case SimilarityKind::ReverseKL: {
      auto r = project_cov_kl(cov, cov_old, eps);
      *dual = r.dual;
      return {r.cov, r.eta, r.skipped};
    }
  }
  throw std::logic_error("unknown similarity kind");
}

template <class A>
typename A::Mat project_cov_kind_backward(const LayerCache& c, bool skipped,
                                          const typename A::Mat& upstream) {
  using Mat = typename A::Mat;
  const Mat cov = c.pred.cov_as<A>();
  const Mat cov_old = c.old.cov_as<A>();
  const double eps = c.config.eps_cov;
  switch (c.config.kind) {
    case SimilarityKind::FrobeniusMetric:
      return project_cov_frobenius_backward(cov, cov_old, eps, skipped, upstream);
    case SimilarityKind::Wasserstein2Metric:
      return project_cov_wasserstein_backward(cov, cov_old, eps, skipped,
                                              upstream);
    case SimilarityKind::ReverseKL:
      return project_cov_kl_backward(cov, cov_old, c.dual, skipped, upstream);
  }
  throw std::logic_error("unknown similarity kind");
}

inline GaussianParams make_gaussian(const Eigen::VectorXd& mean,
                                    const Eigen::VectorXd& var) {
  return GaussianParams::diagonal(mean, var);
}

inline GaussianParams make_gaussian(const Eigen::VectorXd& mean,
                                    const Eigen::MatrixXd& cov) {
  return GaussianParams::full(mean, DenseAlgebra::sym(cov));
}

template <class A>
typename A::Mat cov_grad_as(const Eigen::MatrixXd& g) {
  if constexpr (std::is_same_v<A, DiagAlgebra>) {
    return g.diagonal();
  } else {
    return DenseAlgebra::sym(g);
  }
}

template <class A>
Eigen::MatrixXd cov_grad_from(const typename A::Mat& g) {
  if constexpr (std::is_same_v<A, DiagAlgebra>) {
    return Eigen::MatrixXd(g.asDiagonal());
  } else {
    return g;
  }
}

template <class A>
ProjectionResult forward_impl(const GaussianParams& pred,
                              const GaussianParams& old,
                              const TrustRegionConfig& cfg, int step) {
  using Mat = typename A::Mat;
  auto cache = std::make_shared<LayerCache>();
  cache->pred = pred;
  cache->old = old;
  cache->config = cfg;

  ProjectionResult out;
  const MeanProjection mp =
      project_mean(pred.mean(), old.mean(), old, cfg.eps_mean);
  out.omega = mp.omega;
  out.mean_skipped = mp.skipped;

  const Mat cov = pred.cov_as<A>();
  const Mat cov_old = old.cov_as<A>();
  const CovProjection<Mat> cp =
      project_cov_kind<A>(cfg.kind, cov, cov_old, cfg.eps_cov, &cache->dual);
  out.eta = cp.eta;
  out.cov_skipped = cp.skipped;

  GaussianParams projected = (mp.skipped && cp.skipped)
                                 ? pred
                                 : (cp.skipped ? pred.with_mean(mp.mean)
                                               : make_gaussian(mp.mean, cp.cov));
  cache->cov_projected = projected;
  if (cfg.entropy) {
    const double beta = entropy_target(*cfg.entropy, step);
    cache->entropy_beta = beta;
    const GaussianParams scaled = entropy_scale(projected, beta);
    out.entropy_scaled = entropy(projected) < beta;
    projected = scaled;
  }
  out.projected = projected;
  out.backward_cache = std::move(cache);
  return out;
}

template <class A>
GaussianGrad backward_impl(const ProjectionResult& r, const GaussianGrad& up) {
  using Mat = typename A::Mat;
  const LayerCache& c = *r.backward_cache;
  GaussianGrad g;
  g.mean = project_mean_backward(c.pred.mean(), c.old.mean(), c.old,
                                 c.config.eps_mean, r.mean_skipped, up.mean);
  Mat g_cov = cov_grad_as<A>(up.cov);
  if (c.entropy_beta) {
    g_cov = entropy_scale_backward<Mat>(c.cov_projected.cov_as<A>(),
                                        *c.entropy_beta, g_cov);
  }
  g_cov = project_cov_kind_backward<A>(c, r.cov_skipped, g_cov);
  g.cov = cov_grad_from<A>(g_cov);
  return g;
}

}  // namespace detail

/// Mean projection, then the kind-matched covariance projection, then entropy
/// scaling when the config carries a schedule.
inline ProjectionResult trust_region_forward(const GaussianParams& pred,
                                             const GaussianParams& old,
                                             const TrustRegionConfig& cfg,
                                             int step = 0) {
  detail::require_same_dim(pred, old, "trust_region_forward");
  if (pred.is_diagonal() && old.is_diagonal()) {
    return detail::forward_impl<DiagAlgebra>(pred, old, cfg, step);
  }
  return detail::forward_impl<DenseAlgebra>(pred.as_full(), old.as_full(), cfg,
                                            step);
}

/// Vector-Jacobian product of trust_region_forward w.r.t. the prediction.
inline GaussianGrad trust_region_backward(const ProjectionResult& result,
                                          const GaussianGrad& upstream) {
  if (!result.backward_cache) {
    throw std::logic_error("trust_region_backward: missing forward cache");
  }
  const LayerCache& c = *result.backward_cache;
  if (upstream.mean.size() != c.pred.dim() ||
      upstream.cov.rows() != c.pred.dim() || upstream.cov.cols() != c.pred.dim()) {
    throw std::invalid_argument("trust_region_backward: dimension mismatch");
  }
  if (c.pred.is_diagonal()) {
    return detail::backward_impl<DiagAlgebra>(result, upstream);
  }
  return detail::backward_impl<DenseAlgebra>(result, upstream);
}

}  // namespace trl
