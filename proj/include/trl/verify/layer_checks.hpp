#pragma once

// Randomized checks of the projection layers, shared by the test suite and
// the `trl projcheck` / `trl gradcheck` subcommands.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "trl/projection.hpp"
#include "trl/verify/finite_diff.hpp"
#include "trl/verify/oracle.hpp"
#include "trl/verify/random_instances.hpp"

namespace trl::verify {

inline constexpr std::array<SimilarityKind, 3> kAllKinds = {
    SimilarityKind::FrobeniusMetric, SimilarityKind::Wasserstein2Metric,
    SimilarityKind::ReverseKL};

inline constexpr double kMeanTolerance = 1e-8;
inline constexpr double kCovTolerance = 1e-6;

/// Random bounds spanning two orders of magnitude.
inline TrustRegionConfig random_config(Rng& rng, SimilarityKind kind) {
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  TrustRegionConfig cfg;
  cfg.kind = kind;
  cfg.eps_mean = std::exp(u(rng));
  cfg.eps_cov = std::exp(u(rng));
  return cfg;
}

// ---------------------------------------------------------------------------
// Constraint satisfaction and tightness.

struct ConstraintSweep {
  int instances = 0;
  int projected_mean = 0;
  int projected_cov = 0;
  int violations = 0;        // outside the trust region beyond tolerance
  int loose = 0;             // projected but not tight
  double max_mean_excess = -std::numeric_limits<double>::infinity();
  double max_cov_excess = -std::numeric_limits<double>::infinity();
  double max_tightness_error = 0.0;
  // Histogram of cov constraint value / eps over all instances, bins of 0.1
  // on [0, 1.1); the last bin collects anything above.
  std::array<int, 12> histogram{};
};

/// `eps_scale` < 1 checks the projections against a shrunken bound, which
/// must produce violations (negative control).
inline ConstraintSweep constraint_sweep(SimilarityKind kind,
                                        const std::vector<int>& dims,
                                        int trials, std::uint64_t seed,
                                        double eps_scale = 1.0) {
  Rng rng(seed);
  ConstraintSweep out;
  for (int i = 0; i < trials; ++i) {
    const int d = dims[i % dims.size()];
    const bool full = (i / dims.size()) % 2 == 1;
    const GaussianParams old = random_gaussian(rng, d, full);
    const double spread = std::exp(std::uniform_real_distribution<>(-4, 0.5)(rng));
    const GaussianParams pred = perturb(rng, old, spread);
    const TrustRegionConfig cfg = random_config(rng, kind);
    const ProjectionResult r = trust_region_forward(pred, old, cfg);
    const TrustRegionValue v = trust_region_value(kind, r.projected, old);
    const double eps_mean = eps_scale * cfg.eps_mean;
    const double eps_cov = eps_scale * cfg.eps_cov;

    ++out.instances;
    out.max_mean_excess = std::max(out.max_mean_excess, v.mean - eps_mean);
    out.max_cov_excess = std::max(out.max_cov_excess, v.cov - eps_cov);
    const bool bad = v.mean > eps_mean + kMeanTolerance ||
                     v.cov > eps_cov + kCovTolerance;
    if (bad) ++out.violations;
    bool tight = true;
    if (!r.mean_skipped) {
      ++out.projected_mean;
      const double e = std::abs(v.mean - eps_mean);
      out.max_tightness_error = std::max(out.max_tightness_error, e);
      tight = tight && e <= kMeanTolerance;
    }
    if (!r.cov_skipped) {
      ++out.projected_cov;
      const double e = std::abs(v.cov - eps_cov);
      out.max_tightness_error = std::max(out.max_tightness_error, e);
      tight = tight && e <= kCovTolerance;
    }
    if (!tight) ++out.loose;
    const int bin = std::clamp(static_cast<int>(v.cov / eps_cov * 10.0), 0, 11);
    ++out.histogram[bin];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agreement with the numerical constrained minimizer.

inline Eigen::MatrixXd oracle_cov(SimilarityKind kind, const GaussianParams& pred,
                                  const GaussianParams& old, double eps) {
  const Eigen::MatrixXd cov = pred.covariance();
  const Eigen::MatrixXd cov_old = old.covariance();
  const bool diagonal = pred.is_diagonal() && old.is_diagonal();
  switch (kind) {
    case SimilarityKind::FrobeniusMetric:
      return oracle_cov_frobenius(cov, cov_old, eps, diagonal);
    case SimilarityKind::Wasserstein2Metric:
      if (diagonal) {
        return oracle_cov_w2_diagonal(cov.diagonal(), cov_old.diagonal(), eps)
            .asDiagonal();
      }
      return oracle_cov_w2_commuting(cov, cov_old, eps);
    case SimilarityKind::ReverseKL:
      return oracle_cov_kl(cov, cov_old, eps, diagonal);
  }
  throw std::logic_error("unknown similarity kind");
}

struct OptimalitySweep {
  int instances = 0;
  double max_gap = 0.0;  // max over instances of parameter distance
};

inline OptimalitySweep optimality_sweep(SimilarityKind kind, int trials,
                                        std::uint64_t seed, int max_dim = 4) {
  Rng rng(seed);
  OptimalitySweep out;
  for (int i = 0; i < trials; ++i) {
    const int d = 1 + i % max_dim;
    const bool full = (i / max_dim) % 2 == 1;
    const GaussianParams old = random_gaussian(rng, d, full);
    const GaussianParams pred = perturb(rng, old, 0.4);
    TrustRegionConfig cfg;
    cfg.kind = kind;
    cfg.eps_mean = 0.02;
    cfg.eps_cov = 0.01;
    const ProjectionResult r = trust_region_forward(pred, old, cfg);
    const Eigen::VectorXd mean_oracle =
        oracle_mean(pred.mean(), old.mean(), old.covariance(), cfg.eps_mean);
    const Eigen::MatrixXd cov_oracle = oracle_cov(kind, pred, old, cfg.eps_cov);
    const double gap = std::sqrt(
        (r.projected.mean() - mean_oracle).squaredNorm() +
        (r.projected.covariance() - cov_oracle).squaredNorm());
    out.max_gap = std::max(out.max_gap, gap);
    ++out.instances;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Entropy bounds: H~ >= min(H, H_old) for FROB / W2, H~ <= max for KL.

struct EntropyBoundSweep {
  int instances = 0;
  int violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();
};

inline EntropyBoundSweep entropy_bound_sweep(SimilarityKind kind,
                                             const std::vector<int>& dims,
                                             int trials, std::uint64_t seed) {
  Rng rng(seed);
  EntropyBoundSweep out;
  for (int i = 0; i < trials; ++i) {
    const int d = dims[i % dims.size()];
    const bool full = (i / dims.size()) % 2 == 1;
    const GaussianParams old = random_gaussian(rng, d, full);
    const GaussianParams pred = random_gaussian(rng, d, full);
    const TrustRegionConfig cfg = random_config(rng, kind);
    const ProjectionResult r = trust_region_forward(pred, old, cfg);
    const double h = entropy(r.projected);
    const double slack =
        kind == SimilarityKind::ReverseKL
            ? std::max(entropy(pred), entropy(old)) - h
            : h - std::min(entropy(pred), entropy(old));
    out.min_slack = std::min(out.min_slack, slack);
    if (slack < -1e-9) ++out.violations;
    ++out.instances;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference checks of trust_region_backward.

/// Coordinates of a prediction: mean, then the variances (diagonal) or the
/// upper triangle of the covariance (full). Off-diagonal coordinates move
/// both symmetric entries.
inline Eigen::VectorXd layer_coordinates(const GaussianParams& p) {
  const int d = p.dim();
  if (p.is_diagonal()) {
    Eigen::VectorXd x(2 * d);
    x << p.mean(), p.variances();
    return x;
  }
  const Eigen::MatrixXd cov = p.covariance();
  Eigen::VectorXd x(d + d * (d + 1) / 2);
  x.head(d) = p.mean();
  int k = d;
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) x(k++) = cov(i, j);
  return x;
}

inline GaussianParams layer_from_coordinates(const Eigen::VectorXd& x, int d,
                                             bool diagonal) {
  if (diagonal) return GaussianParams::diagonal(x.head(d), x.tail(d));
  Eigen::MatrixXd cov(d, d);
  int k = d;
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) cov(i, j) = cov(j, i) = x(k++);
  return GaussianParams::full(x.head(d), cov);
}

/// Analytic gradient in layer coordinates from a GaussianGrad.
inline Eigen::VectorXd grad_in_coordinates(const GaussianGrad& g, bool diagonal) {
  const int d = static_cast<int>(g.mean.size());
  if (diagonal) {
    Eigen::VectorXd x(2 * d);
    x << g.mean, g.cov.diagonal();
    return x;
  }
  Eigen::VectorXd x(d + d * (d + 1) / 2);
  x.head(d) = g.mean;
  int k = d;
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) x(k++) = i == j ? g.cov(i, i) : 2.0 * g.cov(i, j);
  return x;
}

/// True when every branch of the forward pass is at least `margin` (relative)
/// away from its switching point, so central differences stay on one branch.
inline bool away_from_boundaries(const GaussianParams& pred,
                                 const GaussianParams& old,
                                 const TrustRegionConfig& cfg, int step,
                                 double margin = 0.02) {
  const TrustRegionValue v = trust_region_value(cfg.kind, pred, old);
  if (std::abs(v.mean / cfg.eps_mean - 1.0) < margin) return false;
  if (std::abs(v.cov / cfg.eps_cov - 1.0) < margin) return false;
  if (cfg.entropy) {
    TrustRegionConfig no_entropy = cfg;
    no_entropy.entropy.reset();
    const double h = entropy(trust_region_forward(pred, old, no_entropy).projected);
    if (std::abs(h - entropy_target(*cfg.entropy, step)) < margin) return false;
  }
  return true;
}

struct GradcheckPoint {
  double rel_error = 0.0;
  bool mean_projected = false;
  bool cov_projected = false;
  bool entropy_scaled = false;
};

/// Compares trust_region_backward against central differences of
/// L = <a, mu~> + <B, Sigma~> with random a and symmetric B.
inline GradcheckPoint layer_gradcheck(const GaussianParams& pred,
                                      const GaussianParams& old,
                                      const TrustRegionConfig& cfg, int step,
                                      Rng& rng, double h = 1e-6) {
  const int d = pred.dim();
  const bool diagonal = pred.is_diagonal() && old.is_diagonal();
  const GaussianParams p = diagonal ? pred : pred.as_full();
  const Eigen::VectorXd a = random_vector(rng, d);
  Eigen::MatrixXd b = random_vector(rng, d * d).reshaped(d, d);
  b = DenseAlgebra::sym(b);
  if (diagonal) b = Eigen::MatrixXd(b.diagonal().asDiagonal());

  const ProjectionResult r = trust_region_forward(p, old, cfg, step);
  const GaussianGrad g = trust_region_backward(r, GaussianGrad{a, b});
  const Eigen::VectorXd analytic = grad_in_coordinates(g, diagonal);

  auto loss = [&](const Eigen::VectorXd& x) {
    const ProjectionResult y =
        trust_region_forward(layer_from_coordinates(x, d, diagonal), old, cfg, step);
    return a.dot(y.projected.mean()) +
           (b.array() * y.projected.covariance().array()).sum();
  };
  const Eigen::VectorXd numeric = numerical_gradient(loss, layer_coordinates(p), h);
  return {relative_error(analytic, numeric, 1e-6), !r.mean_skipped, !r.cov_skipped,
          r.entropy_scaled};
}

struct GradcheckSweep {
  int points = 0;
  int failures = 0;
  double max_rel_error = 0.0;
};

enum class GradcheckMode { Layer, Entropy };

/// `points` gradchecks at random instances that are away from branch
/// switches. Layer mode requires both projections active; Entropy mode adds a
/// schedule whose target forces the scaling branch. Dimensions start at 2: in
/// 1-D an active projection lands on a point fixed by the old policy, so the
/// Jacobian vanishes and a relative comparison only measures rounding.
inline GradcheckSweep layer_gradcheck_sweep(SimilarityKind kind, GradcheckMode mode,
                                            int points, std::uint64_t seed,
                                            double tolerance = 1e-4,
                                            int max_dim = 4) {
  Rng rng(seed);
  GradcheckSweep out;
  int attempt = 0;
  while (out.points < points) {
    if (++attempt > 100 * points) throw std::runtime_error("gradcheck: no instances");
    const int d = 2 + attempt % (max_dim - 1);
    const bool full = attempt % 2 == 1;
    const GaussianParams old = random_gaussian(rng, d, full);
    const GaussianParams pred = perturb(rng, old, 0.3);
    TrustRegionConfig cfg;
    cfg.kind = kind;
    cfg.eps_mean = 0.01;
    cfg.eps_cov = 0.005;
    const int step = 3;
    if (mode == GradcheckMode::Entropy) {
      const double h_old = entropy(old);
      cfg.entropy = EntropySchedule{h_old + 0.3, h_old - 1.0, 0.5, 100};
    }
    if (!away_from_boundaries(pred, old, cfg, step)) continue;
    const ProjectionResult r = trust_region_forward(pred, old, cfg, step);
    if (r.mean_skipped || r.cov_skipped) continue;
    if (mode == GradcheckMode::Entropy && !r.entropy_scaled) continue;
    const GradcheckPoint pt = layer_gradcheck(pred, old, cfg, step, rng);
    ++out.points;
    out.max_rel_error = std::max(out.max_rel_error, pt.rel_error);
    if (!(pt.rel_error < tolerance)) ++out.failures;
  }
  return out;
}

/// Gradcheck of the mean projection alone.
inline GradcheckSweep mean_gradcheck_sweep(int points, std::uint64_t seed,
                                           double tolerance = 1e-4) {
  Rng rng(seed);
  GradcheckSweep out;
  while (out.points < points) {
    const int d = 2 + out.points % 3;
    const GaussianParams old = random_gaussian(rng, d, out.points % 2 == 1);
    const Eigen::VectorXd mu = old.mean() + old.cholesky() * random_vector(rng, d, 0.5);
    const double eps = 0.01;
    const double m = mahalanobis_sq(mu, old.mean(), old);
    if (std::abs(m / eps - 1.0) < 0.02) continue;
    const Eigen::VectorXd up = random_vector(rng, d);
    const MeanProjection mp = project_mean(mu, old.mean(), old, eps);
    const Eigen::VectorXd analytic =
        project_mean_backward(mu, old.mean(), old, eps, mp.skipped, up);
    const Eigen::VectorXd numeric = numerical_gradient(
        [&](const Eigen::VectorXd& x) {
          return up.dot(project_mean(x, old.mean(), old, eps).mean);
        },
        mu);
    const double err = relative_error(analytic, numeric, 1e-6);
    ++out.points;
    out.max_rel_error = std::max(out.max_rel_error, err);
    if (!(err < tolerance)) ++out.failures;
  }
  return out;
}

}  // namespace trl::verify
