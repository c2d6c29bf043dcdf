#pragma once

// Gaussian policy outputs: representation, densities, sampling, entropy and
// the similarity measures used by the trust regions.

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "trl/cov_algebra.hpp"

namespace trl {

/// Lower bound applied to diagonal variances on construction.
inline constexpr double kVarianceFloor = 1e-8;

enum class SimilarityKind { ReverseKL, Wasserstein2Metric, FrobeniusMetric };

inline std::string to_string(SimilarityKind kind) {
  switch (kind) {
    case SimilarityKind::ReverseKL:
      return "KL";
    case SimilarityKind::Wasserstein2Metric:
      return "W2";
    case SimilarityKind::FrobeniusMetric:
      return "FROB";
  }
  return "?";
}

inline SimilarityKind similarity_kind_from_string(const std::string& s) {
  if (s == "KL") return SimilarityKind::ReverseKL;
  if (s == "W2") return SimilarityKind::Wasserstein2Metric;
  if (s == "FROB") return SimilarityKind::FrobeniusMetric;
  throw std::invalid_argument("unknown similarity kind '" + s + "'");
}

/// Mean and covariance of a multivariate Gaussian. The covariance is stored
/// either as a variance vector (Diagonal) or as a lower Cholesky factor
/// (Full). Values are immutable; the derived square root, precision and
/// log-determinant are filled lazily and at most once, so instances can be
/// shared across threads.
class GaussianParams {
 public:
  enum class Storage { Diagonal, Full };

  GaussianParams() = default;

  static GaussianParams diagonal(Eigen::VectorXd mean, Eigen::VectorXd var) {
    if (mean.size() != var.size() || mean.size() == 0) {
      throw std::invalid_argument("GaussianParams::diagonal: dimension mismatch");
    }
    if (!var.allFinite() || (var.array() <= 0.0).any()) {
      throw std::invalid_argument(
          "GaussianParams::diagonal: variances must be positive");
    }
    GaussianParams p;
    p.storage_ = Storage::Diagonal;
    p.mean_ = std::move(mean);
    p.var_ = var.cwiseMax(kVarianceFloor);
    p.cache_ = std::make_shared<Cache>();
    return p;
  }

  /// Full covariance from a symmetric positive-definite matrix.
  static GaussianParams full(Eigen::VectorXd mean, const Eigen::MatrixXd& cov) {
    if (cov.rows() != cov.cols() || cov.rows() != mean.size() ||
        mean.size() == 0) {
      throw std::invalid_argument("GaussianParams::full: dimension mismatch");
    }
    const Eigen::MatrixXd s = 0.5 * (cov + cov.transpose());
    if (!s.allFinite() ||
        (cov - s).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + s.cwiseAbs().maxCoeff())) {
      throw std::invalid_argument("GaussianParams::full: covariance not symmetric");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument(
          "GaussianParams::full: covariance not positive definite");
    }
    return from_cholesky(std::move(mean), llt.matrixL());
  }

  static GaussianParams from_cholesky(Eigen::VectorXd mean,
                                      const Eigen::MatrixXd& lower) {
    if (lower.rows() != lower.cols() || lower.rows() != mean.size()) {
      throw std::invalid_argument(
          "GaussianParams::from_cholesky: dimension mismatch");
    }
    if ((lower.diagonal().array() <= 0.0).any()) {
      throw std::invalid_argument(
          "GaussianParams::from_cholesky: factor diagonal must be positive");
    }
    GaussianParams p;
    p.storage_ = Storage::Full;
    p.mean_ = std::move(mean);
    p.chol_ = lower.triangularView<Eigen::Lower>();
    p.cache_ = std::make_shared<Cache>();
    return p;
  }

  int dim() const { return static_cast<int>(mean_.size()); }
  Storage storage() const { return storage_; }
  bool is_diagonal() const { return storage_ == Storage::Diagonal; }
  const Eigen::VectorXd& mean() const { return mean_; }

  /// Variance vector; Diagonal storage only.
  const Eigen::VectorXd& variances() const {
    if (!is_diagonal()) {
      throw std::logic_error("variances() requires diagonal storage");
    }
    return var_;
  }

  /// Lower Cholesky factor (for Diagonal storage: diag of standard deviations).
  Eigen::MatrixXd cholesky() const {
    if (is_diagonal()) return Eigen::MatrixXd(var_.cwiseSqrt().asDiagonal());
    return chol_;
  }

  Eigen::MatrixXd covariance() const {
    if (is_diagonal()) return Eigen::MatrixXd(var_.asDiagonal());
    return chol_ * chol_.transpose();
  }

  /// Diagonal of the covariance, valid for both storages.
  Eigen::VectorXd covariance_diagonal() const {
    if (is_diagonal()) return var_;
    return (chol_.array() * chol_.array()).rowwise().sum();
  }

  /// Symmetric matrix square root (not the Cholesky factor).
  const Eigen::MatrixXd& sqrt_cov() const { return cache().sqrt; }
  const Eigen::MatrixXd& precision() const { return cache().precision; }
  double log_det() const { return cache().log_det; }

  GaussianParams with_mean(Eigen::VectorXd mean) const {
    if (mean.size() != mean_.size()) {
      throw std::invalid_argument("with_mean: dimension mismatch");
    }
    GaussianParams p = *this;
    p.mean_ = std::move(mean);
    return p;
  }

  GaussianParams as_full() const {
    if (!is_diagonal()) return *this;
    return from_cholesky(mean_, cholesky());
  }

  /// Covariance in the algebra a projection works in.
  template <class Algebra>
  typename Algebra::Mat cov_as() const {
    if constexpr (std::is_same_v<Algebra, DiagAlgebra>) {
      return variances();
    } else {
      return covariance();
    }
  }

 private:
  struct Cache {
    std::once_flag once;
    Eigen::MatrixXd sqrt;
    Eigen::MatrixXd precision;
    double log_det = 0.0;
  };

  const Cache& cache() const {
    if (!cache_) throw std::logic_error("GaussianParams is empty");
    std::call_once(cache_->once, [this] {
      if (is_diagonal()) {
        cache_->sqrt = var_.cwiseSqrt().asDiagonal();
        cache_->precision = var_.cwiseInverse().asDiagonal();
        cache_->log_det = var_.array().log().sum();
      } else {
        const Eigen::MatrixXd cov = covariance();
        cache_->sqrt = symmetric_sqrt(cov);
        const Eigen::MatrixXd linv =
            chol_.triangularView<Eigen::Lower>().solve(
                Eigen::MatrixXd::Identity(dim(), dim()));
        cache_->precision = linv.transpose() * linv;
        cache_->log_det = 2.0 * chol_.diagonal().array().log().sum();
      }
    });
    return *cache_;
  }

  Storage storage_ = Storage::Diagonal;
  Eigen::VectorXd mean_;
  Eigen::VectorXd var_;
  Eigen::MatrixXd chol_;
  std::shared_ptr<Cache> cache_;
};

namespace detail {

inline void require_same_dim(const GaussianParams& p, const GaussianParams& q,
                             const char* what) {
  if (p.dim() != q.dim()) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch");
  }
}

}  // namespace detail

/// (a - b)^T Sigma^{-1} (a - b) with Sigma taken from `metric`.
inline double mahalanobis_sq(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                             const GaussianParams& metric) {
  if (a.size() != b.size() || a.size() != metric.dim()) {
    throw std::invalid_argument("mahalanobis_sq: dimension mismatch");
  }
  const Eigen::VectorXd diff = a - b;
  if (metric.is_diagonal()) {
    return diff.cwiseAbs2().cwiseQuotient(metric.variances()).sum();
  }
  const Eigen::VectorXd z =
      metric.cholesky().triangularView<Eigen::Lower>().solve(diff);
  return z.squaredNorm();
}

/// KL(p || q).
inline double kl_divergence(const GaussianParams& p, const GaussianParams& q) {
  detail::require_same_dim(p, q, "kl_divergence");
  const double d = p.dim();
  const double maha = mahalanobis_sq(q.mean(), p.mean(), q);
  double trace_term;
  if (p.is_diagonal() && q.is_diagonal()) {
    trace_term = p.variances().cwiseQuotient(q.variances()).sum();
  } else {
    trace_term = (q.precision().array() * p.covariance().array()).sum();
  }
  const double kl = 0.5 * (maha + q.log_det() - p.log_det() + trace_term - d);
  return std::max(kl, 0.0);
}

/// Wasserstein-2 cost |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2}).
inline double w2_distance(const GaussianParams& p, const GaussianParams& q) {
  detail::require_same_dim(p, q, "w2_distance");
  const double mean_part = (p.mean() - q.mean()).squaredNorm();
  if (p.is_diagonal() && q.is_diagonal()) {
    const Eigen::ArrayXd a = p.variances().array().sqrt();
    const Eigen::ArrayXd b = q.variances().array().sqrt();
    return mean_part + (a - b).square().sum();
  }
  const Eigen::MatrixXd& root_q = q.sqrt_cov();
  const Eigen::MatrixXd cross =
      symmetric_sqrt(DenseAlgebra::sym(root_q * p.covariance() * root_q));
  const double cov_part =
      p.covariance().trace() + q.covariance().trace() - 2.0 * cross.trace();
  return mean_part + std::max(cov_part, 0.0);
}

/// Wasserstein-2 cost measured in the metric of the old covariance Sigma_2.
inline double w2_metric_distance(const GaussianParams& p,
                                 const GaussianParams& q_old) {
  detail::require_same_dim(p, q_old, "w2_metric_distance");
  const double mean_part = mahalanobis_sq(q_old.mean(), p.mean(), q_old);
  if (p.is_diagonal() && q_old.is_diagonal()) {
    const Eigen::ArrayXd v1 = p.variances().array();
    const Eigen::ArrayXd v2 = q_old.variances().array();
    return mean_part + ((v1 + v2 - 2.0 * (v1 * v2).sqrt()) / v2).sum();
  }
  const Eigen::MatrixXd& root_old = q_old.sqrt_cov();
  const Eigen::MatrixXd& prec_old = q_old.precision();
  const Eigen::MatrixXd cross = symmetric_sqrt(
      DenseAlgebra::sym(root_old * p.covariance() * root_old));
  const double d = p.dim();
  const double cov_part = (prec_old.array() * p.covariance().array()).sum() + d -
                          2.0 * (prec_old * cross).trace();
  return mean_part + std::max(cov_part, 0.0);
}

/// Mahalanobis mean term (metric of q) plus squared Frobenius norm of the
/// covariance difference.
inline double frobenius_metric(const GaussianParams& p, const GaussianParams& q) {
  detail::require_same_dim(p, q, "frobenius_metric");
  const double mean_part = mahalanobis_sq(q.mean(), p.mean(), q);
  if (p.is_diagonal() && q.is_diagonal()) {
    return mean_part + (q.variances() - p.variances()).squaredNorm();
  }
  return mean_part + (q.covariance() - p.covariance()).squaredNorm();
}

/// 0.5 log |2 pi e Sigma|.
inline double entropy(const GaussianParams& p) {
  return 0.5 * (p.dim() * std::log(2.0 * std::numbers::pi * std::numbers::e) +
                p.log_det());
}

inline double log_prob(const GaussianParams& p, const Eigen::VectorXd& x) {
  if (x.size() != p.dim()) {
    throw std::invalid_argument("log_prob: dimension mismatch");
  }
  return -0.5 * (p.dim() * std::log(2.0 * std::numbers::pi) + p.log_det() +
                 mahalanobis_sq(x, p.mean(), p));
}

/// mu + Sigma^{1/2} z with z ~ N(0, I).
template <class Rng>
Eigen::VectorXd sample(const GaussianParams& p, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(p.dim());
  for (int i = 0; i < p.dim(); ++i) z(i) = normal(rng);
  if (p.is_diagonal()) {
    return p.mean() + p.variances().cwiseSqrt().cwiseProduct(z);
  }
  return p.mean() + p.sqrt_cov() * z;
}

}  // namespace trl
