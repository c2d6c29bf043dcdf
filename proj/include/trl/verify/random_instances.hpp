#pragma once

// Random Gaussian pairs for property checks.

#include <random>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "trl/gauss.hpp"

namespace trl::verify {

using Rng = std::mt19937_64;

inline Eigen::VectorXd random_vector(Rng& rng, int d, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = n(rng);
  return v;
}

inline Eigen::MatrixXd random_rotation(Rng& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = n(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ();
  return q;
}

/// SPD matrix with log-eigenvalues uniform in [log lo, log hi].
inline Eigen::MatrixXd random_spd(Rng& rng, int d, double lo = 0.2,
                                  double hi = 3.0) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  Eigen::VectorXd lam(d);
  for (int i = 0; i < d; ++i) lam(i) = std::exp(u(rng));
  const Eigen::MatrixXd q = random_rotation(rng, d);
  return DenseAlgebra::sym(q * lam.asDiagonal() * q.transpose());
}

inline Eigen::VectorXd random_variances(Rng& rng, int d, double lo = 0.2,
                                        double hi = 3.0) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v(i) = std::exp(u(rng));
  return v;
}

inline GaussianParams random_gaussian(Rng& rng, int d, bool full) {
  Eigen::VectorXd mu = random_vector(rng, d);
  if (full) return GaussianParams::full(std::move(mu), random_spd(rng, d));
  return GaussianParams::diagonal(std::move(mu), random_variances(rng, d));
}

/// A prediction near `old`: mean offset and multiplicative covariance
/// perturbation scaled by `spread`, so that both skipped and projected
/// instances occur.
inline GaussianParams perturb(Rng& rng, const GaussianParams& old,
                              double spread) {
  const int d = old.dim();
  Eigen::VectorXd mu =
      old.mean() + old.cholesky() * random_vector(rng, d, spread);
  if (old.is_diagonal()) {
    Eigen::VectorXd logs = random_vector(rng, d, spread);
    return GaussianParams::diagonal(
        std::move(mu), old.variances().cwiseProduct(logs.array().exp().matrix()));
  }
  Eigen::MatrixXd x = random_vector(rng, d * d, spread).reshaped(d, d);
  x = DenseAlgebra::sym(x);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x);
  const Eigen::MatrixXd e = es.eigenvectors() *
                            es.eigenvalues().array().exp().matrix().asDiagonal() *
                            es.eigenvectors().transpose();
  const Eigen::MatrixXd root = old.sqrt_cov();
  return GaussianParams::full(std::move(mu),
                              DenseAlgebra::sym(root * e * root));
}

}  // namespace trl::verify
