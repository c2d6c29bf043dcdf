#pragma once

// Two interchangeable algebras over covariance-like objects: dense symmetric
// matrices and diagonals stored as vectors. Projection layers and the KL dual
// are written once against this interface and instantiated for both.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>
#include <type_traits>

namespace trl {

/// Eigenvalue floor used by every symmetric matrix square root.
inline constexpr double kSqrtEigenFloor = 1e-12;

/// Symmetric square root via eigendecomposition; eigenvalues are floored at
/// kSqrtEigenFloor before taking the root.
inline Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("symmetric_sqrt: eigendecomposition failed");
  }
  const Eigen::VectorXd root =
      es.eigenvalues().cwiseMax(kSqrtEigenFloor).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

struct DenseAlgebra {
  using Mat = Eigen::MatrixXd;

  static int dim(const Mat& a) { return static_cast<int>(a.rows()); }
  static Mat identity(int d) { return Mat::Identity(d, d); }
  static double inner(const Mat& a, const Mat& b) {
    return (a.array() * b.array()).sum();
  }
  static double trace(const Mat& a) { return a.trace(); }
  static Mat mul(const Mat& a, const Mat& b) { return a * b; }
  static Mat sym(const Mat& a) { return 0.5 * (a + a.transpose()); }

  static Mat inv(const Mat& a) {
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
      throw std::domain_error("matrix is not positive definite");
    }
    return sym(llt.solve(identity(dim(a))));
  }

  static double logdet(const Mat& a) {
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) {
      throw std::domain_error("matrix is not positive definite");
    }
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }

  static Mat sqrtm(const Mat& a) { return symmetric_sqrt(a); }

  /// a * b * a for symmetric a, b.
  static Mat sandwich(const Mat& a, const Mat& b) { return sym(a * b * a); }

  /// Adjoint of the map dS -> dS*S + S*dS: solves S X + X S = g.
  static Mat sqrt_backward(const Mat& root, const Mat& g) {
    Eigen::SelfAdjointEigenSolver<Mat> es(root);
    const Mat& u = es.eigenvectors();
    const Eigen::VectorXd& lam = es.eigenvalues();
    Mat x = u.transpose() * sym(g) * u;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < x.cols(); ++j) {
        x(i, j) /= lam(i) + lam(j);
      }
    }
    return sym(u * x * u.transpose());
  }

  static double min_eigenvalue(const Mat& a) {
    return Eigen::SelfAdjointEigenSolver<Mat>(a, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .minCoeff();
  }
};

struct DiagAlgebra {
  using Mat = Eigen::VectorXd;

  static int dim(const Mat& a) { return static_cast<int>(a.size()); }
  static Mat identity(int d) { return Mat::Ones(d); }
  static double inner(const Mat& a, const Mat& b) { return a.dot(b); }
  static double trace(const Mat& a) { return a.sum(); }
  static Mat mul(const Mat& a, const Mat& b) { return a.cwiseProduct(b); }
  static Mat sym(const Mat& a) { return a; }

  static Mat inv(const Mat& a) {
    if ((a.array() <= 0.0).any()) {
      throw std::domain_error("diagonal covariance is not positive definite");
    }
    return a.cwiseInverse();
  }

  static double logdet(const Mat& a) {
    if ((a.array() <= 0.0).any()) {
      throw std::domain_error("diagonal covariance is not positive definite");
    }
    return a.array().log().sum();
  }

  static Mat sqrtm(const Mat& a) {
    return a.cwiseMax(kSqrtEigenFloor).cwiseSqrt();
  }

  static Mat sandwich(const Mat& a, const Mat& b) {
    return a.cwiseProduct(b).cwiseProduct(a);
  }

  static Mat sqrt_backward(const Mat& root, const Mat& g) {
    return g.cwiseQuotient(2.0 * root);
  }

  static double min_eigenvalue(const Mat& a) { return a.minCoeff(); }
};

template <class M>
struct algebra_for;
template <>
struct algebra_for<Eigen::MatrixXd> {
  using type = DenseAlgebra;
};
template <>
struct algebra_for<Eigen::VectorXd> {
  using type = DiagAlgebra;
};

template <class M>
using algebra_for_t = typename algebra_for<std::decay_t<M>>::type;

}  // namespace trl
