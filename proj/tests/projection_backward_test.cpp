#include <cmath>

#include <gtest/gtest.h>

#include "trl/projection.hpp"
#include "trl/verify/layer_checks.hpp"

namespace trl {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST(MeanBackward, ScalarGoldenCase) {
  // mu~ = sqrt(eps / m) mu for mu_old = 0, so d mu~ / d mu = 0 when the
  // constraint is active in 1-D.
  const auto old = GaussianParams::diagonal(VectorXd::Zero(1), VectorXd::Ones(1));
  const VectorXd mu = VectorXd::Constant(1, 2.0);
  const VectorXd g = project_mean_backward(mu, VectorXd::Zero(1), old, 1.0, false,
                                           VectorXd::Ones(1));
  const double h = 1e-5;
  const double fd = (project_mean(VectorXd::Constant(1, 2.0 + h), VectorXd::Zero(1), old, 1.0).mean(0) -
                     project_mean(VectorXd::Constant(1, 2.0 - h), VectorXd::Zero(1), old, 1.0).mean(0)) /
                    (2.0 * h);
  EXPECT_NEAR(g(0), 0.0, 1e-15);
  EXPECT_NEAR(fd, g(0), 1e-6);
}

TEST(MeanBackward, RandomPoints) {
  const auto sweep = verify::mean_gradcheck_sweep(50, 1);
  EXPECT_EQ(sweep.failures, 0) << sweep.max_rel_error;
}

TEST(LayerBackward, SkippedBranchPassesThrough) {
  verify::Rng rng(2);
  for (auto kind : verify::kAllKinds) {
    const auto old = verify::random_gaussian(rng, 3, false);
    TrustRegionConfig cfg;
    cfg.kind = kind;
    const auto r = trust_region_forward(old, old, cfg);
    const GaussianGrad up{verify::random_vector(rng, 3),
                          MatrixXd(verify::random_vector(rng, 3).asDiagonal())};
    const GaussianGrad g = trust_region_backward(r, up);
    EXPECT_EQ(g.mean, up.mean);
    EXPECT_EQ(g.cov, up.cov);
  }
}

TEST(LayerBackward, Errors) {
  ProjectionResult empty;
  EXPECT_THROW(trust_region_backward(empty, GaussianGrad::zero(2)), std::logic_error);
  const auto p = GaussianParams::diagonal(VectorXd::Zero(2), VectorXd::Ones(2));
  const auto r = trust_region_forward(p, p, TrustRegionConfig{});
  EXPECT_THROW(trust_region_backward(r, GaussianGrad::zero(3)), std::invalid_argument);
}

class LayerGradcheck : public ::testing::TestWithParam<SimilarityKind> {};

TEST_P(LayerGradcheck, ProjectionPaths) {
  const auto sweep =
      verify::layer_gradcheck_sweep(GetParam(), verify::GradcheckMode::Layer, 50, 3);
  EXPECT_EQ(sweep.points, 50);
  EXPECT_EQ(sweep.failures, 0) << "max rel err " << sweep.max_rel_error;
}

TEST_P(LayerGradcheck, WithEntropyScaling) {
  const auto sweep =
      verify::layer_gradcheck_sweep(GetParam(), verify::GradcheckMode::Entropy, 50, 4);
  EXPECT_EQ(sweep.failures, 0) << "max rel err " << sweep.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(AllKinds, LayerGradcheck, ::testing::ValuesIn(verify::kAllKinds),
                         [](const auto& info) { return to_string(info.param); });

TEST(LayerBackward, KlDiagonal4DFullJacobian) {
  verify::Rng rng(5);
  const auto old = verify::random_gaussian(rng, 4, false);
  const auto pred = verify::perturb(rng, old, 0.5);
  TrustRegionConfig cfg;
  cfg.kind = SimilarityKind::ReverseKL;
  cfg.eps_mean = 0.01;
  cfg.eps_cov = 0.01;
  const auto r = trust_region_forward(pred, old, cfg);
  ASSERT_FALSE(r.cov_skipped);
  ASSERT_FALSE(r.mean_skipped);
  const VectorXd x0 = verify::layer_coordinates(pred);
  auto outputs = [&](const VectorXd& x) {
    const auto y = trust_region_forward(verify::layer_from_coordinates(x, 4, true), old, cfg);
    return verify::layer_coordinates(y.projected);
  };
  // Row k of the Jacobian via one VJP with the k-th unit upstream vector.
  MatrixXd jac_an(8, 8), jac_fd(8, 8);
  for (int k = 0; k < 8; ++k) {
    GaussianGrad up = GaussianGrad::zero(4);
    if (k < 4) up.mean(k) = 1.0; else up.cov(k - 4, k - 4) = 1.0;
    jac_an.row(k) = verify::grad_in_coordinates(trust_region_backward(r, up), true);
  }
  const double h = 1e-6;
  for (int j = 0; j < 8; ++j) {
    VectorXd xp = x0, xm = x0;
    xp(j) += h;
    xm(j) -= h;
    jac_fd.col(j) = (outputs(xp) - outputs(xm)) / (2.0 * h);
  }
  EXPECT_LT((jac_an - jac_fd).norm() / jac_fd.norm(), 1e-4);
}

}  // namespace
}  // namespace trl
