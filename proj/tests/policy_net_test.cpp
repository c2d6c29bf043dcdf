#include "trl/policy_net.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

namespace trl {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

PolicySpec small_spec(CovarianceMode mode) {
  PolicySpec s;
  s.obs_dim = 3;
  s.act_dim = 2;
  s.hidden = {5, 4};
  s.covariance_mode = mode;
  s.init_log_std = -0.3;
  return s;
}

MatrixXd random_obs(std::mt19937_64& rng, int dim, int n) {
  std::normal_distribution<double> z;
  MatrixXd x(dim, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < dim; ++i) x(i, j) = z(rng);
  return x;
}

TEST(PolicyNet, ZeroWeightsGiveBiasOutputs) {
  GaussianPolicy pi(small_spec(CovarianceMode::GlobalDiagonal));
  VectorXd theta = VectorXd::Zero(pi.num_params());
  theta.segment(pi.layout().segment("log_std").offset, 2) << 0.5, -1.0;
  std::mt19937_64 rng(1);
  const auto out = pi.forward(theta, random_obs(rng, 3, 4));
  EXPECT_TRUE(out.mean.isZero());
  for (int j = 0; j < 4; ++j) {
    EXPECT_NEAR(out.variance(0, j), std::exp(1.0), 1e-14);
    EXPECT_NEAR(out.variance(1, j), std::exp(-2.0), 1e-14);
  }
}

TEST(PolicyNet, InitHasSmallMeanAndConfiguredStd) {
  for (auto mode : {CovarianceMode::GlobalDiagonal, CovarianceMode::ContextualDiagonal}) {
    GaussianPolicy pi(small_spec(mode));
    std::mt19937_64 rng(2);
    const VectorXd theta = pi.init(rng);
    const auto out = pi.forward(theta, random_obs(rng, 3, 16));
    EXPECT_LT(out.mean.cwiseAbs().maxCoeff(), 0.1);
    const double expected = std::exp(-0.6);
    EXPECT_NEAR(out.variance.mean(), expected, 0.05 * expected) << to_string(mode);
  }
}

TEST(PolicyNet, BatchMatchesSingles) {
  GaussianPolicy pi(small_spec(CovarianceMode::ContextualDiagonal));
  std::mt19937_64 rng(3);
  const VectorXd theta = pi.init(rng);
  const MatrixXd obs = random_obs(rng, 3, 7);
  const auto batch = pi.forward(theta, obs);
  for (int j = 0; j < 7; ++j) {
    const auto one = pi.forward(theta, obs.col(j));
    EXPECT_LT((one.mean.col(0) - batch.mean.col(j)).norm(), 1e-14);
    EXPECT_LT((one.variance.col(0) - batch.variance.col(j)).norm(), 1e-14);
  }
}

TEST(PolicyNet, RejectsBadShapes) {
  GaussianPolicy pi(small_spec(CovarianceMode::GlobalDiagonal));
  EXPECT_THROW(pi.forward(VectorXd::Zero(3), MatrixXd::Zero(3, 1)), std::invalid_argument);
  EXPECT_THROW(pi.forward(VectorXd::Zero(pi.num_params()), MatrixXd::Zero(2, 1)),
               std::invalid_argument);
  PolicySpec bad;
  bad.act_dim = 0;
  EXPECT_THROW(GaussianPolicy{bad}, std::invalid_argument);
  EXPECT_THROW(covariance_mode_from_string("full"), std::invalid_argument);
}

// Central differences of L = <A, mean> + <B, var> against the backward pass.
class PolicyGradcheck : public ::testing::TestWithParam<CovarianceMode> {};

TEST_P(PolicyGradcheck, MatchesFiniteDifferences) {
  GaussianPolicy pi(small_spec(GetParam()));
  std::mt19937_64 rng(4);
  VectorXd theta = pi.init(rng);
  // Larger head weights so every parameter has a visible effect.
  std::normal_distribution<double> z;
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += 0.3 * z(rng);
  const MatrixXd obs = random_obs(rng, 3, 5);
  const MatrixXd a = random_obs(rng, 2, 5), b = random_obs(rng, 2, 5);
  auto loss = [&](const VectorXd& t) {
    const auto o = pi.forward(t, obs);
    return (a.array() * o.mean.array()).sum() + (b.array() * o.variance.array()).sum();
  };
  const VectorXd g = pi.backward(theta, pi.forward(theta, obs), a, b);
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    VectorXd tp = theta, tm = theta;
    tp(i) += h;
    tm(i) -= h;
    const double fd = (loss(tp) - loss(tm)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - g(i)) / std::max(1.0, std::abs(fd)));
  }
  EXPECT_LT(worst, 1e-6);
}

INSTANTIATE_TEST_SUITE_P(Modes, PolicyGradcheck,
                         ::testing::Values(CovarianceMode::GlobalDiagonal,
                                           CovarianceMode::ContextualDiagonal),
                         [](const auto& info) { return to_string(info.param); });

TEST(ValueNet, MatchesFiniteDifferences) {
  ValueFunction vf(3, {6, 4});
  std::mt19937_64 rng(5);
  const VectorXd theta = vf.init(rng);
  const MatrixXd obs = random_obs(rng, 3, 6);
  const Eigen::RowVectorXd w = random_obs(rng, 1, 6);
  auto loss = [&](const VectorXd& t) { return w.dot(vf.forward(t, obs).values); };
  const VectorXd g = vf.backward(theta, vf.forward(theta, obs), w);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    VectorXd tp = theta, tm = theta;
    tp(i) += h;
    tm(i) -= h;
    EXPECT_NEAR((loss(tp) - loss(tm)) / (2.0 * h), g(i), 1e-7) << i;
  }
}

TEST(Adam, HandTraceTwoSteps) {
  Adam opt(1, {0.1, 0.9, 0.999, 1e-8});
  VectorXd x = VectorXd::Constant(1, 1.0);
  opt.step(x, VectorXd::Constant(1, 2.0));
  // First step has bias-corrected m / sqrt(v) = sign(g).
  const double x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(x(0), x1, 1e-15);
  opt.step(x, VectorXd::Constant(1, -1.0));
  const double m = 0.9 * 0.2 + 0.1 * -1.0;
  const double v = 0.999 * 0.004 + 0.001 * 1.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(x(0), x1 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
  EXPECT_EQ(opt.steps(), 2);
}

TEST(ObsNormalizer, MatchesPooledMoments) {
  std::mt19937_64 rng(6);
  MatrixXd all = random_obs(rng, 2, 300);
  all.row(0).array() = all.row(0).array() * 3.0 + 5.0;
  ObsNormalizer norm(2);
  norm.update(all.leftCols(100));
  norm.update(all.middleCols(100, 150));
  norm.update(all.rightCols(50));
  const VectorXd mean = all.rowwise().mean();
  const VectorXd var = (all.colwise() - mean).array().square().rowwise().mean();
  EXPECT_LT((norm.mean() - mean).norm(), 1e-5);
  EXPECT_LT((norm.var() - var).norm(), 1e-4);
  const MatrixXd z = norm.normalize(all);
  EXPECT_LT(z.rowwise().mean().norm(), 1e-5);
}

TEST(ObsNormalizer, Clips) {
  ObsNormalizer norm(1, 2.0);
  const MatrixXd z = norm.normalize(MatrixXd::Constant(1, 1, 50.0));
  EXPECT_EQ(z(0, 0), 2.0);
}

TEST(Checkpoint, RoundTrip) {
  Checkpoint c;
  c.spec = small_spec(CovarianceMode::ContextualDiagonal);
  c.value_hidden = {7};
  std::mt19937_64 rng(7);
  c.policy_params = GaussianPolicy(c.spec).init(rng);
  c.value_params = ValueFunction(3, c.value_hidden).init(rng);
  c.obs_count = 12.5;
  c.obs_mean = VectorXd::LinSpaced(3, -1.0, 1.0);
  c.obs_var = VectorXd::Constant(3, 0.3);
  const auto path = (std::filesystem::temp_directory_path() / "trl_ckpt_test.json").string();
  save_checkpoint(c, path);
  const Checkpoint r = load_checkpoint(path);
  std::remove(path.c_str());
  EXPECT_EQ(r.spec.hidden, c.spec.hidden);
  EXPECT_EQ(r.spec.covariance_mode, c.spec.covariance_mode);
  EXPECT_EQ(r.policy_params, c.policy_params);
  EXPECT_EQ(r.value_params, c.value_params);
  EXPECT_EQ(r.obs_mean, c.obs_mean);
  EXPECT_EQ(r.obs_count, c.obs_count);
}

TEST(Checkpoint, RejectsMismatch) {
  Checkpoint c;
  c.spec = small_spec(CovarianceMode::GlobalDiagonal);
  c.value_hidden = {4};
  c.policy_params = VectorXd::Zero(3);
  c.value_params = VectorXd::Zero(ValueFunction(3, {4}).num_params());
  c.obs_mean = c.obs_var = VectorXd::Zero(3);
  EXPECT_THROW(checkpoint_from_json(checkpoint_to_json(c)), std::runtime_error);
  auto j = checkpoint_to_json(c);
  j["version"] = 2;
  EXPECT_THROW(checkpoint_from_json(j), std::runtime_error);
}

}  // namespace
}  // namespace trl
