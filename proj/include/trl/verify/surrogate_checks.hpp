#pragma once

// End-to-end gradcheck of the projected surrogate: network -> projection
// layer -> importance ratio, plus the regression penalty with its targets
// held fixed.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "trl/policy_net.hpp"
#include "trl/rl.hpp"
#include "trl/verify/finite_diff.hpp"
#include "trl/verify/layer_checks.hpp"
#include "trl/verify/random_instances.hpp"

namespace trl::verify {

/// A toy problem: a tiny policy, `states` random observations, old
/// per-state Gaussians perturbed away from the current outputs so the
/// projections are active, actions drawn from the old policy.
struct ToySurrogate {
  GaussianPolicy policy;
  Eigen::VectorXd theta;
  RolloutBatch batch;
  TrustRegionConfig cfg;
};

inline ToySurrogate make_toy_surrogate(Rng& rng, SimilarityKind kind, CovarianceMode mode,
                                       int states = 3, int act_dim = 2) {
  PolicySpec spec;
  spec.obs_dim = 3;
  spec.act_dim = act_dim;
  spec.hidden = {4};
  spec.covariance_mode = mode;
  ToySurrogate t{GaussianPolicy(spec), {}, {}, {}};
  t.theta = t.policy.init(rng) + random_vector(rng, t.policy.num_params(), 0.3);
  RolloutBatch& b = t.batch;
  b.obs = random_vector(rng, 3 * states).reshaped(3, states);
  const PolicyOutput out = t.policy.forward(t.theta, b.obs);
  b.actions.resize(act_dim, states);
  b.old_mean.resize(act_dim, states);
  b.old_var.resize(act_dim, states);
  b.log_probs.resize(states);
  for (int i = 0; i < states; ++i) {
    const GaussianParams old = perturb(rng, out.at(i), 0.3);
    b.old_mean.col(i) = old.mean();
    b.old_var.col(i) = old.variances();
    b.actions.col(i) = sample(old, rng);
    b.log_probs(i) = log_prob(old, b.actions.col(i));
  }
  b.rewards = Eigen::VectorXd::Zero(states);
  b.dones.assign(states, 0);
  b.values = Eigen::VectorXd::Zero(states);
  b.advantages = random_vector(rng, states);
  b.returns = b.advantages;
  t.cfg.kind = kind;
  t.cfg.eps_mean = 0.01;
  t.cfg.eps_cov = 0.005;
  std::uniform_real_distribution<double> log_alpha(std::log(0.1), std::log(10.0));
  t.cfg.penalty_alpha = std::exp(log_alpha(rng));
  return t;
}

inline bool toy_away_from_boundaries(const ToySurrogate& t) {
  const PolicyOutput out = t.policy.forward(t.theta, t.batch.obs);
  for (Eigen::Index i = 0; i < t.batch.size(); ++i) {
    if (!away_from_boundaries(out.at(i), t.batch.old_policy(i), t.cfg, 0)) return false;
  }
  return true;
}

/// Relative error between surrogate_loss's gradient and central differences.
inline double surrogate_gradcheck(const ToySurrogate& t, double h = 1e-6) {
  std::vector<ProjectionResult> proj;
  const LossResult res = surrogate_loss(t.policy, t.theta, t.batch, t.cfg, 0, nullptr, &proj);
  std::vector<GaussianParams> targets;
  for (const auto& p : proj) targets.push_back(p.projected);
  const Eigen::VectorXd numeric = numerical_gradient(
      [&](const Eigen::VectorXd& th) {
        return surrogate_loss(t.policy, th, t.batch, t.cfg, 0, &targets).loss;
      },
      t.theta, h);
  return relative_error(res.grad, numeric, 1e-6);
}

/// `points` checks over all kinds and both covariance modes.
inline GradcheckSweep surrogate_gradcheck_sweep(SimilarityKind kind, int points,
                                                std::uint64_t seed,
                                                double tolerance = 1e-3) {
  Rng rng(seed);
  GradcheckSweep out;
  int attempt = 0;
  while (out.points < points) {
    if (++attempt > 100 * points) throw std::runtime_error("gradcheck: no instances");
    const auto mode = attempt % 2 ? CovarianceMode::ContextualDiagonal
                                  : CovarianceMode::GlobalDiagonal;
    const ToySurrogate t = make_toy_surrogate(rng, kind, mode);
    if (!toy_away_from_boundaries(t)) continue;
    const double err = surrogate_gradcheck(t);
    ++out.points;
    out.max_rel_error = std::max(out.max_rel_error, err);
    if (!(err < tolerance)) ++out.failures;
  }
  return out;
}

}  // namespace trl::verify
