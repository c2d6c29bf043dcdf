#pragma once

// Rollout storage, generalized advantage estimation and the policy losses:
// the projected importance-sampling surrogate with the trust-region
// regression penalty, and the PPO clipped surrogate used as a baseline.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "trl/policy_net.hpp"
#include "trl/projection.hpp"

namespace trl {

/// Aligned per-transition arrays. Columns of the matrices are transitions.
/// `old_mean` / `old_var` hold the policy that collected the data, which is
/// the reference of the trust region during the update.
struct RolloutBatch {
  Eigen::MatrixXd obs;      // normalized, as seen by the policy
  Eigen::MatrixXd actions;  // unclipped samples
  Eigen::VectorXd rewards;
  std::vector<std::uint8_t> dones;
  Eigen::VectorXd log_probs;
  Eigen::VectorXd values;
  Eigen::VectorXd advantages;
  Eigen::VectorXd returns;
  Eigen::MatrixXd old_mean;
  Eigen::MatrixXd old_var;
  double gamma = 0.99;
  double gae_lambda = 0.95;

  Eigen::Index size() const { return obs.cols(); }

  GaussianParams old_policy(Eigen::Index i) const {
    return GaussianParams::diagonal(old_mean.col(i), old_var.col(i));
  }

  void validate() const {
    const Eigen::Index n = size();
    if (actions.cols() != n || rewards.size() != n ||
        static_cast<Eigen::Index>(dones.size()) != n || log_probs.size() != n ||
        values.size() != n || advantages.size() != n || returns.size() != n ||
        old_mean.cols() != n || old_var.cols() != n) {
      throw std::logic_error("RolloutBatch: misaligned arrays");
    }
    if (!advantages.allFinite()) throw std::runtime_error("RolloutBatch: non-finite advantages");
  }

  RolloutBatch subset(const std::vector<Eigen::Index>& idx) const {
    RolloutBatch b;
    b.obs = obs(Eigen::all, idx);
    b.actions = actions(Eigen::all, idx);
    b.rewards = rewards(idx);
    for (auto i : idx) b.dones.push_back(dones[i]);
    b.log_probs = log_probs(idx);
    b.values = values(idx);
    b.advantages = advantages(idx);
    b.returns = returns(idx);
    b.old_mean = old_mean(Eigen::all, idx);
    b.old_var = old_var(Eigen::all, idx);
    b.gamma = gamma;
    b.gae_lambda = gae_lambda;
    return b;
  }
};

struct GaeResult {
  Eigen::VectorXd advantages;  // not normalized
  Eigen::VectorXd returns;     // advantages + values
};

/// delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t)
/// A_t     = delta_t + gamma lambda (1 - done_t) A_{t+1}
/// `last_value` bootstraps the final transition when it is not terminal.
inline GaeResult compute_gae(const Eigen::VectorXd& rewards, const Eigen::VectorXd& values,
                             const std::vector<std::uint8_t>& dones, double gamma,
                             double lambda, double last_value = 0.0) {
  const Eigen::Index n = rewards.size();
  if (values.size() != n || static_cast<Eigen::Index>(dones.size()) != n) {
    throw std::invalid_argument("compute_gae: misaligned inputs");
  }
  GaeResult out;
  out.advantages.resize(n);
  double next_adv = 0.0;
  double next_value = last_value;
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double delta = rewards(t) + gamma * next_value * live - values(t);
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages(t) = next_adv;
    next_value = values(t);
  }
  out.returns = out.advantages + values;
  return out;
}

/// Zero mean, unit standard deviation (population).
inline Eigen::VectorXd normalize_advantages(const Eigen::VectorXd& adv) {
  const double mean = adv.mean();
  const double std = std::sqrt((adv.array() - mean).square().mean());
  return (adv.array() - mean) / (std + 1e-8);
}

// ---------------------------------------------------------------------------
// Gradient helpers for diagonal Gaussians.

struct DiagGrad {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

/// Gradient of log N(a; mean, diag(var)) w.r.t. mean and var.
inline DiagGrad log_prob_grad(const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                              const Eigen::VectorXd& a) {
  const Eigen::ArrayXd diff = (a - mean).array();
  return {(diff / var.array()).matrix(),
          (0.5 * (diff.square() / var.array().square() - 1.0 / var.array())).matrix()};
}

/// Regression distance d(target, p) of the penalty, with `target` fixed and
/// `p` the unprojected prediction in the reference slot: Mahalanobis mean
/// term in the metric of p plus the kind's covariance term against p.
/// Returns the value and its gradient w.r.t. p (diagonal only).
inline double regression_distance(SimilarityKind kind, const GaussianParams& target,
                                  const Eigen::VectorXd& mean, const Eigen::VectorXd& var,
                                  DiagGrad* grad) {
  const Eigen::ArrayXd vp = target.variances().array();
  const Eigen::ArrayXd vq = var.array();
  const Eigen::ArrayXd diff = (mean - target.mean()).array();
  double value = (diff.square() / vq).sum();
  Eigen::ArrayXd g_mean = 2.0 * diff / vq;
  Eigen::ArrayXd g_var = -diff.square() / vq.square();
  switch (kind) {
    case SimilarityKind::FrobeniusMetric:
      value += (vp - vq).square().sum();
      g_var += 2.0 * (vq - vp);
      break;
    case SimilarityKind::Wasserstein2Metric: {
      const Eigen::ArrayXd ratio = vp / vq;
      value += (1.0 + ratio - 2.0 * ratio.sqrt()).sum();
      g_var += -vp / vq.square() + vp.sqrt() * vq.pow(-1.5);
      break;
    }
    case SimilarityKind::ReverseKL:
      value += (vp / vq - 1.0 + vq.log() - vp.log()).sum();
      g_var += -vp / vq.square() + 1.0 / vq;
      break;
  }
  if (grad) *grad = {g_mean.matrix(), g_var.matrix()};
  return value;
}

// ---------------------------------------------------------------------------
// Losses. Each returns the scalar to minimize and its gradient w.r.t. theta.

struct LossResult {
  double loss = 0.0;
  double surrogate = 0.0;  // -E[ratio * A] (or its clipped form)
  double penalty = 0.0;    // E[d(target, prediction)], before alpha
  double mean_ratio = 0.0;
  Eigen::VectorXd grad;
};

inline void require_finite_ratio(double log_ratio, Eigen::Index i) {
  if (!std::isfinite(log_ratio)) {
    throw std::runtime_error("non-finite importance ratio at transition " +
                             std::to_string(i) + " (old log-prob mismatch)");
  }
}

/// Projected surrogate with the regression penalty:
///   -E[pi~(a|s; theta) / pi_old(a|s) A] + alpha E[d(pi~(.|s; theta), pi_theta(.|s))]
/// The importance ratio is differentiated through the projection layer; the
/// penalty treats pi~ as a fixed regression target for the unprojected
/// output. `targets`, when given, replaces the targets computed from theta
/// (used to differentiate with the targets held constant). When the
/// prediction lies inside the trust region the target equals the prediction
/// and the penalty and its gradient vanish.
inline LossResult surrogate_loss(const GaussianPolicy& policy, const Eigen::VectorXd& theta,
                                 const RolloutBatch& batch, const TrustRegionConfig& cfg,
                                 int step,
                                 const std::vector<GaussianParams>* targets = nullptr,
                                 std::vector<ProjectionResult>* projections = nullptr) {
  const Eigen::Index n = batch.size();
  const PolicyOutput out = policy.forward(theta, batch.obs);
  const int act = policy.spec().act_dim;
  Eigen::MatrixXd d_mean = Eigen::MatrixXd::Zero(act, n);
  Eigen::MatrixXd d_var = Eigen::MatrixXd::Zero(act, n);
  LossResult res;
  if (projections) projections->clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    const GaussianParams pred = out.at(i);
    const ProjectionResult pr = trust_region_forward(pred, batch.old_policy(i), cfg, step);
    const GaussianParams& proj = pr.projected;
    const Eigen::VectorXd a = batch.actions.col(i);
    const double log_ratio = log_prob(proj, a) - batch.log_probs(i);
    require_finite_ratio(log_ratio, i);
    const double ratio = std::exp(log_ratio);
    const double adv = batch.advantages(i);
    res.surrogate -= ratio * adv / n;
    res.mean_ratio += ratio / n;

    const DiagGrad lg = log_prob_grad(proj.mean(), proj.variances(), a);
    const double scale = -adv * ratio / n;
    GaussianGrad up{scale * lg.mean, Eigen::MatrixXd((scale * lg.var).asDiagonal())};
    const GaussianGrad g = trust_region_backward(pr, up);
    d_mean.col(i) += g.mean;
    d_var.col(i) += g.cov.diagonal();

    if (cfg.penalty_alpha > 0.0) {
      const GaussianParams& target = targets ? (*targets)[i] : proj;
      DiagGrad pg;
      const double dist = regression_distance(cfg.kind, target, pred.mean(),
                                              pred.variances(), &pg);
      res.penalty += dist / n;
      d_mean.col(i) += (cfg.penalty_alpha / n) * pg.mean;
      d_var.col(i) += (cfg.penalty_alpha / n) * pg.var;
    }
    if (projections) projections->push_back(pr);
  }
  res.loss = res.surrogate + cfg.penalty_alpha * res.penalty;
  res.grad = policy.backward(theta, out, d_mean, d_var);
  return res;
}

/// E[d(target_i, pi_theta(.|s_i))] alone, for the full-regression ablation.
inline LossResult regression_loss(const GaussianPolicy& policy, const Eigen::VectorXd& theta,
                                  const RolloutBatch& batch, SimilarityKind kind,
                                  const std::vector<GaussianParams>& targets) {
  const Eigen::Index n = batch.size();
  const PolicyOutput out = policy.forward(theta, batch.obs);
  const int act = policy.spec().act_dim;
  Eigen::MatrixXd d_mean(act, n), d_var(act, n);
  LossResult res;
  for (Eigen::Index i = 0; i < n; ++i) {
    DiagGrad pg;
    res.penalty += regression_distance(kind, targets[i], out.mean.col(i),
                                       out.variance.col(i), &pg) / n;
    d_mean.col(i) = pg.mean / n;
    d_var.col(i) = pg.var / n;
  }
  res.loss = res.penalty;
  res.grad = policy.backward(theta, out, d_mean, d_var);
  return res;
}

/// PPO clipped surrogate on the unprojected policy:
///   -E[min(r A, clip(r, 1 - c, 1 + c) A)]
inline LossResult ppo_clip_loss(const GaussianPolicy& policy, const Eigen::VectorXd& theta,
                                const RolloutBatch& batch, double clip_range) {
  const Eigen::Index n = batch.size();
  const PolicyOutput out = policy.forward(theta, batch.obs);
  const int act = policy.spec().act_dim;
  Eigen::MatrixXd d_mean = Eigen::MatrixXd::Zero(act, n);
  Eigen::MatrixXd d_var = Eigen::MatrixXd::Zero(act, n);
  LossResult res;
  for (Eigen::Index i = 0; i < n; ++i) {
    const GaussianParams pred = out.at(i);
    const Eigen::VectorXd a = batch.actions.col(i);
    const double log_ratio = log_prob(pred, a) - batch.log_probs(i);
    require_finite_ratio(log_ratio, i);
    const double ratio = std::exp(log_ratio);
    const double adv = batch.advantages(i);
    const double clipped = std::clamp(ratio, 1.0 - clip_range, 1.0 + clip_range);
    const double unclipped_term = ratio * adv;
    const double clipped_term = clipped * adv;
    res.surrogate -= std::min(unclipped_term, clipped_term) / n;
    res.mean_ratio += ratio / n;
    // The gradient flows only when the unclipped term is the minimum.
    if (unclipped_term <= clipped_term) {
      const DiagGrad lg = log_prob_grad(pred.mean(), pred.variances(), a);
      d_mean.col(i) = (-adv * ratio / n) * lg.mean;
      d_var.col(i) = (-adv * ratio / n) * lg.var;
    }
  }
  res.loss = res.surrogate;
  res.grad = policy.backward(theta, out, d_mean, d_var);
  return res;
}

/// Mean squared error of the value predictions against the return targets.
inline LossResult value_loss(const ValueFunction& vf, const Eigen::VectorXd& theta,
                             const RolloutBatch& batch) {
  const ValueOutput out = vf.forward(theta, batch.obs);
  const Eigen::RowVectorXd err = out.values - batch.returns.transpose();
  LossResult res;
  res.loss = err.squaredNorm() / batch.size();
  res.grad = vf.backward(theta, out, 2.0 * err / batch.size());
  return res;
}

}  // namespace trl
