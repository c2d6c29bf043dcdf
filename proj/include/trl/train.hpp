#pragma once

// On-policy training: collect episodes with the current policy, compute GAE,
// run minibatch epochs of the projected surrogate (or PPO-clip), evaluate
// deterministic episodes and emit one metrics record per epoch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "trl/env.hpp"
#include "trl/policy_net.hpp"
#include "trl/projection.hpp"
#include "trl/rl.hpp"

namespace trl {

enum class Algorithm { Frob, W2, Kl, PpoClip };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Frob: return "FROB";
    case Algorithm::W2: return "W2";
    case Algorithm::Kl: return "KL";
    case Algorithm::PpoClip: return "PPO-CLIP";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "FROB") return Algorithm::Frob;
  if (s == "W2") return Algorithm::W2;
  if (s == "KL") return Algorithm::Kl;
  if (s == "PPO-CLIP") return Algorithm::PpoClip;
  throw std::invalid_argument("unknown algorithm: " + s + " (FROB, W2, KL, PPO-CLIP)");
}

inline std::optional<SimilarityKind> projection_kind(Algorithm a) {
  switch (a) {
    case Algorithm::Frob: return SimilarityKind::FrobeniusMetric;
    case Algorithm::W2: return SimilarityKind::Wasserstein2Metric;
    case Algorithm::Kl: return SimilarityKind::ReverseKL;
    case Algorithm::PpoClip: return std::nullopt;
  }
  return std::nullopt;
}

struct EnvConfig {
  std::string name = "lqr";  // "lqr" or "reacher"
  int horizon = 0;           // 0 keeps the task default
  ReacherParams reacher;
};

inline std::unique_ptr<Environment> make_environment(const EnvConfig& c) {
  if (c.name == "lqr") {
    LqrParams p = LqrParams::standard();
    if (c.horizon > 0) p.horizon = c.horizon;
    return std::make_unique<LqrEnv>(p);
  }
  if (c.name == "reacher") {
    ReacherParams p = c.reacher;
    if (c.horizon > 0) p.horizon = c.horizon;
    return std::make_unique<PlanarReacherEnv>(p);
  }
  throw std::invalid_argument("unknown environment: " + c.name + " (lqr, reacher)");
}

struct TrainConfig {
  EnvConfig env;
  PolicySpec policy;  // obs_dim / act_dim are taken from the environment
  std::vector<int> value_hidden{64, 64};
  Algorithm algorithm = Algorithm::W2;
  TrustRegionConfig trust_region;  // kind is set from `algorithm`
  double clip_range = 0.2;
  int epochs = 100;
  int steps_per_epoch = 2000;  // rounded up to whole episodes
  int update_epochs = 10;
  int minibatch_size = 64;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  AdamOptions policy_optimizer;
  AdamOptions value_optimizer{1e-3};
  bool normalize_observations = true;
  int eval_episodes = 5;
  // Ablation: train the surrogate without the penalty, then regress the
  // network onto the projected policy after every epoch.
  bool full_regression = false;
  int regression_steps = 50;

  void validate() const {
    if (epochs <= 0 || steps_per_epoch <= 0 || update_epochs <= 0 || minibatch_size <= 0 ||
        eval_episodes < 0 || regression_steps < 0) {
      throw std::invalid_argument("TrainConfig: counts must be positive");
    }
    if (!(gamma > 0.0 && gamma <= 1.0) || !(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
      throw std::invalid_argument("TrainConfig: gamma in (0, 1], gae_lambda in [0, 1]");
    }
    if (!(clip_range > 0.0)) throw std::invalid_argument("TrainConfig: clip_range must be > 0");
    if (projection_kind(algorithm)) trust_region.validate();
    for (int w : value_hidden) {
      if (w <= 0) throw std::invalid_argument("TrainConfig: value widths must be positive");
    }
  }
};

/// One record per epoch. "proj" statistics are for pi~(theta_new) against
/// the collection policy on the epoch's states, "unproj" for pi_theta_new;
/// for PPO-CLIP both describe the network output.
struct EpochMetrics {
  int epoch = 0;
  std::int64_t env_steps = 0;
  double eval_return = 0.0;
  double train_return = 0.0;
  double proj_mean_avg = 0.0, proj_mean_max = 0.0;
  double proj_cov_avg = 0.0, proj_cov_max = 0.0;
  double unproj_mean_avg = 0.0, unproj_mean_max = 0.0, unproj_mean_median = 0.0;
  double unproj_cov_avg = 0.0, unproj_cov_max = 0.0;
  int constraint_violations = 0;
  double kl_avg = 0.0;  // KL(pi~ || pi_old)
  double entropy_avg = 0.0, entropy_min = 0.0;
  std::optional<double> entropy_target;
  double eta_avg = 0.0, omega_avg = 0.0;
  double mean_skip_fraction = 0.0, cov_skip_fraction = 0.0;
  double entropy_scaled_fraction = 0.0;
  double surrogate = 0.0, penalty = 0.0, value_loss = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j = {
      {"epoch", m.epoch},
      {"env_steps", m.env_steps},
      {"eval_return", m.eval_return},
      {"train_return", m.train_return},
      {"proj_mean_avg", m.proj_mean_avg},
      {"proj_mean_max", m.proj_mean_max},
      {"proj_cov_avg", m.proj_cov_avg},
      {"proj_cov_max", m.proj_cov_max},
      {"unproj_mean_avg", m.unproj_mean_avg},
      {"unproj_mean_max", m.unproj_mean_max},
      {"unproj_mean_median", m.unproj_mean_median},
      {"unproj_cov_avg", m.unproj_cov_avg},
      {"unproj_cov_max", m.unproj_cov_max},
      {"constraint_violations", m.constraint_violations},
      {"kl_avg", m.kl_avg},
      {"entropy_avg", m.entropy_avg},
      {"entropy_min", m.entropy_min},
      {"entropy_target", m.entropy_target ? nlohmann::json(*m.entropy_target) : nlohmann::json()},
      {"eta_avg", m.eta_avg},
      {"omega_avg", m.omega_avg},
      {"mean_skip_fraction", m.mean_skip_fraction},
      {"cov_skip_fraction", m.cov_skip_fraction},
      {"entropy_scaled_fraction", m.entropy_scaled_fraction},
      {"surrogate", m.surrogate},
      {"penalty", m.penalty},
      {"value_loss", m.value_loss}};
  return j;
}

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  Checkpoint checkpoint;
};

namespace detail {

/// splitmix64, for deriving independent episode seeds from the run seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
  return m;
}

}  // namespace detail

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        seed_(seed),
        env_(make_environment(cfg_.env)),
        policy_(make_spec()),
        value_(env_->obs_dim(), cfg_.value_hidden),
        rng_(seed),
        normalizer_(env_->obs_dim()) {
    cfg_.validate();
    if (auto kind = projection_kind(cfg_.algorithm)) cfg_.trust_region.kind = *kind;
    theta_ = policy_.init(rng_);
    value_theta_ = value_.init(rng_);
    policy_opt_.emplace(policy_.num_params(), cfg_.policy_optimizer);
    value_opt_.emplace(value_.num_params(), cfg_.value_optimizer);
  }

  const TrainConfig& config() const { return cfg_; }
  const GaussianPolicy& policy() const { return policy_; }
  const Eigen::VectorXd& policy_params() const { return theta_; }
  const ObsNormalizer& normalizer() const { return normalizer_; }

  /// Runs all epochs; `on_epoch` sees each record as it is produced.
  TrainResult run(const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    TrainResult out;
    for (int e = 0; e < cfg_.epochs; ++e) {
      out.metrics.push_back(run_epoch(e));
      if (on_epoch) on_epoch(out.metrics.back());
    }
    out.checkpoint = checkpoint();
    return out;
  }

  EpochMetrics run_epoch(int epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    RolloutBatch batch = collect(m);
    m.env_steps = env_steps_;
    update(batch, epoch, m);
    measure(batch, epoch, m);
    m.eval_return = evaluate();
    return m;
  }

  /// Mean return of deterministic episodes (action = policy mean) on a fixed
  /// set of start states.
  double evaluate() {
    if (cfg_.eval_episodes == 0) return 0.0;
    double total = 0.0;
    for (int k = 0; k < cfg_.eval_episodes; ++k) {
      Eigen::VectorXd obs = env_->reset(eval_seed(k));
      for (int t = 0; t < env_->horizon(); ++t) {
        const PolicyOutput o = policy_.forward(theta_, observe(obs));
        const StepResult r = env_->step(o.mean.col(0));
        total += r.reward;
        obs = r.obs;
        if (r.done) break;
      }
    }
    return total / cfg_.eval_episodes;
  }

  std::uint64_t eval_seed(int k) const { return detail::mix_seed(seed_ ^ 0xe7a1ULL) + k; }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.spec = policy_.spec();
    c.value_hidden = cfg_.value_hidden;
    c.policy_params = theta_;
    c.value_params = value_theta_;
    c.obs_count = normalizer_.count();
    c.obs_mean = normalizer_.mean();
    c.obs_var = normalizer_.var();
    c.obs_clip = normalizer_.clip();
    return c;
  }

 private:
  PolicySpec make_spec() const {
    PolicySpec s = cfg_.policy;
    s.obs_dim = env_->obs_dim();
    s.act_dim = env_->act_dim();
    return s;
  }

  Eigen::MatrixXd observe(const Eigen::MatrixXd& raw) const {
    return cfg_.normalize_observations ? normalizer_.normalize(raw) : raw;
  }

  // Whole episodes with actions sampled from the current network output.
  // That output is the collection policy pi_old for the coming update (the
  // projection of a policy onto its own trust region is the identity).
  RolloutBatch collect(EpochMetrics& m) {
    const int horizon = env_->horizon();
    const int episodes = (cfg_.steps_per_epoch + horizon - 1) / horizon;
    const int n = episodes * horizon;
    const int od = env_->obs_dim(), ad = env_->act_dim();
    RolloutBatch b;
    b.gamma = cfg_.gamma;
    b.gae_lambda = cfg_.gae_lambda;
    Eigen::MatrixXd raw(od, n);
    b.obs.resize(od, n);
    b.actions.resize(ad, n);
    b.rewards.resize(n);
    b.log_probs.resize(n);
    b.old_mean.resize(ad, n);
    b.old_var.resize(ad, n);
    b.dones.assign(n, 0);
    std::normal_distribution<double> z;
    Eigen::Index i = 0;
    double returns = 0.0;
    for (int ep = 0; ep < episodes; ++ep) {
      Eigen::VectorXd obs = env_->reset(detail::mix_seed(seed_ + 1000003ULL * ++episode_count_));
      for (int t = 0; t < horizon; ++t, ++i) {
        raw.col(i) = obs;
        b.obs.col(i) = observe(obs);
        const PolicyOutput o = policy_.forward(theta_, b.obs.col(i));
        Eigen::VectorXd a(ad);
        for (int k = 0; k < ad; ++k) a(k) = o.mean(k, 0) + std::sqrt(o.variance(k, 0)) * z(rng_);
        b.actions.col(i) = a;
        b.old_mean.col(i) = o.mean.col(0);
        b.old_var.col(i) = o.variance.col(0);
        b.log_probs(i) = log_prob(o.at(0), a);
        const StepResult r = env_->step(a);
        b.rewards(i) = r.reward;
        returns += r.reward;
        obs = r.obs;
        // Episodes end at the horizon and are treated as terminal.
        if (r.done || t + 1 == horizon) {
          b.dones[i] = 1;
          ++i;
          break;
        }
      }
    }
    if (i != n) throw std::logic_error("collect: episode ended before the horizon");
    env_steps_ += n;
    m.train_return = returns / episodes;
    if (cfg_.normalize_observations) normalizer_.update(raw);

    b.values = value_.forward(value_theta_, b.obs).values.transpose();
    const GaeResult g = compute_gae(b.rewards, b.values, b.dones, b.gamma, b.gae_lambda);
    b.advantages = normalize_advantages(g.advantages);
    b.returns = g.returns;
    b.validate();
    return b;
  }

  void update(const RolloutBatch& batch, int epoch, EpochMetrics& m) {
    const auto kind = projection_kind(cfg_.algorithm);
    TrustRegionConfig tr = cfg_.trust_region;
    if (cfg_.full_regression) tr.penalty_alpha = 0.0;
    std::vector<Eigen::Index> idx(batch.size());
    std::iota(idx.begin(), idx.end(), 0);
    double surrogate = 0.0, penalty = 0.0, vloss = 0.0;
    int steps = 0;
    for (int pass = 0; pass < cfg_.update_epochs; ++pass) {
      std::shuffle(idx.begin(), idx.end(), rng_);
      for (std::size_t start = 0; start < idx.size(); start += cfg_.minibatch_size) {
        const std::size_t end = std::min(idx.size(), start + cfg_.minibatch_size);
        const RolloutBatch mb =
            batch.subset(std::vector<Eigen::Index>(idx.begin() + start, idx.begin() + end));
        const LossResult pl = kind ? surrogate_loss(policy_, theta_, mb, tr, epoch)
                                   : ppo_clip_loss(policy_, theta_, mb, cfg_.clip_range);
        policy_opt_->step(theta_, pl.grad);
        const LossResult vl = value_loss(value_, value_theta_, mb);
        value_opt_->step(value_theta_, vl.grad);
        surrogate += pl.surrogate;
        penalty += pl.penalty;
        vloss += vl.loss;
        ++steps;
      }
    }
    m.surrogate = surrogate / steps;
    m.penalty = penalty / steps;
    m.value_loss = vloss / steps;

    if (kind && cfg_.full_regression) {
      std::vector<GaussianParams> targets;
      const PolicyOutput out = policy_.forward(theta_, batch.obs);
      for (Eigen::Index i = 0; i < batch.size(); ++i) {
        targets.push_back(
            trust_region_forward(out.at(i), batch.old_policy(i), cfg_.trust_region, epoch)
                .projected);
      }
      for (int s = 0; s < cfg_.regression_steps; ++s) {
        policy_opt_->step(theta_, regression_loss(policy_, theta_, batch, *kind, targets).grad);
      }
    }
  }

  void measure(const RolloutBatch& batch, int epoch, EpochMetrics& m) const {
    const auto kind = projection_kind(cfg_.algorithm);
    const SimilarityKind metric_kind = kind.value_or(SimilarityKind::ReverseKL);
    const PolicyOutput out = policy_.forward(theta_, batch.obs);
    const Eigen::Index n = batch.size();
    std::vector<double> unproj_mean(n);
    m.entropy_min = std::numeric_limits<double>::infinity();
    int mean_skips = 0, cov_skips = 0, scaled = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const GaussianParams old = batch.old_policy(i);
      const GaussianParams pred = out.at(i);
      GaussianParams proj = pred;
      if (kind) {
        const ProjectionResult r = trust_region_forward(pred, old, cfg_.trust_region, epoch);
        proj = r.projected;
        m.eta_avg += r.eta / n;
        m.omega_avg += r.omega / n;
        mean_skips += r.mean_skipped;
        cov_skips += r.cov_skipped;
        scaled += r.entropy_scaled;
      }
      const TrustRegionValue pv = trust_region_value(metric_kind, proj, old);
      const TrustRegionValue uv = trust_region_value(metric_kind, pred, old);
      m.proj_mean_avg += pv.mean / n;
      m.proj_cov_avg += pv.cov / n;
      m.proj_mean_max = std::max(m.proj_mean_max, pv.mean);
      m.proj_cov_max = std::max(m.proj_cov_max, pv.cov);
      m.unproj_mean_avg += uv.mean / n;
      m.unproj_cov_avg += uv.cov / n;
      m.unproj_mean_max = std::max(m.unproj_mean_max, uv.mean);
      m.unproj_cov_max = std::max(m.unproj_cov_max, uv.cov);
      unproj_mean[i] = uv.mean;
      // Entropy scaling may move the covariance outside its bound by design;
      // only the mean is checked when the schedule is active.
      if (kind && (pv.mean > cfg_.trust_region.eps_mean + 1e-8 ||
                   (!cfg_.trust_region.entropy && pv.cov > cfg_.trust_region.eps_cov + 1e-6))) {
        ++m.constraint_violations;
      }
      m.kl_avg += kl_divergence(proj, old) / n;
      const double h = entropy(proj);
      m.entropy_avg += h / n;
      m.entropy_min = std::min(m.entropy_min, h);
    }
    m.unproj_mean_median = detail::median(std::move(unproj_mean));
    m.mean_skip_fraction = kind ? double(mean_skips) / n : 1.0;
    m.cov_skip_fraction = kind ? double(cov_skips) / n : 1.0;
    m.entropy_scaled_fraction = double(scaled) / n;
    if (kind && cfg_.trust_region.entropy) {
      m.entropy_target = entropy_target(*cfg_.trust_region.entropy, epoch);
    }
  }

  TrainConfig cfg_;
  std::uint64_t seed_;
  std::unique_ptr<Environment> env_;
  GaussianPolicy policy_;
  ValueFunction value_;
  std::mt19937_64 rng_;
  ObsNormalizer normalizer_;
  Eigen::VectorXd theta_;
  Eigen::VectorXd value_theta_;
  std::optional<Adam> policy_opt_;
  std::optional<Adam> value_opt_;
  std::uint64_t episode_count_ = 0;
  std::int64_t env_steps_ = 0;
};

inline TrainResult train(const TrainConfig& cfg, std::uint64_t seed,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  Trainer t(cfg, seed);
  return t.run(on_epoch);
}

}  // namespace trl
