#pragma once

// Small deterministic control tasks: a linear-quadratic regulator with a
// Riccati reference solution and an n-link planar reacher with dense or
// semi-sparse rewards.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace trl {

struct StepResult {
  Eigen::VectorXd obs;
  double reward = 0.0;
  bool done = false;
};

class EnvironmentDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::string name() const = 0;
  virtual int obs_dim() const = 0;
  virtual int act_dim() const = 0;
  virtual int horizon() const = 0;
  /// Deterministic given the seed.
  virtual Eigen::VectorXd reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Eigen::VectorXd& action) = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;
};

namespace detail {

inline void require_finite(const Eigen::VectorXd& v, const std::string& env, int t) {
  if (!v.allFinite()) {
    throw EnvironmentDiverged(env + ": non-finite state at step " + std::to_string(t));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LQR: x' = A x + B u, reward -(x'Qx + u'Ru), x0 uniform in [-init, init]^n.

struct LqrParams {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  Eigen::MatrixXd q;
  Eigen::MatrixXd r;
  int horizon = 50;
  double init_range = 1.0;

  /// Default task: a lightly damped 2-D rotation-drift system with two
  /// actuators.
  static LqrParams standard() {
    LqrParams p;
    p.a.resize(2, 2);
    p.a << 1.01, 0.1,
           -0.1, 1.01;
    p.b = 0.2 * Eigen::MatrixXd::Identity(2, 2);
    p.q = Eigen::MatrixXd::Identity(2, 2);
    p.r = 0.1 * Eigen::MatrixXd::Identity(2, 2);
    return p;
  }

  void validate() const {
    const auto n = a.rows();
    if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n ||
        r.rows() != b.cols() || r.cols() != b.cols()) {
      throw std::invalid_argument("LqrParams: inconsistent shapes");
    }
    if (horizon <= 0) throw std::invalid_argument("LqrParams: horizon must be positive");
  }
};

/// Finite-horizon Riccati recursion. gains[t] is K_t with u_t = -K_t x_t and
/// cost_to_go[t] is P_t, so the optimal cost from x at time 0 is x'P_0 x.
struct RiccatiSolution {
  std::vector<Eigen::MatrixXd> gains;
  std::vector<Eigen::MatrixXd> cost_to_go;
};

inline RiccatiSolution solve_riccati(const LqrParams& p) {
  p.validate();
  RiccatiSolution s;
  const auto n = p.a.rows();
  s.gains.resize(p.horizon);
  s.cost_to_go.resize(p.horizon + 1);
  s.cost_to_go[p.horizon] = Eigen::MatrixXd::Zero(n, n);
  for (int t = p.horizon - 1; t >= 0; --t) {
    const Eigen::MatrixXd& next = s.cost_to_go[t + 1];
    const Eigen::MatrixXd btp = p.b.transpose() * next;
    const Eigen::MatrixXd k = (p.r + btp * p.b).ldlt().solve(btp * p.a);
    s.gains[t] = k;
    const Eigen::MatrixXd acl = p.a - p.b * k;
    Eigen::MatrixXd cur = p.q + k.transpose() * p.r * k + acl.transpose() * next * acl;
    s.cost_to_go[t] = 0.5 * (cur + cur.transpose());
  }
  return s;
}

class LqrEnv final : public Environment {
 public:
  explicit LqrEnv(LqrParams p = LqrParams::standard()) : p_(std::move(p)) {
    p_.validate();
    riccati_ = solve_riccati(p_);
  }

  std::string name() const override { return "lqr"; }
  int obs_dim() const override { return static_cast<int>(p_.a.rows()); }
  int act_dim() const override { return static_cast<int>(p_.b.cols()); }
  int horizon() const override { return p_.horizon; }
  const LqrParams& params() const { return p_; }
  const RiccatiSolution& riccati() const { return riccati_; }

  Eigen::VectorXd initial_state(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-p_.init_range, p_.init_range);
    Eigen::VectorXd x(obs_dim());
    for (int i = 0; i < x.size(); ++i) x(i) = u(rng);
    return x;
  }

  Eigen::VectorXd reset(std::uint64_t seed) override {
    x_ = initial_state(seed);
    t_ = 0;
    return x_;
  }

  StepResult step(const Eigen::VectorXd& u) override {
    if (u.size() != act_dim()) throw std::invalid_argument("LqrEnv: action size");
    if (t_ >= p_.horizon) throw std::logic_error("LqrEnv: step after episode end");
    const double cost = x_.dot(p_.q * x_) + u.dot(p_.r * u);
    x_ = p_.a * x_ + p_.b * u;
    ++t_;
    detail::require_finite(x_, name(), t_);
    return {x_, -cost, t_ >= p_.horizon};
  }

  /// Best achievable return from the episode started with `seed`.
  double optimal_return(std::uint64_t seed) const {
    const Eigen::VectorXd x0 = initial_state(seed);
    return -x0.dot(riccati_.cost_to_go[0] * x0);
  }

  std::unique_ptr<Environment> clone() const override {
    return std::make_unique<LqrEnv>(*this);
  }

 private:
  LqrParams p_;
  RiccatiSolution riccati_;
  Eigen::VectorXd x_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Planar reacher: n links of equal length summing to 1, joint-velocity
// actions clipped to [-1, 1], integration step dt. Observation is
// [cos q, sin q, target, fingertip - target, t / T].

enum class ReacherReward { Dense, SemiSparse };

inline std::string to_string(ReacherReward r) {
  return r == ReacherReward::Dense ? "dense" : "semi_sparse";
}

inline ReacherReward reacher_reward_from_string(const std::string& s) {
  if (s == "dense") return ReacherReward::Dense;
  if (s == "semi_sparse") return ReacherReward::SemiSparse;
  throw std::invalid_argument("unknown reacher reward mode: " + s);
}

struct ReacherParams {
  int links = 2;
  int horizon = 40;
  double dt = 0.1;
  ReacherReward reward = ReacherReward::SemiSparse;
  double action_cost = 0.01;   // per step, times |clip(a)|^2
  double distance_cost = 1.0;  // dense: per step; semi-sparse: times T at t = T
  double target_min_radius = 0.2;
  double target_max_radius = 0.9;

  void validate() const {
    if (links < 1 || horizon < 1 || !(dt > 0.0)) {
      throw std::invalid_argument("ReacherParams: invalid sizes");
    }
    if (!(target_min_radius >= 0.0 && target_max_radius >= target_min_radius &&
          target_max_radius <= 1.0)) {
      throw std::invalid_argument("ReacherParams: invalid target radii");
    }
  }
};

class PlanarReacherEnv final : public Environment {
 public:
  explicit PlanarReacherEnv(ReacherParams p = {}) : p_(p) { p_.validate(); }

  std::string name() const override { return "reacher"; }
  int obs_dim() const override { return 2 * p_.links + 5; }
  int act_dim() const override { return p_.links; }
  int horizon() const override { return p_.horizon; }
  const ReacherParams& params() const { return p_; }

  Eigen::VectorXd reset(std::uint64_t seed) override {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    std::uniform_real_distribution<double> radius2(p_.target_min_radius * p_.target_min_radius,
                                                   p_.target_max_radius * p_.target_max_radius);
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    const double phi = angle(rng);
    const double rad = std::sqrt(radius2(rng));
    target_ = Eigen::Vector2d(rad * std::cos(phi), rad * std::sin(phi));
    q_.resize(p_.links);
    for (int i = 0; i < p_.links; ++i) q_(i) = jitter(rng);
    t_ = 0;
    return observe();
  }

  StepResult step(const Eigen::VectorXd& action) override {
    if (action.size() != act_dim()) throw std::invalid_argument("reacher: action size");
    if (t_ >= p_.horizon) throw std::logic_error("reacher: step after episode end");
    const Eigen::VectorXd a = action.cwiseMax(-1.0).cwiseMin(1.0);
    q_ += p_.dt * a;
    ++t_;
    detail::require_finite(q_, name(), t_);
    const double dist = (fingertip() - target_).norm();
    double reward = -p_.action_cost * a.squaredNorm();
    const bool done = t_ >= p_.horizon;
    if (p_.reward == ReacherReward::Dense) {
      reward -= p_.distance_cost * dist;
    } else if (done) {
      reward -= p_.distance_cost * p_.horizon * dist;
    }
    return {observe(), reward, done};
  }

  Eigen::Vector2d fingertip() const {
    const double len = 1.0 / p_.links;
    Eigen::Vector2d tip = Eigen::Vector2d::Zero();
    double angle = 0.0;
    for (int i = 0; i < p_.links; ++i) {
      angle += q_(i);
      tip += len * Eigen::Vector2d(std::cos(angle), std::sin(angle));
    }
    return tip;
  }

  const Eigen::Vector2d& target() const { return target_; }
  int time_step() const { return t_; }

  std::unique_ptr<Environment> clone() const override {
    return std::make_unique<PlanarReacherEnv>(*this);
  }

 private:
  Eigen::VectorXd observe() const {
    Eigen::VectorXd o(obs_dim());
    const int n = p_.links;
    o.head(n) = q_.array().cos();
    o.segment(n, n) = q_.array().sin();
    o.segment(2 * n, 2) = target_;
    o.segment(2 * n + 2, 2) = fingertip() - target_;
    o(2 * n + 4) = static_cast<double>(t_) / p_.horizon;
    return o;
  }

  ReacherParams p_;
  Eigen::Vector2d target_ = Eigen::Vector2d::Zero();
  Eigen::VectorXd q_;
  int t_ = 0;
};

}  // namespace trl
