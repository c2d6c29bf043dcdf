#pragma once

// Gaussian policy and value networks with explicit forward/backward passes,
// the Adam optimizer, running observation normalization and checkpoints.
//
// Batches are stored column-wise: an observation batch is obs_dim x n.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>
#include <json.hpp>

#include "trl/gauss.hpp"

namespace trl {

enum class CovarianceMode { GlobalDiagonal, ContextualDiagonal };

inline std::string to_string(CovarianceMode m) {
  return m == CovarianceMode::GlobalDiagonal ? "global_diagonal"
                                             : "contextual_diagonal";
}

inline CovarianceMode covariance_mode_from_string(const std::string& s) {
  if (s == "global_diagonal") return CovarianceMode::GlobalDiagonal;
  if (s == "contextual_diagonal") return CovarianceMode::ContextualDiagonal;
  throw std::invalid_argument("unknown covariance mode: " + s);
}

struct PolicySpec {
  int obs_dim = 1;
  int act_dim = 1;
  std::vector<int> hidden{64, 64};
  CovarianceMode covariance_mode = CovarianceMode::GlobalDiagonal;
  double init_log_std = 0.0;

  void validate() const {
    if (obs_dim <= 0 || act_dim <= 0) {
      throw std::invalid_argument("PolicySpec: dimensions must be positive");
    }
    for (int w : hidden) {
      if (w <= 0) throw std::invalid_argument("PolicySpec: widths must be positive");
    }
  }
};

// ---------------------------------------------------------------------------
// Flat parameter vectors.

struct Segment {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

class ParamLayout {
 public:
  Eigen::Index add(std::string name, Eigen::Index size) {
    const Eigen::Index offset = total_;
    segments_.push_back({std::move(name), offset, size});
    total_ += size;
    return offset;
  }
  Eigen::Index total() const { return total_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(const std::string& name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return s;
    }
    throw std::out_of_range("no parameter segment " + name);
  }

 private:
  std::vector<Segment> segments_;
  Eigen::Index total_ = 0;
};

namespace detail {

struct DenseLayer {
  int in = 0;
  int out = 0;
  Eigen::Index offset = 0;  // weights (out x in, column-major), then bias

  Eigen::Map<const Eigen::MatrixXd> w(const Eigen::VectorXd& theta) const {
    return {theta.data() + offset, out, in};
  }
  Eigen::Map<const Eigen::VectorXd> b(const Eigen::VectorXd& theta) const {
    return {theta.data() + offset + Eigen::Index(out) * in, out};
  }
  Eigen::Map<Eigen::MatrixXd> w(Eigen::VectorXd& theta) const {
    return {theta.data() + offset, out, in};
  }
  Eigen::Map<Eigen::VectorXd> b(Eigen::VectorXd& theta) const {
    return {theta.data() + offset + Eigen::Index(out) * in, out};
  }
  Eigen::Index size() const { return Eigen::Index(out) * in + out; }

  Eigen::MatrixXd apply(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd z = w(theta) * x;
    z.colwise() += b(theta);
    return z;
  }

  /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
  Eigen::MatrixXd backward(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x,
                           const Eigen::MatrixXd& dz, Eigen::VectorXd& grad) const {
    w(grad).noalias() += dz * x.transpose();
    b(grad) += dz.rowwise().sum();
    return w(theta).transpose() * dz;
  }
};

inline DenseLayer add_layer(ParamLayout& layout, const std::string& name, int in,
                            int out) {
  DenseLayer l{in, out, 0};
  l.offset = layout.add(name, l.size());
  return l;
}

/// Orthogonal initialization scaled by `gain`, zero bias.
inline void orthogonal_init(const DenseLayer& l, double gain, std::mt19937_64& rng,
                            Eigen::VectorXd& theta) {
  std::normal_distribution<double> n(0.0, 1.0);
  const int rows = std::max(l.out, l.in);
  const int cols = std::min(l.out, l.in);
  Eigen::MatrixXd a(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) a(i, j) = n(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  // Sign fix so the distribution is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (int j = 0; j < cols; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  if (l.out >= l.in) {
    l.w(theta) = gain * q;
  } else {
    l.w(theta) = gain * q.transpose();
  }
  l.b(theta).setZero();
}

/// tanh trunk shared by the policy and value networks.
struct Trunk {
  std::vector<DenseLayer> layers;

  int out_dim(int in) const { return layers.empty() ? in : layers.back().out; }

  /// acts[0] = x, acts[k] = tanh(layer k-1 (acts[k-1])).
  std::vector<Eigen::MatrixXd> forward(const Eigen::VectorXd& theta,
                                       const Eigen::MatrixXd& x) const {
    std::vector<Eigen::MatrixXd> acts{x};
    for (const auto& l : layers) {
      acts.push_back(l.apply(theta, acts.back()).array().tanh().matrix());
    }
    return acts;
  }

  void backward(const Eigen::VectorXd& theta, const std::vector<Eigen::MatrixXd>& acts,
                Eigen::MatrixXd d_top, Eigen::VectorXd& grad) const {
    for (int k = static_cast<int>(layers.size()) - 1; k >= 0; --k) {
      const Eigen::MatrixXd& h = acts[k + 1];
      const Eigen::MatrixXd dz = (d_top.array() * (1.0 - h.array().square())).matrix();
      d_top = layers[k].backward(theta, acts[k], dz, grad);
    }
  }
};

inline Trunk make_trunk(ParamLayout& layout, const std::string& prefix, int in,
                        const std::vector<int>& hidden) {
  Trunk t;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    t.layers.push_back(add_layer(layout, prefix + std::to_string(i), in, hidden[i]));
    in = hidden[i];
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Policy.

struct PolicyOutput {
  Eigen::MatrixXd mean;      // act_dim x n
  Eigen::MatrixXd variance;  // act_dim x n
  std::vector<Eigen::MatrixXd> acts;

  Eigen::Index size() const { return mean.cols(); }
  GaussianParams at(Eigen::Index i) const {
    return GaussianParams::diagonal(mean.col(i), variance.col(i));
  }
};

class GaussianPolicy {
 public:
  explicit GaussianPolicy(PolicySpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    trunk_ = detail::make_trunk(layout_, "trunk", spec_.obs_dim, spec_.hidden);
    const int h = trunk_.out_dim(spec_.obs_dim);
    mean_head_ = detail::add_layer(layout_, "mean_head", h, spec_.act_dim);
    if (spec_.covariance_mode == CovarianceMode::GlobalDiagonal) {
      log_std_offset_ = layout_.add("log_std", spec_.act_dim);
    } else {
      std_head_ = detail::add_layer(layout_, "log_std_head", h, spec_.act_dim);
    }
  }

  const PolicySpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  Eigen::Index num_params() const { return layout_.total(); }

  Eigen::VectorXd init(std::mt19937_64& rng) const {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(num_params());
    for (const auto& l : trunk_.layers) detail::orthogonal_init(l, std::sqrt(2.0), rng, theta);
    detail::orthogonal_init(mean_head_, 0.01, rng, theta);
    if (spec_.covariance_mode == CovarianceMode::GlobalDiagonal) {
      theta.segment(log_std_offset_, spec_.act_dim).setConstant(spec_.init_log_std);
    } else {
      detail::orthogonal_init(std_head_, 0.01, rng, theta);
      std_head_.b(theta).setConstant(spec_.init_log_std);
    }
    return theta;
  }

  PolicyOutput forward(const Eigen::VectorXd& theta, const Eigen::MatrixXd& obs) const {
    check(theta, obs);
    PolicyOutput out;
    out.acts = trunk_.forward(theta, obs);
    const Eigen::MatrixXd& top = out.acts.back();
    out.mean = mean_head_.apply(theta, top);
    Eigen::MatrixXd log_std;
    if (spec_.covariance_mode == CovarianceMode::GlobalDiagonal) {
      log_std = theta.segment(log_std_offset_, spec_.act_dim).replicate(1, obs.cols());
    } else {
      log_std = std_head_.apply(theta, top);
    }
    out.variance = (2.0 * log_std).array().exp().max(kVarianceFloor).matrix();
    return out;
  }

  /// Gradient w.r.t. theta given upstream gradients w.r.t. the means and
  /// variances of every state in the batch.
  Eigen::VectorXd backward(const Eigen::VectorXd& theta, const PolicyOutput& out,
                           const Eigen::MatrixXd& d_mean,
                           const Eigen::MatrixXd& d_var) const {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(num_params());
    const Eigen::MatrixXd& top = out.acts.back();
    // var = exp(2 s), floored
    const Eigen::MatrixXd d_log_std =
        (2.0 * d_var.array() * out.variance.array() *
         (out.variance.array() > kVarianceFloor).cast<double>())
            .matrix();
    Eigen::MatrixXd d_top = mean_head_.backward(theta, top, d_mean, grad);
    if (spec_.covariance_mode == CovarianceMode::GlobalDiagonal) {
      grad.segment(log_std_offset_, spec_.act_dim) += d_log_std.rowwise().sum();
    } else {
      d_top += std_head_.backward(theta, top, d_log_std, grad);
    }
    trunk_.backward(theta, out.acts, std::move(d_top), grad);
    return grad;
  }

 private:
  void check(const Eigen::VectorXd& theta, const Eigen::MatrixXd& obs) const {
    if (theta.size() != num_params()) {
      throw std::invalid_argument("GaussianPolicy: parameter size mismatch");
    }
    if (obs.rows() != spec_.obs_dim) {
      throw std::invalid_argument("GaussianPolicy: observation size mismatch");
    }
  }

  PolicySpec spec_;
  ParamLayout layout_;
  detail::Trunk trunk_;
  detail::DenseLayer mean_head_;
  detail::DenseLayer std_head_;
  Eigen::Index log_std_offset_ = -1;
};

// ---------------------------------------------------------------------------
// Value function.

struct ValueOutput {
  Eigen::RowVectorXd values;
  std::vector<Eigen::MatrixXd> acts;
};

class ValueFunction {
 public:
  ValueFunction(int obs_dim, std::vector<int> hidden)
      : obs_dim_(obs_dim), hidden_(std::move(hidden)) {
    trunk_ = detail::make_trunk(layout_, "trunk", obs_dim_, hidden_);
    head_ = detail::add_layer(layout_, "value_head", trunk_.out_dim(obs_dim_), 1);
  }

  int obs_dim() const { return obs_dim_; }
  const std::vector<int>& hidden() const { return hidden_; }
  Eigen::Index num_params() const { return layout_.total(); }

  Eigen::VectorXd init(std::mt19937_64& rng) const {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(num_params());
    for (const auto& l : trunk_.layers) detail::orthogonal_init(l, std::sqrt(2.0), rng, theta);
    detail::orthogonal_init(head_, 1.0, rng, theta);
    return theta;
  }

  ValueOutput forward(const Eigen::VectorXd& theta, const Eigen::MatrixXd& obs) const {
    if (theta.size() != num_params() || obs.rows() != obs_dim_) {
      throw std::invalid_argument("ValueFunction: size mismatch");
    }
    ValueOutput out;
    out.acts = trunk_.forward(theta, obs);
    out.values = head_.apply(theta, out.acts.back());
    return out;
  }

  Eigen::VectorXd backward(const Eigen::VectorXd& theta, const ValueOutput& out,
                           const Eigen::RowVectorXd& d_values) const {
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(num_params());
    Eigen::MatrixXd d_top = head_.backward(theta, out.acts.back(), d_values, grad);
    trunk_.backward(theta, out.acts, std::move(d_top), grad);
    return grad;
  }

 private:
  int obs_dim_;
  std::vector<int> hidden_;
  ParamLayout layout_;
  detail::Trunk trunk_;
  detail::DenseLayer head_;
};

// ---------------------------------------------------------------------------
// Adam.

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(Eigen::Index n, AdamOptions opts = {})
      : opts_(opts), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad) {
    if (grad.size() != theta.size() || theta.size() != m_.size()) {
      throw std::invalid_argument("Adam: size mismatch");
    }
    ++t_;
    m_ = opts_.beta1 * m_ + (1.0 - opts_.beta1) * grad;
    v_ = opts_.beta2 * v_ + (1.0 - opts_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    theta.array() -= opts_.learning_rate * (m_.array() / c1) /
                     ((v_.array() / c2).sqrt() + opts_.epsilon);
  }

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Observation normalization with running moments.

class ObsNormalizer {
 public:
  explicit ObsNormalizer(int dim, double clip = 10.0)
      : mean_(Eigen::VectorXd::Zero(dim)), var_(Eigen::VectorXd::Ones(dim)), clip_(clip) {}

  /// Merges the moments of a batch (columns) into the running estimate.
  void update(const Eigen::MatrixXd& batch) {
    const double n = static_cast<double>(batch.cols());
    if (n == 0) return;
    const Eigen::VectorXd bmean = batch.rowwise().mean();
    const Eigen::VectorXd bvar =
        (batch.colwise() - bmean).array().square().rowwise().sum().matrix() / n;
    const double total = count_ + n;
    const Eigen::VectorXd delta = bmean - mean_;
    mean_ += delta * (n / total);
    var_ = (var_ * count_ + bvar * n + delta.cwiseAbs2() * (count_ * n / total)) / total;
    count_ = total;
  }

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& obs) const {
    const Eigen::ArrayXd inv_std = (var_.array() + 1e-8).rsqrt();
    Eigen::MatrixXd out = ((obs.colwise() - mean_).array().colwise() * inv_std).matrix();
    return out.cwiseMax(-clip_).cwiseMin(clip_);
  }

  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::VectorXd& var() const { return var_; }
  double count() const { return count_; }
  double clip() const { return clip_; }

  void restore(double count, Eigen::VectorXd mean, Eigen::VectorXd var) {
    count_ = count;
    mean_ = std::move(mean);
    var_ = std::move(var);
  }

 private:
  // Small prior count keeps the first update from dividing by zero.
  double count_ = 1e-4;
  Eigen::VectorXd mean_;
  Eigen::VectorXd var_;
  double clip_;
};

// ---------------------------------------------------------------------------
// Checkpoints (JSON, see docs/checkpoint.md).

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  PolicySpec spec;
  std::vector<int> value_hidden;
  Eigen::VectorXd policy_params;
  Eigen::VectorXd value_params;
  double obs_count = 0.0;
  Eigen::VectorXd obs_mean;
  Eigen::VectorXd obs_var;
  double obs_clip = 10.0;
};

namespace detail {

inline nlohmann::json to_json_array(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd from_json_array(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "trl-checkpoint";
  j["version"] = kCheckpointVersion;
  j["spec"] = {{"obs_dim", c.spec.obs_dim},
               {"act_dim", c.spec.act_dim},
               {"hidden", c.spec.hidden},
               {"activation", "tanh"},
               {"covariance_mode", to_string(c.spec.covariance_mode)},
               {"init_log_std", c.spec.init_log_std}};
  j["value_hidden"] = c.value_hidden;
  j["policy_params"] = detail::to_json_array(c.policy_params);
  j["value_params"] = detail::to_json_array(c.value_params);
  j["normalizer"] = {{"count", c.obs_count},
                     {"mean", detail::to_json_array(c.obs_mean)},
                     {"var", detail::to_json_array(c.obs_var)},
                     {"clip", c.obs_clip}};
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "trl-checkpoint") {
    throw std::runtime_error("not a trl checkpoint");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  Checkpoint c;
  const auto& s = j.at("spec");
  c.spec.obs_dim = s.at("obs_dim").get<int>();
  c.spec.act_dim = s.at("act_dim").get<int>();
  c.spec.hidden = s.at("hidden").get<std::vector<int>>();
  if (s.at("activation").get<std::string>() != "tanh") {
    throw std::runtime_error("unsupported activation");
  }
  c.spec.covariance_mode =
      covariance_mode_from_string(s.at("covariance_mode").get<std::string>());
  c.spec.init_log_std = s.at("init_log_std").get<double>();
  c.value_hidden = j.at("value_hidden").get<std::vector<int>>();
  c.policy_params = detail::from_json_array(j.at("policy_params"));
  c.value_params = detail::from_json_array(j.at("value_params"));
  const auto& n = j.at("normalizer");
  c.obs_count = n.at("count").get<double>();
  c.obs_mean = detail::from_json_array(n.at("mean"));
  c.obs_var = detail::from_json_array(n.at("var"));
  c.obs_clip = n.at("clip").get<double>();
  if (GaussianPolicy(c.spec).num_params() != c.policy_params.size() ||
      ValueFunction(c.spec.obs_dim, c.value_hidden).num_params() != c.value_params.size()) {
    throw std::runtime_error("checkpoint parameter count does not match its spec");
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << checkpoint_to_json(c).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace trl
