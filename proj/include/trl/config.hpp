#pragma once

// Run configuration as JSON. Every object is checked for unknown keys and
// missing keys take the defaults below. The hash identifies the effective
// configuration (defaults filled in, output directory excluded).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "trl/train.hpp"

namespace trl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
};

namespace detail {

// Reads keys of one JSON object and remembers which were consumed.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return nullptr;
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(path_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_adam(const nlohmann::json& j, const std::string& path, AdamOptions& o) {
  ObjectReader r(j, path);
  r.read("learning_rate", o.learning_rate);
  r.read("beta1", o.beta1);
  r.read("beta2", o.beta2);
  r.read("epsilon", o.epsilon);
  r.finish();
}

inline nlohmann::json adam_json(const AdamOptions& o) {
  return {{"learning_rate", o.learning_rate}, {"beta1", o.beta1}, {"beta2", o.beta2},
          {"epsilon", o.epsilon}};
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  TrainConfig& t = c.train;
  detail::ObjectReader root(j, "config");

  if (const auto* e = root.child("env")) {
    detail::ObjectReader r(*e, "config.env");
    r.read("name", t.env.name);
    r.read("horizon", t.env.horizon);
    r.read("links", t.env.reacher.links);
    std::string reward = to_string(t.env.reacher.reward);
    r.read("reward", reward);
    t.env.reacher.reward = reacher_reward_from_string(reward);
    r.read("dt", t.env.reacher.dt);
    r.read("action_cost", t.env.reacher.action_cost);
    r.read("distance_cost", t.env.reacher.distance_cost);
    r.finish();
  }
  if (const auto* p = root.child("policy")) {
    detail::ObjectReader r(*p, "config.policy");
    r.read("hidden", t.policy.hidden);
    std::string activation = "tanh";
    r.read("activation", activation);
    if (activation != "tanh") throw ConfigError("config.policy.activation: only 'tanh'");
    std::string mode = to_string(t.policy.covariance_mode);
    r.read("covariance_mode", mode);
    t.policy.covariance_mode = covariance_mode_from_string(mode);
    r.read("init_log_std", t.policy.init_log_std);
    r.finish();
  }
  if (const auto* v = root.child("value")) {
    detail::ObjectReader r(*v, "config.value");
    r.read("hidden", t.value_hidden);
    r.finish();
  }
  std::string algo = to_string(t.algorithm);
  root.read("algorithm", algo);
  t.algorithm = algorithm_from_string(algo);
  if (const auto* tr = root.child("trust_region")) {
    detail::ObjectReader r(*tr, "config.trust_region");
    r.read("eps_mean", t.trust_region.eps_mean);
    r.read("eps_cov", t.trust_region.eps_cov);
    r.read("penalty_alpha", t.trust_region.penalty_alpha);
    if (const auto* en = r.child("entropy")) {
      detail::ObjectReader er(*en, "config.trust_region.entropy");
      EntropySchedule s;
      er.read("initial", s.initial);
      er.read("final", s.final_value);
      er.read("temperature", s.temperature);
      er.read("total_steps", s.total_steps);
      er.finish();
      if (!(s.temperature > 0.0 && s.temperature < 1.0) || s.total_steps <= 0) {
        throw ConfigError("config.trust_region.entropy: temperature in (0, 1), total_steps > 0");
      }
      t.trust_region.entropy = s;
    }
    r.finish();
  }
  if (const auto* p = root.child("ppo")) {
    detail::ObjectReader r(*p, "config.ppo");
    r.read("clip_range", t.clip_range);
    r.finish();
  }
  if (const auto* tr = root.child("training")) {
    detail::ObjectReader r(*tr, "config.training");
    r.read("epochs", t.epochs);
    r.read("steps_per_epoch", t.steps_per_epoch);
    r.read("update_epochs", t.update_epochs);
    r.read("minibatch_size", t.minibatch_size);
    r.read("gamma", t.gamma);
    r.read("gae_lambda", t.gae_lambda);
    r.read("normalize_observations", t.normalize_observations);
    r.read("eval_episodes", t.eval_episodes);
    r.read("full_regression", t.full_regression);
    r.read("regression_steps", t.regression_steps);
    r.finish();
  }
  if (const auto* o = root.child("optimizer")) {
    detail::ObjectReader r(*o, "config.optimizer");
    if (const auto* p = r.child("policy")) detail::read_adam(*p, r.path("policy"), t.policy_optimizer);
    if (const auto* v = r.child("value")) detail::read_adam(*v, r.path("value"), t.value_optimizer);
    r.finish();
  }
  root.read("seeds", c.seeds);
  root.read("output_dir", c.output_dir);
  root.finish();

  if (c.seeds.empty()) throw ConfigError("config.seeds: at least one seed");
  try {
    t.validate();
    t.env.reacher.validate();
    t.policy.validate();
    make_environment(t.env);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  nlohmann::json tr = {{"eps_mean", t.trust_region.eps_mean},
                       {"eps_cov", t.trust_region.eps_cov},
                       {"penalty_alpha", t.trust_region.penalty_alpha},
                       {"entropy", nullptr}};
  if (t.trust_region.entropy) {
    const auto& s = *t.trust_region.entropy;
    tr["entropy"] = {{"initial", s.initial}, {"final", s.final_value},
                     {"temperature", s.temperature}, {"total_steps", s.total_steps}};
  }
  return {
      {"env",
       {{"name", t.env.name},
        {"horizon", t.env.horizon},
        {"links", t.env.reacher.links},
        {"reward", to_string(t.env.reacher.reward)},
        {"dt", t.env.reacher.dt},
        {"action_cost", t.env.reacher.action_cost},
        {"distance_cost", t.env.reacher.distance_cost}}},
      {"policy",
       {{"hidden", t.policy.hidden},
        {"activation", "tanh"},
        {"covariance_mode", to_string(t.policy.covariance_mode)},
        {"init_log_std", t.policy.init_log_std}}},
      {"value", {{"hidden", t.value_hidden}}},
      {"algorithm", to_string(t.algorithm)},
      {"trust_region", tr},
      {"ppo", {{"clip_range", t.clip_range}}},
      {"training",
       {{"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"update_epochs", t.update_epochs},
        {"minibatch_size", t.minibatch_size},
        {"gamma", t.gamma},
        {"gae_lambda", t.gae_lambda},
        {"normalize_observations", t.normalize_observations},
        {"eval_episodes", t.eval_episodes},
        {"full_regression", t.full_regression},
        {"regression_steps", t.regression_steps}}},
      {"optimizer",
       {{"policy", detail::adam_json(t.policy_optimizer)},
        {"value", detail::adam_json(t.value_optimizer)}}},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir}};
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hex hash of the effective configuration. Keys are serialized sorted, so
/// key order and omitted defaults in the file do not matter.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace trl
