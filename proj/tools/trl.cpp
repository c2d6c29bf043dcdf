// trl: train, projcheck, gradcheck, ablate-alpha.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trl/config.hpp"
#include "trl/train.hpp"
#include "trl/verify/layer_checks.hpp"
#include "trl/verify/surrogate_checks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMetricsSchema = "trl-metrics/1";

// Two-sided 95% Student-t quantiles for 1..30 degrees of freedom.
double t_quantile_975(int dof) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306,
                                 2.262,  2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
                                 2.110,  2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
                                 2.060,  2.056, 2.052, 2.048, 2.045, 2.042};
  if (dof <= 0) return 0.0;
  return dof <= 30 ? table[dof - 1] : 1.960;
}

json mean_ci(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x / n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  const double half = t_quantile_975(static_cast<int>(xs.size()) - 1) * sd / std::sqrt(n);
  return {{"mean", mean}, {"ci95_low", mean - half}, {"ci95_high", mean + half}, {"n", xs.size()}};
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string args_hash(const json& args) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(trl::fnv1a64(args.dump())));
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string algo;
};

trl::RunConfig resolve(const TrainArgs& a) {
  trl::RunConfig cfg = trl::load_run_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (!a.algo.empty()) cfg.train.algorithm = trl::algorithm_from_string(a.algo);
  return cfg;
}

/// Trains every seed; returns the per-seed results.
std::vector<trl::TrainResult> run_seeds(const trl::RunConfig& cfg, const fs::path& dir,
                                        bool verbose) {
  const std::string hash = trl::config_hash(cfg);
  const std::string algo = trl::to_string(cfg.train.algorithm);
  fs::create_directories(dir);
  json effective = trl::to_json(cfg);
  effective["config_hash"] = hash;
  write_json(dir / "config.json", effective);
  std::vector<trl::TrainResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path run_dir = dir / (algo + "-seed" + std::to_string(seed));
    fs::create_directories(run_dir);
    std::ofstream metrics(run_dir / "metrics.jsonl");
    auto on_epoch = [&](const trl::EpochMetrics& m) {
      json rec = trl::to_json(m);
      rec["schema"] = kMetricsSchema;
      rec["config_hash"] = hash;
      rec["seed"] = seed;
      rec["algorithm"] = algo;
      metrics << rec.dump() << '\n';
      if (verbose && (m.epoch + 1) % 10 == 0) {
        std::cerr << algo << " seed " << seed << " epoch " << m.epoch + 1 << " eval "
                  << m.eval_return << '\n';
      }
    };
    results.push_back(trl::train(cfg.train, seed, on_epoch));
    trl::save_checkpoint(results.back().checkpoint, (run_dir / "checkpoint.json").string());
  }
  return results;
}

int cmd_train(const TrainArgs& a) {
  const trl::RunConfig cfg = resolve(a);
  const fs::path dir = cfg.output_dir;
  const auto results = run_seeds(cfg, dir, true);
  std::vector<double> finals;
  json per_seed = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const double r = results[i].metrics.back().eval_return;
    finals.push_back(r);
    per_seed.push_back({{"seed", cfg.seeds[i]}, {"final_eval_return", r}});
  }
  json summary = {{"config_hash", trl::config_hash(cfg)},
                  {"algorithm", trl::to_string(cfg.train.algorithm)},
                  {"seeds", per_seed},
                  {"final_eval_return", mean_ci(finals)}};
  write_json(dir / "summary.json", summary);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct CheckArgs {
  int trials = 1000;
  std::uint64_t seed = 0;
  std::string dims = "1,2,4,8";
  std::string kinds = "FROB,W2,KL";
  bool inject_bug = false;
  std::string out;
};

std::vector<trl::SimilarityKind> parse_kinds(const std::string& s) {
  std::vector<trl::SimilarityKind> out;
  for (const auto& k : split(s)) {
    const auto kind = trl::projection_kind(trl::algorithm_from_string(k));
    if (!kind) throw std::invalid_argument("not a projection kind: " + k);
    out.push_back(*kind);
  }
  return out;
}

std::vector<int> parse_dims(const std::string& s) {
  std::vector<int> out;
  for (const auto& d : split(s)) out.push_back(std::stoi(d));
  if (out.empty()) throw std::invalid_argument("--dims is empty");
  for (int d : out) {
    if (d < 1) throw std::invalid_argument("--dims must be positive");
  }
  return out;
}

void emit(const json& report, const std::string& out) {
  std::cout << report.dump(2) << '\n';
  if (!out.empty()) write_json(out, report);
}

int cmd_projcheck(const CheckArgs& a) {
  const auto kinds = parse_kinds(a.kinds);
  const auto dims = parse_dims(a.dims);
  const json args = {{"command", "projcheck"}, {"trials", a.trials}, {"dims", dims},
                     {"kinds", a.kinds}, {"inject_bug", a.inject_bug}};
  // Injected bug: the projections are checked against bounds halved after
  // the fact, which must show up as violations.
  const double eps_scale = a.inject_bug ? 0.5 : 1.0;
  bool ok = true;
  json per_kind = json::object();
  const int oracle_trials = std::min(a.trials, 100);
  const int max_dim = std::min(4, *std::max_element(dims.begin(), dims.end()));
  for (auto kind : kinds) {
    const auto c = trl::verify::constraint_sweep(kind, dims, a.trials, a.seed, eps_scale);
    const auto o = trl::verify::optimality_sweep(kind, oracle_trials, a.seed, max_dim);
    const auto e = trl::verify::entropy_bound_sweep(kind, dims, a.trials, a.seed);
    const bool kind_ok = c.violations == 0 && c.loose == 0 && o.max_gap < 1e-4 &&
                         e.violations == 0;
    ok = ok && kind_ok;
    per_kind[trl::to_string(kind)] = {
        {"instances", c.instances},
        {"projected_mean", c.projected_mean},
        {"projected_cov", c.projected_cov},
        {"constraint_violations", c.violations},
        {"not_tight", c.loose},
        {"max_mean_excess", c.max_mean_excess},
        {"max_cov_excess", c.max_cov_excess},
        {"max_tightness_error", c.max_tightness_error},
        {"cov_over_eps_histogram", c.histogram},
        {"oracle_instances", o.instances},
        {"max_optimality_gap", o.max_gap},
        {"entropy_bound_violations", e.violations},
        {"entropy_bound_min_slack", e.min_slack},
        {"pass", kind_ok}};
  }
  emit({{"args_hash", args_hash(args)}, {"seed", a.seed}, {"args", args}, {"kinds", per_kind},
        {"pass", ok}},
       a.out);
  return ok ? 0 : 1;
}

int cmd_gradcheck(const CheckArgs& a) {
  const auto kinds = parse_kinds(a.kinds);
  const json args = {{"command", "gradcheck"}, {"trials", a.trials}, {"kinds", a.kinds}};
  constexpr double tol = 1e-4;
  bool ok = true;
  json report = {{"args_hash", args_hash(args)}, {"seed", a.seed}, {"args", args},
                 {"tolerance", tol}};
  auto record = [&](const std::string& name, const trl::verify::GradcheckSweep& s) {
    const bool pass = s.failures == 0 && s.max_rel_error < tol;
    ok = ok && pass;
    report["checks"][name] = {{"points", s.points}, {"failures", s.failures},
                              {"max_rel_error", s.max_rel_error}, {"pass", pass}};
  };
  record("mean", trl::verify::mean_gradcheck_sweep(a.trials, a.seed, tol));
  for (auto kind : kinds) {
    const std::string k = trl::to_string(kind);
    record(k + "/layer", trl::verify::layer_gradcheck_sweep(
                             kind, trl::verify::GradcheckMode::Layer, a.trials, a.seed, tol));
    record(k + "/entropy", trl::verify::layer_gradcheck_sweep(
                               kind, trl::verify::GradcheckMode::Entropy, a.trials, a.seed, tol));
    record(k + "/surrogate",
           trl::verify::surrogate_gradcheck_sweep(kind, a.trials, a.seed, tol));
  }
  report["pass"] = ok;
  emit(report, a.out);
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  TrainArgs train;
  std::string alphas = "0.1,1,10,100";
};

int cmd_ablate_alpha(const AblateArgs& a) {
  trl::RunConfig base = resolve(a.train);
  if (!trl::projection_kind(base.train.algorithm)) {
    throw std::invalid_argument("ablate-alpha needs a projection algorithm");
  }
  const fs::path dir = base.output_dir;
  fs::create_directories(dir);
  std::ofstream table(dir / "alpha_ablation.csv");
  table << "alpha,seed,epoch,unproj_mean_median,unproj_mean_avg,eval_return\n";
  json summary = json::array();
  for (const auto& s : split(a.alphas)) {
    trl::RunConfig cfg = base;
    cfg.train.trust_region.penalty_alpha = std::stod(s);
    const auto results = run_seeds(cfg, dir / ("alpha-" + s), false);
    std::vector<double> finals;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& ms = results[i].metrics;
      std::vector<double> tail;
      for (const auto& m : ms) {
        table << s << ',' << cfg.seeds[i] << ',' << m.epoch << ',' << std::setprecision(10)
              << m.unproj_mean_median << ',' << m.unproj_mean_avg << ',' << m.eval_return
              << '\n';
        if (3 * m.epoch >= 2 * static_cast<int>(ms.size())) tail.push_back(m.unproj_mean_median);
      }
      finals.push_back(trl::detail::median(tail));
    }
    summary.push_back({{"alpha", cfg.train.trust_region.penalty_alpha},
                       {"config_hash", trl::config_hash(cfg)},
                       {"final_third_median_unproj_mean", mean_ci(finals)}});
  }
  const json out = {{"seeds", base.seeds}, {"eps_mean", base.train.trust_region.eps_mean},
                    {"alphas", summary}};
  write_json(dir / "alpha_ablation.json", out);
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable trust-region projections for Gaussian policies"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto add_train_flags = [](CLI::App* cmd, TrainArgs& t) {
    cmd->add_option("--config", t.config, "run configuration (JSON)")->required();
    cmd->add_option("--seed", t.seed, "train this seed only");
    cmd->add_option("--out", t.out, "output directory (overrides output_dir)");
    cmd->add_option("--algo", t.algo, "FROB, W2, KL or PPO-CLIP (overrides algorithm)");
  };
  auto* train = app.add_subcommand("train", "train per seed; writes metrics and checkpoints");
  add_train_flags(train, train_args);

  CheckArgs proj_args;
  auto* proj = app.add_subcommand("projcheck", "constraint, optimality and entropy checks");
  proj->add_option("--trials", proj_args.trials, "random instances per kind")
      ->check(CLI::PositiveNumber);
  proj->add_option("--seed", proj_args.seed);
  proj->add_option("--dims", proj_args.dims, "comma-separated dimensions");
  proj->add_option("--kinds", proj_args.kinds, "comma-separated subset of FROB,W2,KL");
  proj->add_flag("--inject-bug", proj_args.inject_bug, "check against halved bounds");
  proj->add_option("--out", proj_args.out, "also write the report here");

  CheckArgs grad_args;
  grad_args.trials = 50;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of every backward path");
  grad->add_option("--trials", grad_args.trials, "points per path")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_args.seed);
  grad->add_option("--kinds", grad_args.kinds, "comma-separated subset of FROB,W2,KL");
  grad->add_option("--out", grad_args.out, "also write the report here");

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate-alpha", "train per penalty weight");
  add_train_flags(ablate, ablate_args.train);
  ablate->add_option("--alphas", ablate_args.alphas, "comma-separated penalty weights");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_args);
    if (*proj) return cmd_projcheck(proj_args);
    if (*grad) return cmd_gradcheck(grad_args);
    if (*ablate) return cmd_ablate_alpha(ablate_args);
  } catch (const std::exception& e) {
    std::cerr << "trl: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
