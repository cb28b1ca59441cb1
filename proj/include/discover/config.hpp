#pragma once

#include "discover/core.hpp"
#include "discover/engine.hpp"
#include "discover/optim.hpp"
#include "discover/problems.hpp"

#include "json.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace discover {

using Json = nlohmann::json;

/// All schema violations found in one parse, with field paths.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> issues)
      : std::runtime_error(join(issues)), issues_(std::move(issues)) {}
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  static std::string join(const std::vector<std::string>& issues) {
    std::string out = "invalid config:";
    for (const auto& s : issues) out += "\n  " + s;
    return out;
  }
  std::vector<std::string> issues_;
};

struct ProblemConfig {
  std::string family = "quadratic";  // quadratic | logistic
  std::uint64_t instance_seed = 1;
  std::vector<double> probs;  // empty -> uniform over n_clusters
  // quadratic
  int dim = 20;
  int n_clusters = 5;
  double noise_std = 0.5;
  double eig_min = 0.5;
  double eig_max = 2.0;
  double center_scale = 1.0;
  // logistic
  int n_classes = 10;
  int feature_dim = 16;
  double class_sep = 3.0;
  double input_std = 1.0;
  double flip_prob = 0.0;
  std::string cluster_policy = "classes";  // classes | transforms | random
  double transform_scale = 1.0;
};

struct OptimizerConfig {
  Variant variant = Variant::Discover;
  HyperParams hp;
  bool theorem_mode = false;
};

struct LoopConfig {
  TrainLoopConfig loop;
  int batch_size = 20;
  int n_shards = 1;
  Composition composition = Composition::Iid;

  ShardingPlan plan() const {
    ShardingPlan p;
    p.n_shards = n_shards;
    p.samples_per_shard = batch_size / n_shards;
    p.composition = composition;
    return p;
  }
};

struct RunConfig {
  ProblemConfig problem;
  OptimizerConfig optimizer;
  LoopConfig loop;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = "out";
  Json sweep;  // optional grid: {"optimizer.mu": [..], ...}
};

// ---------------------------------------------------------------------------
// Hyperparameter presets (per-dataset tuned values from the reference
// training setups; retained for documentation and as starting points).

inline const std::map<std::string, Json>& optimizer_presets() {
  static const std::map<std::string, Json> presets = {
      {"imagenet-clean/discover", {{"mu", 0.1}, {"alpha", 0.1}, {"alpha_n", 0.01}}},
      {"imagenet-clean/momentum", {{"mu", 0.1}, {"beta", 0.9}}},
      {"imagenet-clean/qhm", {{"mu", 0.1}, {"beta", 0.999}, {"nu_mix", 0.7}}},
      {"imagenet-clean/igt", {{"mu", 0.1}, {"beta", 0.9}, {"tail_fraction", 90.0}}},
      {"imagenet-clean/adam",
       {{"mu", 0.001}, {"adam_beta1", 0.9}, {"adam_beta2", 0.999}, {"adam_eps", 1e-8}}},
      {"imagenet-clean/discover_qhm",
       {{"mu", 0.1}, {"alpha", 0.9}, {"alpha_n", 0.1}, {"nu_mix", 0.9}}},
      {"imagenet-clean/discover_igt",
       {{"mu", 0.1}, {"alpha", 0.9}, {"alpha_n", 0.1}, {"tail_fraction", 180.0}}},
      // noisy-label ImageNet reuses the clean selections
      {"imagenet-p08/discover", {{"mu", 0.1}, {"alpha", 0.1}, {"alpha_n", 0.01}}},
      {"cifar-clean/sgd", {{"mu", 0.01}}},
      {"cifar-clean/discover", {{"mu", 0.01}, {"alpha", 0.095}, {"alpha_n", 0.1}}},
      {"cifar-clean/momentum", {{"mu", 0.03}, {"beta", 0.9}}},
      {"cifar-clean/qhm", {{"mu", 0.1}, {"beta", 0.9}, {"nu_mix", 0.9}}},
      {"cifar-clean/igt", {{"mu", 0.01}, {"beta", 0.9}, {"tail_fraction", 18.0}}},
      {"cifar-clean/adam", {{"mu", 0.001}}},
      {"cifar-clean/discover_qhm",
       {{"mu", 0.01}, {"alpha", 0.9}, {"alpha_n", 0.1}, {"beta", 0.9}}},
      {"cifar-clean/discover_igt",
       {{"mu", 0.01}, {"alpha", 0.095}, {"alpha_n", 0.1}, {"tail_fraction", 18.0}}},
      {"cifar-p02/sgd", {{"mu", 0.175}}},
      {"cifar-p02/discover", {{"mu", 0.01}, {"alpha", 0.095}, {"alpha_n", 0.1}}},
      {"cifar-p02/momentum", {{"mu", 0.1}, {"beta", 0.9}}},
      {"cifar-p02/qhm", {{"mu", 0.175}, {"beta", 0.9}, {"nu_mix", 0.9}}},
      {"cifar-p02/igt", {{"mu", 0.1}, {"beta", 0.9}, {"tail_fraction", 18.0}}},
      {"cifar-p02/discover_qhm",
       {{"mu", 0.1}, {"alpha", 0.9}, {"alpha_n", 0.1}, {"nu_mix", 0.7}}},
      {"cifar-p02/discover_igt",
       {{"mu", 0.1}, {"alpha", 0.095}, {"alpha_n", 0.1}, {"tail_fraction", 18.0}}},
      {"cifar-p08/sgd", {{"mu", 0.1}}},
      {"cifar-p08/discover", {{"mu", 0.01}, {"alpha", 0.095}, {"alpha_n", 0.1}}},
      {"cifar-p08/momentum", {{"mu", 0.01}, {"beta", 0.9}}},
      {"cifar-p08/qhm", {{"mu", 0.1}, {"beta", 0.9}, {"nu_mix", 0.6}}},
      {"cifar-p08/igt", {{"mu", 0.01}, {"beta", 0.9}, {"tail_fraction", 18.0}}},
      {"cifar-p08/discover_qhm",
       {{"mu", 0.1}, {"alpha", 0.6}, {"alpha_n", 0.1}, {"nu_mix", 0.6}}},
      {"cifar-p08/discover_igt",
       {{"mu", 0.1}, {"alpha", 0.095}, {"alpha_n", 0.1}, {"tail_fraction", 18.0}}},
  };
  return presets;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class ConfigReader {
 public:
  explicit ConfigReader(std::vector<std::string>& issues) : issues_(issues) {}

  void check_keys(const Json& obj, const std::string& path,
                  std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
      issues_.push_back(path + ": expected an object");
      return;
    }
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed)
        if (key == a) { ok = true; break; }
      if (!ok) issues_.push_back(path + "." + key + ": unknown key");
    }
  }

  template <class T>
  void read(const Json& obj, const char* key, const std::string& path, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    try {
      out = obj.at(key).get<T>();
    } catch (const Json::exception&) {
      issues_.push_back(path + "." + key + ": type mismatch");
    }
  }

  void fail(const std::string& msg) { issues_.push_back(msg); }

 private:
  std::vector<std::string>& issues_;
};

inline std::optional<Variant> variant_from_string(const std::string& s) {
  if (s == "sgd") return Variant::Sgd;
  if (s == "momentum") return Variant::Momentum;
  if (s == "qhm") return Variant::Qhm;
  if (s == "igt") return Variant::Igt;
  if (s == "adam") return Variant::Adam;
  if (s == "discover") return Variant::Discover;
  if (s == "discover_qhm") return Variant::DiscoverQhm;
  if (s == "discover_igt") return Variant::DiscoverIgt;
  return std::nullopt;
}

inline std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::Sgd: return "sgd";
    case Variant::Momentum: return "momentum";
    case Variant::Qhm: return "qhm";
    case Variant::Igt: return "igt";
    case Variant::Adam: return "adam";
    case Variant::Discover: return "discover";
    case Variant::DiscoverQhm: return "discover_qhm";
    case Variant::DiscoverIgt: return "discover_igt";
  }
  return "?";
}

}  // namespace detail

inline RunConfig parse_config_json(const Json& root) {
  std::vector<std::string> issues;
  detail::ConfigReader r(issues);
  RunConfig cfg;

  r.check_keys(root, "config", {"problem", "optimizer", "loop", "seeds", "out_dir", "sweep"});

  // --- problem ---
  if (root.contains("problem")) {
    const Json& p = root.at("problem");
    r.check_keys(p, "problem",
                 {"family", "instance_seed", "probs", "dim", "n_clusters", "noise_std", "eig_min",
                  "eig_max", "center_scale", "n_classes", "feature_dim", "class_sep", "input_std",
                  "flip_prob", "cluster_policy", "transform_scale"});
    r.read(p, "family", "problem", cfg.problem.family);
    r.read(p, "instance_seed", "problem", cfg.problem.instance_seed);
    r.read(p, "probs", "problem", cfg.problem.probs);
    r.read(p, "dim", "problem", cfg.problem.dim);
    r.read(p, "n_clusters", "problem", cfg.problem.n_clusters);
    r.read(p, "noise_std", "problem", cfg.problem.noise_std);
    r.read(p, "eig_min", "problem", cfg.problem.eig_min);
    r.read(p, "eig_max", "problem", cfg.problem.eig_max);
    r.read(p, "center_scale", "problem", cfg.problem.center_scale);
    r.read(p, "n_classes", "problem", cfg.problem.n_classes);
    r.read(p, "feature_dim", "problem", cfg.problem.feature_dim);
    r.read(p, "class_sep", "problem", cfg.problem.class_sep);
    r.read(p, "input_std", "problem", cfg.problem.input_std);
    r.read(p, "flip_prob", "problem", cfg.problem.flip_prob);
    r.read(p, "cluster_policy", "problem", cfg.problem.cluster_policy);
    r.read(p, "transform_scale", "problem", cfg.problem.transform_scale);
  }
  if (cfg.problem.family != "quadratic" && cfg.problem.family != "logistic")
    r.fail("problem.family: must be 'quadratic' or 'logistic'");
  if (cfg.problem.family == "logistic") cfg.problem.n_clusters = cfg.problem.n_classes;
  if (cfg.problem.n_clusters < 1) r.fail("problem.n_clusters: must be positive");
  if (!cfg.problem.probs.empty()) {
    if (static_cast<int>(cfg.problem.probs.size()) != cfg.problem.n_clusters)
      r.fail("problem.probs: size must equal the cluster count");
    double sum = 0.0;
    bool pos = true;
    for (double v : cfg.problem.probs) {
      sum += v;
      if (!(v > 0.0)) pos = false;
    }
    if (!pos) r.fail("problem.probs: every entry must be > 0");
    else if (std::abs(sum - 1.0) > 1e-12) r.fail("problem.probs: must sum to 1 within 1e-12");
  }
  if (cfg.problem.flip_prob < 0.0 || cfg.problem.flip_prob >= 1.0)
    r.fail("problem.flip_prob: must lie in [0, 1)");
  if (cfg.problem.cluster_policy != "classes" && cfg.problem.cluster_policy != "transforms" &&
      cfg.problem.cluster_policy != "random")
    r.fail("problem.cluster_policy: must be classes, transforms or random");
  if (cfg.problem.family == "quadratic") {
    if (cfg.problem.dim < 2) r.fail("problem.dim: must be >= 2");
    if (!(cfg.problem.eig_min > 0.0) || cfg.problem.eig_max < cfg.problem.eig_min)
      r.fail("problem.eig_min/eig_max: need 0 < eig_min <= eig_max");
    if (cfg.problem.noise_std < 0.0) r.fail("problem.noise_std: must be >= 0");
  }

  // --- optimizer ---
  std::string variant_str = "discover";
  std::string preset;
  Json opt = root.contains("optimizer") ? root.at("optimizer") : Json::object();
  r.check_keys(opt, "optimizer",
               {"variant", "preset", "mu", "beta", "nu_mix", "alpha", "alpha_n", "tail_fraction",
                "adam_beta1", "adam_beta2", "adam_eps", "theorem_mode"});
  r.read(opt, "variant", "optimizer", variant_str);
  r.read(opt, "preset", "optimizer", preset);
  if (auto v = detail::variant_from_string(variant_str)) cfg.optimizer.variant = *v;
  else r.fail("optimizer.variant: unknown variant '" + variant_str + "'");
  if (!preset.empty()) {
    const std::string key = preset + "/" + variant_str;
    const auto& presets = optimizer_presets();
    auto it = presets.find(key);
    if (it == presets.end()) {
      r.fail("optimizer.preset: no preset '" + key + "'");
    } else {
      // preset supplies defaults; explicit keys win
      Json merged = it->second;
      merged.update(opt);
      opt = std::move(merged);
    }
  }
  r.read(opt, "mu", "optimizer", cfg.optimizer.hp.mu);
  r.read(opt, "beta", "optimizer", cfg.optimizer.hp.beta);
  r.read(opt, "nu_mix", "optimizer", cfg.optimizer.hp.nu_mix);
  r.read(opt, "alpha", "optimizer", cfg.optimizer.hp.alpha);
  if (opt.is_object() && opt.contains("alpha_n")) {
    const Json& an = opt.at("alpha_n");
    if (an.is_number()) cfg.optimizer.hp.alpha_n = {an.get<double>()};
    else if (an.is_array()) {
      try {
        cfg.optimizer.hp.alpha_n = an.get<std::vector<double>>();
      } catch (const Json::exception&) {
        r.fail("optimizer.alpha_n: type mismatch");
      }
    } else r.fail("optimizer.alpha_n: must be a number or an array");
  }
  r.read(opt, "tail_fraction", "optimizer", cfg.optimizer.hp.tail_fraction);
  r.read(opt, "adam_beta1", "optimizer", cfg.optimizer.hp.adam_beta1);
  r.read(opt, "adam_beta2", "optimizer", cfg.optimizer.hp.adam_beta2);
  r.read(opt, "adam_eps", "optimizer", cfg.optimizer.hp.adam_eps);
  r.read(opt, "theorem_mode", "optimizer", cfg.optimizer.theorem_mode);
  if (!(cfg.optimizer.hp.mu > 0.0)) r.fail("optimizer.mu: must be > 0");
  if (cfg.optimizer.hp.beta < 0.0 || cfg.optimizer.hp.beta >= 1.0)
    r.fail("optimizer.beta: must lie in [0, 1)");
  if (cfg.optimizer.hp.nu_mix < 0.0 || cfg.optimizer.hp.nu_mix > 1.0)
    r.fail("optimizer.nu_mix: must lie in [0, 1]");
  if (!(cfg.optimizer.hp.tail_fraction > 0.0))
    r.fail("optimizer.tail_fraction: must be > 0");
  for (double a : cfg.optimizer.hp.alpha_n)
    if (!(a > 0.0 && a <= 1.0)) {
      r.fail("optimizer.alpha_n: entries must lie in (0, 1]");
      break;
    }
  if (is_discover_family(cfg.optimizer.variant)) {
    double p_min = 1.0;
    if (cfg.problem.probs.empty()) {
      p_min = 1.0 / static_cast<double>(std::max(cfg.problem.n_clusters, 1));
    } else {
      for (double v : cfg.problem.probs) p_min = std::min(p_min, v);
    }
    if (cfg.optimizer.theorem_mode &&
        !(cfg.optimizer.hp.alpha > 0.0 && cfg.optimizer.hp.alpha < p_min))
      r.fail("optimizer.alpha: theorem mode requires alpha in (0, p_min); p_min = " +
             std::to_string(p_min));
    if (!cfg.optimizer.theorem_mode &&
        !(cfg.optimizer.hp.alpha > 0.0 && cfg.optimizer.hp.alpha <= 1.0))
      r.fail("optimizer.alpha: must lie in (0, 1]");
  }

  // --- loop ---
  std::string schedule = "constant";
  std::string composition = "iid";
  if (root.contains("loop")) {
    const Json& l = root.at("loop");
    r.check_keys(l, "loop",
                 {"total_steps", "warmup_steps", "lr_schedule", "weight_decay", "batch_size",
                  "eval_every", "n_shards", "composition", "init_scale", "variance_metrics",
                  "mc_cluster_mean_samples", "noise_probe_every", "noise_probe_batches",
                  "validation_size", "quiet"});
    r.read(l, "total_steps", "loop", cfg.loop.loop.total_steps);
    r.read(l, "warmup_steps", "loop", cfg.loop.loop.warmup_steps);
    r.read(l, "lr_schedule", "loop", schedule);
    r.read(l, "weight_decay", "loop", cfg.loop.loop.weight_decay);
    r.read(l, "batch_size", "loop", cfg.loop.batch_size);
    r.read(l, "eval_every", "loop", cfg.loop.loop.eval_every);
    r.read(l, "n_shards", "loop", cfg.loop.n_shards);
    r.read(l, "composition", "loop", composition);
    r.read(l, "init_scale", "loop", cfg.loop.loop.init_scale);
    r.read(l, "variance_metrics", "loop", cfg.loop.loop.variance_metrics);
    r.read(l, "mc_cluster_mean_samples", "loop", cfg.loop.loop.mc_cluster_mean_samples);
    r.read(l, "noise_probe_every", "loop", cfg.loop.loop.noise_probe_every);
    r.read(l, "noise_probe_batches", "loop", cfg.loop.loop.noise_probe_batches);
    r.read(l, "validation_size", "loop", cfg.loop.loop.validation_size);
    r.read(l, "quiet", "loop", cfg.loop.loop.quiet);
  }
  if (schedule == "constant") cfg.loop.loop.lr_schedule = LrSchedule::Constant;
  else if (schedule == "cosine") cfg.loop.loop.lr_schedule = LrSchedule::Cosine;
  else r.fail("loop.lr_schedule: must be 'constant' or 'cosine'");
  if (composition == "iid") cfg.loop.composition = Composition::Iid;
  else if (composition == "proportional") cfg.loop.composition = Composition::Proportional;
  else if (composition == "single_cluster_per_shard")
    cfg.loop.composition = Composition::SingleClusterPerShard;
  else r.fail("loop.composition: must be iid, proportional or single_cluster_per_shard");
  if (cfg.loop.loop.total_steps < 0) r.fail("loop.total_steps: must be >= 0");
  if (cfg.loop.loop.total_steps > 0 &&
      cfg.loop.loop.warmup_steps >= cfg.loop.loop.total_steps)
    r.fail("loop.warmup_steps: must be < total_steps");
  if (cfg.loop.loop.weight_decay < 0.0) r.fail("loop.weight_decay: must be >= 0");
  if (cfg.loop.batch_size < 1) r.fail("loop.batch_size: must be positive");
  if (cfg.loop.n_shards < 1) r.fail("loop.n_shards: must be positive");
  if (cfg.loop.n_shards >= 1 && cfg.loop.batch_size >= 1 &&
      cfg.loop.batch_size % cfg.loop.n_shards != 0)
    r.fail("loop.batch_size: must be divisible by n_shards");
  if (cfg.loop.loop.eval_every < 1) r.fail("loop.eval_every: must be >= 1");

  // IGT anchor period from the tail fraction: one reset every
  // ceil(T / tail_fraction) steps.
  if (cfg.loop.loop.total_steps > 0) {
    cfg.optimizer.hp.igt_anchor_period = static_cast<std::int64_t>(
        std::ceil(static_cast<double>(cfg.loop.loop.total_steps) /
                  cfg.optimizer.hp.tail_fraction));
  }

  // --- seeds / output ---
  r.read(root, "seeds", "config", cfg.seeds);
  r.read(root, "out_dir", "config", cfg.out_dir);
  if (cfg.seeds.empty()) r.fail("seeds: must list at least one seed");
  if (root.contains("sweep")) {
    if (!root.at("sweep").is_object()) r.fail("sweep: must be an object of parameter -> values");
    else cfg.sweep = root.at("sweep");
  }

  if (!issues.empty()) throw ConfigError(std::move(issues));
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"config file not found: " + path});
  Json root;
  try {
    root = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  return parse_config_json(root);
}

// ---------------------------------------------------------------------------
// Problem construction

using AnyProblem = std::variant<ClusteredQuadratic, ClusteredLogistic>;

inline ClusterSpec cluster_spec_from(const ProblemConfig& p) {
  if (!p.probs.empty()) return ClusterSpec(p.probs);
  return ClusterSpec::uniform(p.n_clusters);
}

inline AnyProblem build_problem(const ProblemConfig& p) {
  if (p.family == "quadratic") {
    return ClusteredQuadratic::random_instance(p.dim, cluster_spec_from(p), p.eig_min, p.eig_max,
                                               p.center_scale, p.noise_std, p.instance_seed);
  }
  ClusterPolicy policy = ClusterPolicy::Classes;
  if (p.cluster_policy == "transforms") policy = ClusterPolicy::Transforms;
  else if (p.cluster_policy == "random") policy = ClusterPolicy::Random;
  require(p.probs.empty(), "logistic problems use uniform class probabilities");
  return ClusteredLogistic(p.n_classes, p.feature_dim, p.class_sep, p.input_std, p.flip_prob,
                           policy, p.transform_scale, p.instance_seed);
}

}  // namespace discover
