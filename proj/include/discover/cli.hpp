#pragma once

#include "discover/config.hpp"
#include "discover/core.hpp"
#include "discover/engine.hpp"
#include "discover/report.hpp"
#include "discover/theory.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace discover {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 1;
inline constexpr int kExitDiverged = 2;
inline constexpr int kVarianceWindow = 100;  // steps per plotting window

namespace detail {

inline std::string run_csv_name(const std::string& prefix, std::uint64_t seed) {
  return prefix.empty() ? "run-" + std::to_string(seed) + ".csv"
                        : "run-" + prefix + "-" + std::to_string(seed) + ".csv";
}

/// Multi-seed runs as independent parallel jobs; each slot is written once.
inline std::vector<RunRecord> run_seeds(const AnyProblem& problem, Variant variant,
                                        const HyperParams& hp, const TrainLoopConfig& loop,
                                        const ShardingPlan& plan,
                                        const std::vector<std::uint64_t>& seeds,
                                        const std::function<StepObserver(std::size_t)>&
                                            observer_for = {}) {
  std::vector<RunRecord> records(seeds.size());
  parallel_for(static_cast<std::int64_t>(seeds.size()), [&](std::int64_t i) {
    const StepObserver obs = observer_for ? observer_for(static_cast<std::size_t>(i))
                                          : StepObserver{};
    std::visit(
        [&](const auto& p) {
          records[static_cast<std::size_t>(i)] =
              run_training(p, variant, hp, loop, plan, seeds[static_cast<std::size_t>(i)], obs);
        },
        problem);
  });
  return records;
}

inline nlohmann::json per_seed_json(const std::vector<std::uint64_t>& seeds,
                                    const std::vector<RunRecord>& records) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const RunRecord& r = records[i];
    arr.push_back({{"seed", seeds[i]},
                   {"steps_completed", r.steps_completed},
                   {"diverged", r.diverged},
                   {"final_loss", r.final_loss},
                   {"final_msd", r.final_msd},
                   {"val_accuracy", r.val_accuracy}});
  }
  return arr;
}

inline double mean_of(const std::vector<RunRecord>& records, double RunRecord::* field) {
  double sum = 0.0;
  for (const RunRecord& r : records) sum += r.*field;
  return sum / static_cast<double>(records.size());
}

/// Column curves at the shared row steps (assumes identical cadence).
inline void collect_rows(const std::vector<RunRecord>& records, double RunRow::* field,
                         std::vector<double>& xs, std::vector<std::vector<double>>& curves) {
  xs.clear();
  curves.assign(records.size(), {});
  if (records.empty()) return;
  std::size_t len = records[0].rows.size();
  for (const RunRecord& r : records) len = std::min(len, r.rows.size());
  for (std::size_t i = 0; i < len; ++i)
    xs.push_back(static_cast<double>(records[0].rows[i].step));
  for (std::size_t s = 0; s < records.size(); ++s)
    for (std::size_t i = 0; i < len; ++i)
      curves[s].push_back(records[s].rows[i].*field);
}

/// Per-window means of a per-step column; window w covers steps
/// (w*window, (w+1)*window].
inline std::vector<double> windowed(const std::vector<RunRow>& rows, double RunRow::* field,
                                    int window) {
  std::vector<double> sums;
  std::vector<int> counts;
  for (const RunRow& r : rows) {
    if (r.step == 0) continue;
    const std::size_t w = static_cast<std::size_t>((r.step - 1) / window);
    if (w >= sums.size()) {
      sums.resize(w + 1, 0.0);
      counts.resize(w + 1, 0);
    }
    const double v = r.*field;
    if (std::isfinite(v)) {
      sums[w] += v;
      ++counts[w];
    }
  }
  std::vector<double> out(sums.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t w = 0; w < sums.size(); ++w)
    if (counts[w] > 0) out[w] = sums[w] / counts[w];
  return out;
}

inline int first_window_below(const std::vector<double>& win, double threshold) {
  for (std::size_t w = 0; w < win.size(); ++w)
    if (std::isfinite(win[w]) && win[w] < threshold) return static_cast<int>(w);
  return -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_train(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const AnyProblem problem = build_problem(cfg.problem);
  const auto records = detail::run_seeds(problem, cfg.optimizer.variant, cfg.optimizer.hp,
                                         cfg.loop.loop, cfg.loop.plan(), cfg.seeds);
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    write_run_csv(cfg.out_dir + "/" + detail::run_csv_name("", cfg.seeds[i]), records[i]);

  std::vector<double> xs;
  std::vector<std::vector<double>> curves;
  detail::collect_rows(records, &RunRow::train_loss, xs, curves);
  if (!xs.empty())
    write_line_plot(cfg.out_dir + "/loss.svg", {"training loss", "step", "loss", false},
                    {band_series("loss", xs, curves)});
  detail::collect_rows(records, &RunRow::msd, xs, curves);
  bool have_msd = false;
  for (const auto& c : curves)
    for (double v : c)
      if (std::isfinite(v)) have_msd = true;
  if (have_msd)
    write_line_plot(cfg.out_dir + "/msd.svg",
                    {"mean squared distance to the optimum", "step", "||theta - theta*||^2", true},
                    {band_series("msd", xs, curves)});

  bool diverged = false;
  for (const RunRecord& r : records) diverged = diverged || r.diverged;
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = {
      {"schema_version", 1},
      {"command", "train"},
      {"variant", detail::variant_to_string(cfg.optimizer.variant)},
      {"seeds", cfg.seeds},
      {"per_seed", detail::per_seed_json(cfg.seeds, records)},
      {"mean_final_loss", detail::mean_of(records, &RunRecord::final_loss)},
      {"mean_final_msd", detail::mean_of(records, &RunRecord::final_msd)},
      {"mean_val_accuracy", detail::mean_of(records, &RunRecord::val_accuracy)},
      {"diverged", diverged},
      {"wall_time_sec", wall},
  };
  write_json(cfg.out_dir + "/summary.json", summary);
  return diverged ? kExitDiverged : kExitOk;
}

inline int cmd_verify_bound(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.problem.family != "quadratic")
    throw ConfigError({"verify-bound: requires problem.family = quadratic "
                       "(constants are exact only for the quadratic family)"});
  if (!is_discover_family(cfg.optimizer.variant))
    throw ConfigError({"verify-bound: optimizer.variant must be a Discover-family method"});
  const ClusteredQuadratic problem =
      std::get<ClusteredQuadratic>(build_problem(cfg.problem));
  const ConvexityConstants constants = compute_constants(problem);
  double mu_max;
  try {
    mu_max = step_size_window(constants, cfg.loop.batch_size, cfg.optimizer.hp.alpha);
  } catch (const std::invalid_argument& e) {
    throw ConfigError({std::string("verify-bound: ") + e.what()});
  }
  const ParamVector theta_star = problem.true_minimizer();
  const std::int64_t total = cfg.loop.loop.total_steps;

  std::vector<std::vector<double>> msd(cfg.seeds.size());
  const AnyProblem any{problem};
  const auto records = detail::run_seeds(
      any, cfg.optimizer.variant, cfg.optimizer.hp, cfg.loop.loop, cfg.loop.plan(), cfg.seeds,
      [&](std::size_t i) -> StepObserver {
        msd[i].reserve(static_cast<std::size_t>(total) + 1);
        return [&msd, i, &theta_star](std::int64_t, const ParamVector& th,
                                      const OptimizerState&) {
          msd[i].push_back((th - theta_star).squaredNorm());
        };
      });
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    write_run_csv(cfg.out_dir + "/" + detail::run_csv_name("", cfg.seeds[i]), records[i]);

  bool diverged = false;
  for (const RunRecord& r : records) diverged = diverged || r.diverged;
  double msd0 = 0.0;
  for (const auto& traj : msd) msd0 += traj.empty() ? 0.0 : traj.front();
  msd0 /= static_cast<double>(msd.size());
  const TheoremBound bound =
      theorem_bound_curve(constants, cfg.optimizer.hp.mu, cfg.optimizer.hp.alpha,
                          cfg.loop.batch_size, msd0, total);
  BoundVerification verification;
  if (!diverged) verification = verify_bound(msd, bound);
  verification.in_regime = bound.in_regime;

  // seed-mean MSD vs the bound curve
  std::vector<double> xs, mean_curve;
  if (!diverged) {
    for (std::size_t t = 0; t < msd[0].size(); ++t) {
      double m = 0.0;
      for (const auto& traj : msd) m += traj[t];
      xs.push_back(static_cast<double>(t));
      mean_curve.push_back(m / static_cast<double>(msd.size()));
    }
    PlotSeries mean_s{"seed-mean msd", xs, mean_curve, {}, {}};
    PlotSeries bound_s{"theorem bound", xs,
                       std::vector<double>(bound.bound_curve.begin(),
                                           bound.bound_curve.begin() +
                                               static_cast<std::ptrdiff_t>(xs.size())),
                       {},
                       {}};
    write_line_plot(cfg.out_dir + "/msd_bound.svg",
                    {"seed-averaged MSD against the convergence bound", "step",
                     "E||theta - theta*||^2", true},
                    {mean_s, bound_s});
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = {
      {"schema_version", 1},
      {"command", "verify-bound"},
      {"variant", detail::variant_to_string(cfg.optimizer.variant)},
      {"seeds", cfg.seeds},
      {"constants",
       {{"nu", constants.nu},
        {"delta", constants.delta},
        {"sigma_in_sq", constants.sigma_in_sq},
        {"C1", constants.C1},
        {"G0", constants.G0},
        {"p_min", constants.p_min}}},
      {"mu", cfg.optimizer.hp.mu},
      {"alpha", cfg.optimizer.hp.alpha},
      {"mu_max", mu_max},
      {"in_regime", bound.in_regime},
      {"q", bound.q},
      {"gamma", bound.gamma},
      {"steady_state_bound", bound.steady_state},
      {"msd0", msd0},
      {"violation_fraction", verification.violation_fraction},
      {"bound_passed", verification.passed},
      {"n_seeds", static_cast<int>(cfg.seeds.size())},
      {"diverged", diverged},
      {"wall_time_sec", wall},
  };
  write_json(cfg.out_dir + "/summary.json", summary);
  return diverged ? kExitDiverged : kExitOk;
}

/// Between-cluster variance measurement: SGD, Momentum and Discover run on
/// the same problem, seeds and hyperparameters; per-step estimates are
/// averaged over 100-step windows.
inline int cmd_variance(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  const AnyProblem problem = build_problem(cfg.problem);
  TrainLoopConfig loop = cfg.loop.loop;
  loop.variance_metrics = true;
  loop.eval_every = 1;

  const std::vector<Variant> trio = {Variant::Sgd, Variant::Momentum, Variant::Discover};
  nlohmann::json per_opt = nlohmann::json::object();
  std::vector<PlotSeries> plot;
  bool diverged = false;
  for (const Variant variant : trio) {
    const std::string name = detail::variant_to_string(variant);
    const auto records =
        detail::run_seeds(problem, variant, cfg.optimizer.hp, loop, cfg.loop.plan(), cfg.seeds);
    std::vector<std::vector<double>> windows;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      write_run_csv(cfg.out_dir + "/" + detail::run_csv_name(name, cfg.seeds[i]), records[i]);
      diverged = diverged || records[i].diverged;
      windows.push_back(detail::windowed(records[i].rows, &RunRow::between_var, kVarianceWindow));
    }
    // seed-mean windowed curve
    std::size_t len = windows[0].size();
    for (const auto& w : windows) len = std::min(len, w.size());
    std::vector<double> mean(len, 0.0), xs(len);
    for (std::size_t w = 0; w < len; ++w) {
      for (const auto& c : windows) mean[w] += c[w];
      mean[w] /= static_cast<double>(windows.size());
      xs[w] = static_cast<double>((w + 1) * kVarianceWindow);
    }
    const double initial = mean.empty() ? 0.0 : mean.front();
    const int crossing = detail::first_window_below(mean, 0.1 * initial);
    per_opt[name] = {{"initial_window", initial},
                     {"final_window", mean.empty() ? 0.0 : mean.back()},
                     {"crossing_window", crossing},
                     {"n_windows", static_cast<int>(len)}};
    plot.push_back(PlotSeries{name, xs, mean, {}, {}});
  }
  write_line_plot(cfg.out_dir + "/variance.svg",
                  {"between-cluster variance estimate (mean per 100 train steps)", "step",
                   "between-cluster variance", true},
                  plot);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = {
      {"schema_version", 1}, {"command", "variance"},      {"seeds", cfg.seeds},
      {"window", kVarianceWindow}, {"optimizers", per_opt}, {"diverged", diverged},
      {"wall_time_sec", wall},
  };
  write_json(cfg.out_dir + "/summary.json", summary);
  return diverged ? kExitDiverged : kExitOk;
}

inline int cmd_sweep(const RunConfig& cfg, const Json& raw_config) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!cfg.sweep.is_object() || cfg.sweep.empty())
    throw ConfigError({"sweep: config must contain a non-empty 'sweep' object"});
  std::vector<std::string> keys;
  std::vector<std::vector<Json>> values;
  for (const auto& [key, vals] : cfg.sweep.items()) {
    if (!vals.is_array() || vals.empty())
      throw ConfigError({"sweep." + key + ": must be a non-empty array of values"});
    keys.push_back(key);
    values.emplace_back(vals.begin(), vals.end());
  }
  std::size_t n_combos = 1;
  for (const auto& v : values) n_combos *= v.size();

  nlohmann::json rows = nlohmann::json::array();
  bool diverged = false;
  for (std::size_t combo = 0; combo < n_combos; ++combo) {
    Json patched = raw_config;
    patched.erase("sweep");
    nlohmann::json combo_desc = nlohmann::json::object();
    std::size_t rem = combo;
    for (std::size_t k = 0; k < keys.size(); ++k) {
      const Json& val = values[k][rem % values[k].size()];
      rem /= values[k].size();
      // dotted path into the raw config
      Json* node = &patched;
      std::string path = keys[k];
      std::size_t pos;
      while ((pos = path.find('.')) != std::string::npos) {
        node = &(*node)[path.substr(0, pos)];
        path = path.substr(pos + 1);
      }
      (*node)[path] = val;
      combo_desc[keys[k]] = val;
    }
    RunConfig combo_cfg = parse_config_json(patched);
    combo_cfg.out_dir = cfg.out_dir + "/combo-" + std::to_string(combo);
    std::filesystem::create_directories(combo_cfg.out_dir);
    const AnyProblem problem = build_problem(combo_cfg.problem);
    const auto records =
        detail::run_seeds(problem, combo_cfg.optimizer.variant, combo_cfg.optimizer.hp,
                          combo_cfg.loop.loop, combo_cfg.loop.plan(), combo_cfg.seeds);
    for (std::size_t i = 0; i < combo_cfg.seeds.size(); ++i)
      write_run_csv(combo_cfg.out_dir + "/" + detail::run_csv_name("", combo_cfg.seeds[i]),
                    records[i]);
    bool combo_diverged = false;
    for (const RunRecord& r : records) combo_diverged = combo_diverged || r.diverged;
    diverged = diverged || combo_diverged;
    rows.push_back({{"combo", combo},
                    {"params", combo_desc},
                    {"mean_final_loss", detail::mean_of(records, &RunRecord::final_loss)},
                    {"mean_final_msd", detail::mean_of(records, &RunRecord::final_msd)},
                    {"mean_val_accuracy", detail::mean_of(records, &RunRecord::val_accuracy)},
                    {"diverged", combo_diverged}});
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json summary = {
      {"schema_version", 1}, {"command", "sweep"},   {"seeds", cfg.seeds},
      {"combos", rows},      {"diverged", diverged}, {"wall_time_sec", wall},
  };
  write_json(cfg.out_dir + "/sweep_summary.json", summary);
  return diverged ? kExitDiverged : kExitOk;
}

// ---------------------------------------------------------------------------

inline int run_suite(const RunConfig& cfg, const std::string& subcommand,
                     const Json& raw_config = {}) {
  std::filesystem::create_directories(cfg.out_dir);
  if (subcommand == "train") return cmd_train(cfg);
  if (subcommand == "verify-bound") return cmd_verify_bound(cfg);
  if (subcommand == "variance") return cmd_variance(cfg);
  if (subcommand == "sweep") return cmd_sweep(cfg, raw_config);
  throw ConfigError({"unknown subcommand: " + subcommand});
}

}  // namespace discover
