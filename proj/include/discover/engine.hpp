#pragma once

#include "discover/core.hpp"
#include "discover/metrics.hpp"
#include "discover/optim.hpp"
#include "discover/problems.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace discover {

// ---------------------------------------------------------------------------
// Worker pool helpers

/// Worker cap: DISCOVER_OPT_THREADS if set, else hardware concurrency.
inline int max_workers() {
  if (const char* env = std::getenv("DISCOVER_OPT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace detail {
inline bool& in_parallel_region() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

/// Runs fn(i) for i in [0, n) over at most max_workers() threads; nested
/// calls run inline. Results must go to disjoint slots.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const std::int64_t workers = std::min<std::int64_t>(max_workers(), n);
  if (workers <= 1 || detail::in_parallel_region()) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (std::int64_t w = 0; w < workers; ++w) {
    threads.emplace_back([&fn, w, n, workers] {
      detail::in_parallel_region() = true;
      for (std::int64_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (std::thread& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// Batch composition

enum class Composition { SingleClusterPerShard, Proportional, Iid };

inline std::string to_string(Composition c) {
  switch (c) {
    case Composition::SingleClusterPerShard: return "single_cluster_per_shard";
    case Composition::Proportional: return "proportional";
    case Composition::Iid: return "iid";
  }
  return "?";
}

struct ShardingPlan {
  int n_shards = 1;
  int samples_per_shard = 20;
  Composition composition = Composition::Iid;

  int batch_size() const { return n_shards * samples_per_shard; }
  void validate() const {
    require(n_shards >= 1, "ShardingPlan: n_shards must be positive");
    require(samples_per_shard >= 1, "ShardingPlan: samples_per_shard must be positive");
  }
};

namespace detail {

/// Largest-remainder rounding of p_n * total. Deterministic; ties go to the
/// lower cluster index.
inline std::vector<int> proportional_counts(const ClusterSpec& spec, int total) {
  const int n = spec.n_clusters();
  std::vector<int> counts(static_cast<std::size_t>(n));
  std::vector<std::pair<double, int>> rema;
  int assigned = 0;
  for (int i = 0; i < n; ++i) {
    const double target = spec.prob(i) * total;
    counts[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(target));
    assigned += counts[static_cast<std::size_t>(i)];
    rema.emplace_back(target - std::floor(target), i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int k = 0; k < total - assigned; ++k)
    ++counts[static_cast<std::size_t>(rema[static_cast<std::size_t>(k)].second)];
  return counts;
}

}  // namespace detail

/// Composes one batch. `rng` should be a per-step derived stream and
/// `first_sample_id` the global index of the batch's first slot; sample ids
/// then do not depend on the shard count. In single_cluster_per_shard mode
/// every shard's slots share one cluster drawn with probability p_n.
inline MiniBatch compose_batch(const ClusterSpec& spec, const ShardingPlan& plan, RngStream rng,
                               std::uint64_t first_sample_id) {
  plan.validate();
  MiniBatch batch;
  const int total = plan.batch_size();
  batch.items.reserve(static_cast<std::size_t>(total));
  switch (plan.composition) {
    case Composition::SingleClusterPerShard: {
      for (int j = 0; j < plan.n_shards; ++j) {
        RngStream srng = rng.derive(static_cast<std::uint64_t>(j));
        const int n = srng.next_index(spec.probs());
        for (int i = 0; i < plan.samples_per_shard; ++i) {
          const std::uint64_t slot =
              static_cast<std::uint64_t>(j) * static_cast<std::uint64_t>(plan.samples_per_shard) +
              static_cast<std::uint64_t>(i);
          batch.items.push_back({n, first_sample_id + slot});
        }
      }
      break;
    }
    case Composition::Proportional: {
      const std::vector<int> counts = detail::proportional_counts(spec, total);
      std::uint64_t slot = 0;
      for (int n = 0; n < spec.n_clusters(); ++n)
        for (int i = 0; i < counts[static_cast<std::size_t>(n)]; ++i)
          batch.items.push_back({n, first_sample_id + slot++});
      break;
    }
    case Composition::Iid: {
      for (int slot = 0; slot < total; ++slot) {
        RngStream srng = rng.derive(static_cast<std::uint64_t>(slot));
        batch.items.push_back(
            {srng.next_index(spec.probs()), first_sample_id + static_cast<std::uint64_t>(slot)});
      }
      break;
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Cross-shard buffer synchronization

struct ShardReport {
  int shard_id = 0;
  ClusterGradSummary summary;
};

/// Merges per-shard reports in (cluster id, shard id) order and applies the
/// buffer updates of the state's variant. Same-cluster contributions combine
/// through their gradient sums and counts, so equally loaded shards average
/// exactly as in the cross-device scheme; clusters absent from every report
/// keep their buffers untouched. Theta and the step counter are not touched.
inline ClusterGradSummary sync_buffers(OptimizerState& state, std::span<const ShardReport> reports,
                                       const HyperParams& hp, const ClusterSpec& spec,
                                       int expected_shards) {
  require(static_cast<int>(reports.size()) == expected_shards,
          "sync_buffers: missing shard report");
  std::vector<const ShardReport*> ordered(static_cast<std::size_t>(expected_shards), nullptr);
  for (const ShardReport& r : reports) {
    require(r.shard_id >= 0 && r.shard_id < expected_shards, "sync_buffers: bad shard id");
    require(ordered[static_cast<std::size_t>(r.shard_id)] == nullptr,
            "sync_buffers: duplicate shard report");
    ordered[static_cast<std::size_t>(r.shard_id)] = &r;
  }
  std::vector<ClusterGradSummary> parts;
  parts.reserve(ordered.size());
  for (const ShardReport* r : ordered) parts.push_back(r->summary);
  ClusterGradSummary merged = merge_summaries(parts);
  discover_buffer_update(state, merged, hp, spec);
  return merged;
}

// ---------------------------------------------------------------------------
// Training loop

enum class LrSchedule { Constant, Cosine };

struct TrainLoopConfig {
  std::int64_t total_steps = 1000;
  std::int64_t warmup_steps = 0;
  LrSchedule lr_schedule = LrSchedule::Constant;
  double weight_decay = 0.0;  // decoupled: theta *= (1 - lambda * lr) after the step
  std::int64_t eval_every = 1;
  double init_scale = 0.0;  // 0 -> theta_0 = 0, else init_scale * N(0, I)
  bool variance_metrics = false;
  int mc_cluster_mean_samples = 128;   // g_n estimator size (logistic)
  std::int64_t noise_probe_every = 0;  // 0 = off (quadratic only)
  int noise_probe_batches = 256;
  int validation_size = 0;  // > 0 -> final accuracy (logistic)
  bool quiet = true;

  void validate() const {
    require(total_steps >= 0, "TrainLoopConfig: total_steps must be >= 0");
    require(warmup_steps >= 0 && (total_steps == 0 || warmup_steps < total_steps),
            "TrainLoopConfig: warmup_steps must be < total_steps");
    require(weight_decay >= 0.0, "TrainLoopConfig: weight_decay must be >= 0");
    require(eval_every >= 1, "TrainLoopConfig: eval_every must be >= 1");
  }
};

/// Learning rate at step t: linear warmup to the peak, then constant or a
/// cosine decay reaching 0 at t = total_steps.
inline double learning_rate(const TrainLoopConfig& cfg, double mu, std::int64_t t) {
  if (cfg.warmup_steps > 0 && t < cfg.warmup_steps)
    return mu * static_cast<double>(t + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.lr_schedule == LrSchedule::Constant) return mu;
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  const double progress =
      span <= 0.0 ? 1.0 : static_cast<double>(t - cfg.warmup_steps) / span;
  return mu * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(progress, 1.0)));
}

struct RunRow {
  std::int64_t step = 0;
  double lr = std::numeric_limits<double>::quiet_NaN();
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double msd = std::numeric_limits<double>::quiet_NaN();
  double in_var = std::numeric_limits<double>::quiet_NaN();
  double between_var = std::numeric_limits<double>::quiet_NaN();
  double noise_mean_norm = std::numeric_limits<double>::quiet_NaN();
  double gbar_drift = std::numeric_limits<double>::quiet_NaN();
};

struct RunRecord {
  std::vector<RunRow> rows;
  bool diverged = false;
  std::int64_t steps_completed = 0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  double final_msd = std::numeric_limits<double>::quiet_NaN();
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  ParamVector final_theta;
  std::map<std::string, double> extra;
};

/// Called with (t, theta_t, state after t steps), at t = 0 and after each step.
using StepObserver = std::function<void(std::int64_t, const ParamVector&, const OptimizerState&)>;

namespace detail {

template <class P>
concept HasTrueMinimizer = requires(const P& p) {
  { p.true_minimizer() } -> std::convertible_to<ParamVector>;
};

template <class P>
concept LogisticLike = requires(const P& p) { typename P::Example; };

}  // namespace detail

/// Deterministic training loop with cluster-aware composition and simulated
/// data-parallel shards. Per-sample randomness is keyed by sample id, so the
/// sample stream is identical for every shard count; all cross-shard
/// reductions run in fixed order.
template <class Problem>
RunRecord run_training(const Problem& problem, Variant variant, HyperParams hp,
                       const TrainLoopConfig& loop, const ShardingPlan& plan, std::uint64_t seed,
                       const StepObserver& observe = {}) {
  loop.validate();
  plan.validate();
  const ClusterSpec& spec = problem.spec();
  const Eigen::Index dim = problem.dim();
  const int batch_size = plan.batch_size();
  if (is_discover_family(variant)) hp.resolved_alpha_n(spec);  // fail fast

  std::optional<ParamVector> theta_star;
  if constexpr (detail::HasTrueMinimizer<Problem>) theta_star = problem.true_minimizer();

  ParamVector theta = ParamVector::Zero(dim);
  if (loop.init_scale > 0.0) {
    RngStream init_rng = RngStream(seed, RngStream::kInit).derive(7);
    theta = init_rng.normal_vector(dim, loop.init_scale);
  }
  OptimizerState state = init_state(variant, dim, spec);

  RngStream compose_root(seed, RngStream::kShuffle);
  RngStream metrics_root(seed, RngStream::kMetrics);
  RngStream noise_root(seed, RngStream::kNoise);
  RngStream data_root(seed, RngStream::kData);
  RngStream flip_root(seed, RngStream::kLabelFlip);

  RunRecord record;
  const auto msd_now = [&]() {
    return theta_star ? (theta - *theta_star).squaredNorm()
                      : std::numeric_limits<double>::quiet_NaN();
  };
  const auto eval_grad = [&](const BatchItem& item, const ParamVector& at) -> ParamVector {
    if constexpr (detail::LogisticLike<Problem>) {
      RngStream data = data_root.derive(item.sample_id);
      RngStream flips = flip_root.derive(item.sample_id);
      return problem.gradient(at, problem.sample_example(item.cluster_id, data, flips));
    } else {
      RngStream noise = noise_root.derive(item.sample_id);
      return problem.sample_gradient(item.cluster_id, at, noise);
    }
  };
  const auto train_loss_at = [&](const MiniBatch* batch) -> double {
    if constexpr (detail::LogisticLike<Problem>) {
      if (batch == nullptr || batch->empty()) return std::numeric_limits<double>::quiet_NaN();
      double acc = 0.0;
      for (const BatchItem& item : batch->items) {
        RngStream data = data_root.derive(item.sample_id);
        RngStream flips = flip_root.derive(item.sample_id);
        acc += problem.loss(theta, problem.sample_example(item.cluster_id, data, flips));
      }
      return acc / static_cast<double>(batch->size());
    } else {
      return problem.loss(theta);
    }
  };
  const auto cluster_means_now = [&]() {
    std::vector<ParamVector> means;
    means.reserve(static_cast<std::size_t>(spec.n_clusters()));
    for (int n = 0; n < spec.n_clusters(); ++n) {
      if constexpr (detail::LogisticLike<Problem>) {
        means.push_back(problem.mc_cluster_mean_gradient(
            n, theta, metrics_root.derive(0xC1, static_cast<std::uint64_t>(n)),
            loop.mc_cluster_mean_samples));
      } else {
        means.push_back(problem.cluster_mean_gradient(n, theta));
      }
    }
    return means;
  };
  const auto emit_row = [&](std::int64_t t, double lr, const MiniBatch* batch,
                            const std::vector<ParamVector>* pre_buffers) {
    RunRow row;
    row.step = t;
    row.lr = lr;
    row.train_loss = train_loss_at(batch);
    row.msd = msd_now();
    if constexpr (!detail::LogisticLike<Problem>) {
      double in_var = 0.0;
      for (int n = 0; n < spec.n_clusters(); ++n)
        in_var += spec.prob(n) * problem.sigma_n_sq(n, theta);
      row.in_var = in_var;
    }
    if (loop.variance_metrics && variant != Variant::Adam) {
      const std::vector<ParamVector> means = cluster_means_now();
      if (variant == Variant::Sgd || pre_buffers == nullptr) {
        row.between_var = between_var_from_means(means, spec);
      } else {
        row.between_var =
            between_var_from_buffers(*pre_buffers, means, spec, batch_size);
      }
    }
    if (is_discover_family(variant)) row.gbar_drift = gbar_drift(state, spec);
    record.rows.push_back(row);
  };

  const auto snapshot_buffers = [&]() {
    std::vector<ParamVector> out;
    if (is_discover_family(variant)) out = state.cluster_buffers;
    else if (variant != Variant::Sgd && variant != Variant::Adam) out.push_back(state.v);
    return out;
  };

  if (observe) observe(0, theta, state);
  {
    // initial row (step 0); the step-0 batch is recomposed identically below
    const MiniBatch batch0 =
        loop.total_steps > 0 ? compose_batch(spec, plan, compose_root.derive(0), 0) : MiniBatch{};
    std::vector<ParamVector> buffers0;
    if (loop.variance_metrics) buffers0 = snapshot_buffers();
    emit_row(0, learning_rate(loop, hp.mu, 0), batch0.empty() ? nullptr : &batch0,
             buffers0.empty() ? nullptr : &buffers0);
  }
  if (loop.total_steps == 0) {
    record.steps_completed = 0;
    record.final_loss = record.rows.back().train_loss;
    record.final_msd = record.rows.back().msd;
    record.final_theta = theta;
    return record;
  }

  GradResponse grads(static_cast<std::size_t>(batch_size));
  std::vector<ClusterGradSummary> shard_summaries(static_cast<std::size_t>(plan.n_shards));

  for (std::int64_t t = 0; t < loop.total_steps; ++t) {
    const double lr = learning_rate(loop, hp.mu, t);
    HyperParams hp_t = hp;
    hp_t.mu = lr;

    const MiniBatch batch =
        compose_batch(spec, plan, compose_root.derive(static_cast<std::uint64_t>(t)),
                      static_cast<std::uint64_t>(t) * static_cast<std::uint64_t>(batch_size));
    const ParamVector eval_point = transport_point(state, theta, hp_t);

    // Sharded evaluation: shard j owns slots [j*spc, (j+1)*spc).
    parallel_for(plan.n_shards, [&](std::int64_t j) {
      const int begin = static_cast<int>(j) * plan.samples_per_shard;
      for (int i = begin; i < begin + plan.samples_per_shard; ++i) {
        const BatchItem& item = batch.items[static_cast<std::size_t>(i)];
        grads[static_cast<std::size_t>(i)] = {item.cluster_id, eval_grad(item, eval_point)};
      }
      shard_summaries[static_cast<std::size_t>(j)] = summarize(
          std::span<const GradSample>(grads.data() + begin,
                                      static_cast<std::size_t>(plan.samples_per_shard)),
          spec);
    });

    const bool want_row = ((t + 1) % loop.eval_every == 0) || (t + 1 == loop.total_steps);
    std::vector<ParamVector> pre_buffers;
    if (loop.variance_metrics && want_row) pre_buffers = snapshot_buffers();

    // Fixed-order reduction, then the optimizer step (theta before buffers).
    const ClusterGradSummary merged = merge_summaries(shard_summaries);
    switch (variant) {
      case Variant::Discover:
        theta = discover_apply(state, theta, merged, hp_t, spec);
        break;
      case Variant::DiscoverQhm:
        theta = discover_qhm_apply(state, theta, merged, hp_t, spec);
        break;
      case Variant::DiscoverIgt:
        theta = discover_igt_apply(state, theta, merged, hp_t, spec);
        break;
      default: {
        ParamVector sum = ParamVector::Zero(dim);
        for (const auto& [n, gsum] : merged.grad_sum) sum += gsum;
        const ParamVector mean = sum / static_cast<double>(batch_size);
        switch (variant) {
          case Variant::Sgd: theta = sgd_apply(state, theta, mean, hp_t); break;
          case Variant::Momentum: theta = momentum_apply(state, theta, mean, hp_t); break;
          case Variant::Qhm: theta = qhm_apply(state, theta, mean, hp_t); break;
          case Variant::Igt: theta = igt_apply(state, theta, mean, hp_t); break;
          case Variant::Adam: theta = adam_apply(state, theta, mean, hp_t); break;
          default: throw std::logic_error("run_training: unhandled variant");
        }
        break;
      }
    }
    if (loop.weight_decay != 0.0) theta *= (1.0 - loop.weight_decay * lr);

    if (!theta.allFinite() || (theta_star && msd_now() > 1e12)) {
      record.diverged = true;
      record.steps_completed = t + 1;
      RunRow row;
      row.step = t + 1;
      row.lr = lr;
      row.msd = theta.allFinite() ? msd_now() : std::numeric_limits<double>::quiet_NaN();
      record.rows.push_back(row);
      break;
    }

    if (observe) observe(t + 1, theta, state);
    if (want_row)
      emit_row(t + 1, lr, &batch, pre_buffers.empty() ? nullptr : &pre_buffers);
    if (loop.noise_probe_every > 0 && (t + 1) % loop.noise_probe_every == 0) {
      if constexpr (!detail::LogisticLike<Problem>) {
        const NoiseMoments nm =
            noise_moments(problem, state, theta, spec, batch_size, loop.noise_probe_batches,
                          metrics_root.derive(0xE0, static_cast<std::uint64_t>(t)));
        if (!record.rows.empty() && record.rows.back().step == t + 1)
          record.rows.back().noise_mean_norm = nm.mean_norm;
      }
    }
    if (!loop.quiet && (t + 1) % std::max<std::int64_t>(1, loop.total_steps / 10) == 0) {
      std::fprintf(stdout, "step %lld/%lld loss %.6g msd %.6g\n", static_cast<long long>(t + 1),
                   static_cast<long long>(loop.total_steps),
                   record.rows.empty() ? 0.0 : record.rows.back().train_loss, msd_now());
      std::fflush(stdout);
    }
  }

  if (!record.diverged) record.steps_completed = loop.total_steps;
  record.final_msd = msd_now();
  record.final_loss =
      record.rows.empty() ? std::numeric_limits<double>::quiet_NaN() : record.rows.back().train_loss;
  record.final_theta = theta;
  if constexpr (detail::LogisticLike<Problem>) {
    if (loop.validation_size > 0) {
      // fixed across run seeds so accuracies are directly comparable
      const auto val = problem.make_validation_set(loop.validation_size,
                                                   RngStream(42, RngStream::kMetrics).derive(0x5A));
      record.val_accuracy = problem.accuracy(theta, val);
    }
  }
  return record;
}

}  // namespace discover
