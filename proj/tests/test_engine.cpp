#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "discover/engine.hpp"
#include "discover/theory.hpp"

#include <cstring>
#include <set>

using namespace discover;

namespace {

bool bitwise_equal(const ParamVector& a, const ParamVector& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

ClusteredQuadratic default_instance(std::uint64_t seed = 1) {
  return ClusteredQuadratic::random_instance(8, ClusterSpec::uniform(4), 0.5, 2.0, 1.0, 0.5, seed);
}

}  // namespace

TEST_CASE("compose_batch") {
  SUBCASE("N=1 makes all modes identical") {
    ClusterSpec one = ClusterSpec::uniform(1);
    ShardingPlan plan{2, 3, Composition::Iid};
    RngStream rng(4, RngStream::kShuffle);
    MiniBatch iid = compose_batch(one, plan, rng.derive(0), 100);
    plan.composition = Composition::Proportional;
    MiniBatch prop = compose_batch(one, plan, rng.derive(0), 100);
    plan.composition = Composition::SingleClusterPerShard;
    MiniBatch single = compose_batch(one, plan, rng.derive(0), 100);
    REQUIRE(iid.size() == 6);
    for (int i = 0; i < 6; ++i) {
      CHECK(iid.items[static_cast<std::size_t>(i)].cluster_id == 0);
      CHECK(iid.items[static_cast<std::size_t>(i)].sample_id ==
            prop.items[static_cast<std::size_t>(i)].sample_id);
      CHECK(prop.items[static_cast<std::size_t>(i)].sample_id ==
            single.items[static_cast<std::size_t>(i)].sample_id);
    }
  }
  SUBCASE("single-cluster mode gives each shard one cluster") {
    ClusterSpec spec = ClusterSpec::uniform(5);
    ShardingPlan plan{8, 4, Composition::SingleClusterPerShard};
    RngStream rng(5, RngStream::kShuffle);
    MiniBatch batch = compose_batch(spec, plan, rng.derive(3), 0);
    for (int j = 0; j < 8; ++j) {
      const int first = batch.items[static_cast<std::size_t>(j * 4)].cluster_id;
      for (int i = 0; i < 4; ++i)
        CHECK(batch.items[static_cast<std::size_t>(j * 4 + i)].cluster_id == first);
    }
  }
  SUBCASE("proportional counts use largest-remainder rounding") {
    ShardingPlan plan{1, 10, Composition::Proportional};
    RngStream rng(6, RngStream::kShuffle);
    MiniBatch batch = compose_batch(ClusterSpec({0.5, 0.3, 0.2}), plan, rng.derive(0), 0);
    std::map<int, int> counts;
    for (const auto& item : batch.items) ++counts[item.cluster_id];
    CHECK(counts[0] == 5);
    CHECK(counts[1] == 3);
    CHECK(counts[2] == 2);

    MiniBatch thirds = compose_batch(ClusterSpec::uniform(3), plan, rng.derive(0), 0);
    counts.clear();
    for (const auto& item : thirds.items) ++counts[item.cluster_id];
    CHECK(counts[0] == 4);  // remainder goes to the lowest index
    CHECK(counts[1] == 3);
    CHECK(counts[2] == 3);
  }
  SUBCASE("sample ids are the global slot indices") {
    ClusterSpec spec = ClusterSpec::uniform(3);
    ShardingPlan plan{2, 5, Composition::Iid};
    RngStream rng(7, RngStream::kShuffle);
    MiniBatch batch = compose_batch(spec, plan, rng.derive(9), 770);
    for (int i = 0; i < 10; ++i)
      CHECK(batch.items[static_cast<std::size_t>(i)].sample_id ==
            770 + static_cast<std::uint64_t>(i));
  }
  SUBCASE("empirical cluster frequencies match p_n within 3 SE") {
    ClusterSpec spec = ClusterSpec({0.4, 0.35, 0.25});
    RngStream rng(8, RngStream::kShuffle);
    for (Composition comp : {Composition::SingleClusterPerShard, Composition::Iid}) {
      ShardingPlan plan{4, 1, comp};
      std::vector<std::int64_t> counts(3, 0);
      const int batches = 10000;
      std::int64_t total = 0;
      for (int t = 0; t < batches; ++t) {
        MiniBatch b = compose_batch(spec, plan, rng.derive(static_cast<std::uint64_t>(t)), 0);
        for (const auto& item : b.items) {
          ++counts[static_cast<std::size_t>(item.cluster_id)];
          ++total;
        }
      }
      for (int n = 0; n < 3; ++n) {
        const double p = spec.prob(n);
        const double freq = static_cast<double>(counts[static_cast<std::size_t>(n)]) /
                            static_cast<double>(total);
        // draws are per shard, so the effective sample count is batches * shards
        const double se = std::sqrt(p * (1 - p) / (batches * 4.0));
        CHECK(std::abs(freq - p) < 3 * se);
      }
    }
  }
}

TEST_CASE("learning_rate schedule") {
  TrainLoopConfig cfg;
  cfg.total_steps = 1000;
  cfg.warmup_steps = 5;
  cfg.lr_schedule = LrSchedule::Cosine;
  const double mu = 0.3;
  CHECK(learning_rate(cfg, mu, 5) == doctest::Approx(mu).epsilon(1e-15));  // warmup end = peak
  CHECK(learning_rate(cfg, mu, 0) == doctest::Approx(mu / 5).epsilon(1e-12));
  CHECK(learning_rate(cfg, mu, 1000) <= 1e-3 * mu);
  for (std::int64_t t = 6; t < 1000; t += 97)
    CHECK(learning_rate(cfg, mu, t) < learning_rate(cfg, mu, t - 1));

  TrainLoopConfig flat;
  flat.total_steps = 100;
  flat.lr_schedule = LrSchedule::Constant;
  for (std::int64_t t = 0; t < 100; t += 13) CHECK(learning_rate(flat, mu, t) == mu);
}

TEST_CASE("sync_buffers") {
  ClusterSpec spec = ClusterSpec::uniform(3);
  HyperParams hp;
  hp.mu = 0.05;
  hp.alpha = 0.15;
  hp.alpha_n = {0.4, 0.4, 0.4};
  RngStream rng(21, RngStream::kInit);
  const int dim = 5;

  auto rand_grads = [&](std::vector<int> clusters) {
    GradResponse grads;
    for (int n : clusters) grads.push_back({n, rng.derive(grads.size() + 1000 * n).normal_vector(dim)});
    return grads;
  };

  SUBCASE("one shard reproduces the sequential update bitwise") {
    GradResponse grads = rand_grads({0, 1, 1, 2});
    OptimizerState seq = init_state(Variant::Discover, dim, spec);
    seq.cluster_buffers = {rng.derive(1).normal_vector(dim), rng.derive(2).normal_vector(dim),
                           rng.derive(3).normal_vector(dim)};
    seq.gbar = rng.derive(4).normal_vector(dim);
    OptimizerState sharded = seq;
    discover_buffer_update(seq, summarize(grads, spec), hp, spec);

    std::vector<ShardReport> reports{{0, summarize(grads, spec)}};
    sync_buffers(sharded, reports, hp, spec, 1);
    CHECK(bitwise_equal(seq.gbar, sharded.gbar));
    for (int n = 0; n < 3; ++n)
      CHECK(bitwise_equal(seq.cluster_buffers[static_cast<std::size_t>(n)],
                          sharded.cluster_buffers[static_cast<std::size_t>(n)]));
  }
  SUBCASE("equal-count same-cluster deltas average") {
    GradResponse a = rand_grads({1, 1});
    GradResponse b = rand_grads({1, 1});
    OptimizerState state = init_state(Variant::Discover, dim, spec);
    const ParamVector buf0 = rng.derive(9).normal_vector(dim);
    state.cluster_buffers[1] = buf0;
    std::vector<ShardReport> reports{{0, summarize(a, spec)}, {1, summarize(b, spec)}};
    sync_buffers(state, reports, hp, spec, 2);
    // each shard's delta: alpha_n (local mean - buf); averaged over the two
    const ParamVector mean_a = 0.5 * (a[0].grad + a[1].grad);
    const ParamVector mean_b = 0.5 * (b[0].grad + b[1].grad);
    const ParamVector d1 = 0.4 * (mean_a - buf0);
    const ParamVector d2 = 0.4 * (mean_b - buf0);
    const ParamVector want = buf0 + 0.5 * (d1 + d2);
    CHECK((state.cluster_buffers[1] - want).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("disjoint clusters: report order does not matter") {
    GradResponse a = rand_grads({0, 0});
    GradResponse b = rand_grads({2, 2});
    OptimizerState s1 = init_state(Variant::Discover, dim, spec);
    s1.cluster_buffers = {rng.derive(31).normal_vector(dim), rng.derive(32).normal_vector(dim),
                          rng.derive(33).normal_vector(dim)};
    s1.gbar = rng.derive(34).normal_vector(dim);
    OptimizerState s2 = s1;
    std::vector<ShardReport> fwd{{0, summarize(a, spec)}, {1, summarize(b, spec)}};
    std::vector<ShardReport> rev{{1, summarize(b, spec)}, {0, summarize(a, spec)}};
    sync_buffers(s1, fwd, hp, spec, 2);
    sync_buffers(s2, rev, hp, spec, 2);
    CHECK(bitwise_equal(s1.gbar, s2.gbar));
    for (int n = 0; n < 3; ++n)
      CHECK(bitwise_equal(s1.cluster_buffers[static_cast<std::size_t>(n)],
                          s2.cluster_buffers[static_cast<std::size_t>(n)]));
  }
  SUBCASE("missing or duplicate shard reports are hard errors") {
    OptimizerState state = init_state(Variant::Discover, dim, spec);
    std::vector<ShardReport> one{{0, summarize(rand_grads({0}), spec)}};
    CHECK_THROWS_AS(sync_buffers(state, one, hp, spec, 2), std::invalid_argument);
    std::vector<ShardReport> dup{{0, summarize(rand_grads({0}), spec)},
                                 {0, summarize(rand_grads({1}), spec)}};
    CHECK_THROWS_AS(sync_buffers(state, dup, hp, spec, 2), std::invalid_argument);
  }
}

TEST_CASE("run_training basics") {
  auto prob = default_instance();
  HyperParams hp;
  hp.mu = 0.02;
  hp.alpha = 0.15;

  SUBCASE("T=0 emits only the initial metrics") {
    TrainLoopConfig loop;
    loop.total_steps = 0;
    ShardingPlan plan{1, 4, Composition::Iid};
    const RunRecord rec = run_training(prob, Variant::Discover, hp, loop, plan, 3);
    CHECK(rec.rows.size() == 1);
    CHECK(rec.rows[0].step == 0);
    CHECK(rec.steps_completed == 0);
    CHECK(std::isfinite(rec.final_loss));
  }
  SUBCASE("row cadence and monotone step column") {
    TrainLoopConfig loop;
    loop.total_steps = 25;
    loop.eval_every = 10;
    ShardingPlan plan{1, 4, Composition::Iid};
    const RunRecord rec = run_training(prob, Variant::Momentum, hp, loop, plan, 3);
    REQUIRE(rec.rows.size() == 4);
    CHECK(rec.rows[0].step == 0);
    CHECK(rec.rows[1].step == 10);
    CHECK(rec.rows[2].step == 20);
    CHECK(rec.rows[3].step == 25);
  }
  SUBCASE("identical seeds are bitwise deterministic") {
    TrainLoopConfig loop;
    loop.total_steps = 60;
    loop.eval_every = 5;
    ShardingPlan plan{2, 4, Composition::Iid};
    const RunRecord a = run_training(prob, Variant::Discover, hp, loop, plan, 11);
    const RunRecord b = run_training(prob, Variant::Discover, hp, loop, plan, 11);
    REQUIRE(a.rows.size() == b.rows.size());
    CHECK(bitwise_equal(a.final_theta, b.final_theta));
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      CHECK(std::memcmp(&a.rows[i].train_loss, &b.rows[i].train_loss, sizeof(double)) == 0);
      CHECK(std::memcmp(&a.rows[i].msd, &b.rows[i].msd, sizeof(double)) == 0);
    }
  }
  SUBCASE("weight decay 0 is a bitwise no-op") {
    TrainLoopConfig decay0;
    decay0.total_steps = 40;
    decay0.weight_decay = 0.0;
    TrainLoopConfig plain = decay0;
    ShardingPlan plan{1, 4, Composition::Iid};
    const RunRecord a = run_training(prob, Variant::Momentum, hp, decay0, plan, 5);
    const RunRecord b = run_training(prob, Variant::Momentum, hp, plain, plan, 5);
    CHECK(bitwise_equal(a.final_theta, b.final_theta));
    // nonzero decay changes the trajectory
    TrainLoopConfig decay;
    decay.total_steps = 40;
    decay.weight_decay = 0.01;
    const RunRecord c = run_training(prob, Variant::Momentum, hp, decay, plan, 5);
    CHECK_FALSE(bitwise_equal(a.final_theta, c.final_theta));
  }
  SUBCASE("divergence aborts with a diagnostic record") {
    HyperParams wild;
    wild.mu = 100.0;  // far beyond stability for delta = 2
    TrainLoopConfig loop;
    loop.total_steps = 2000;
    ShardingPlan plan{1, 4, Composition::Iid};
    const RunRecord rec = run_training(prob, Variant::Sgd, wild, loop, plan, 3);
    CHECK(rec.diverged);
    CHECK(rec.steps_completed < 2000);
    CHECK(rec.rows.back().step == rec.steps_completed);
  }
}

TEST_CASE("sequential vs sharded equivalence (quick)") {
  auto prob = default_instance(3);
  HyperParams hp;
  hp.mu = 0.02;
  hp.alpha = 0.1;
  TrainLoopConfig loop;
  loop.total_steps = 300;
  loop.eval_every = 300;
  for (Composition comp : {Composition::Proportional, Composition::Iid}) {
    for (Variant variant : {Variant::Discover, Variant::Momentum}) {
      ShardingPlan seq{1, 8, comp};
      ShardingPlan par{4, 2, comp};
      const RunRecord a = run_training(prob, variant, hp, loop, seq, 17);
      const RunRecord b = run_training(prob, variant, hp, loop, par, 17);
      CHECK((a.final_theta - b.final_theta).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("single-cluster-per-shard run keeps gbar drift at machine precision") {
  auto prob = default_instance(4);
  HyperParams hp;
  hp.mu = 0.02;
  hp.alpha = 0.2;  // alpha_n defaults to alpha / p_n
  TrainLoopConfig loop;
  loop.total_steps = 200;
  loop.eval_every = 1;
  ShardingPlan plan{1, 8, Composition::SingleClusterPerShard};
  double max_drift = 0.0;
  auto obs = [&](std::int64_t, const ParamVector&, const OptimizerState& st) {
    if (!st.cluster_buffers.empty())
      max_drift = std::max(max_drift, gbar_drift(st, prob.spec()));
  };
  run_training(prob, Variant::Discover, hp, loop, plan, 23, obs);
  CHECK(max_drift < 1e-12);
}

TEST_CASE("noise probe fills the noise_mean_norm column at its cadence") {
  auto prob = default_instance(9);
  HyperParams hp;
  hp.mu = 0.02;
  hp.alpha = 0.15;
  TrainLoopConfig loop;
  loop.total_steps = 50;
  loop.eval_every = 25;
  loop.noise_probe_every = 25;
  loop.noise_probe_batches = 64;
  ShardingPlan plan{1, 8, Composition::SingleClusterPerShard};
  const RunRecord rec = run_training(prob, Variant::Discover, hp, loop, plan, 4);
  int probed = 0;
  for (const RunRow& r : rec.rows) {
    if (r.step > 0 && r.step % 25 == 0) {
      CHECK(std::isfinite(r.noise_mean_norm));
      ++probed;
    }
  }
  CHECK(probed == 2);
}

TEST_CASE("logistic training improves validation accuracy") {
  ClusteredLogistic prob(4, 6, 3.0, 1.0, 0.0, ClusterPolicy::Classes, 0.0, 31);
  HyperParams hp;
  hp.mu = 0.5;
  hp.alpha = 0.2;
  TrainLoopConfig loop;
  loop.total_steps = 400;
  loop.eval_every = 100;
  loop.validation_size = 400;
  ShardingPlan plan{1, 16, Composition::SingleClusterPerShard};
  const RunRecord rec = run_training(prob, Variant::Discover, hp, loop, plan, 7);
  CHECK(rec.val_accuracy > 0.8);
  CHECK(rec.rows.back().train_loss < rec.rows.front().train_loss);
}
