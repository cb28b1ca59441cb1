#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "discover/problems.hpp"

#include <cstring>

using namespace discover;

namespace {

ClusteredQuadratic identity_quadratic(const std::vector<ParamVector>& centers, double noise_std,
                                      const ClusterSpec& spec) {
  const Eigen::Index d = centers.front().size();
  std::vector<Eigen::MatrixXd> mats(centers.size(), Eigen::MatrixXd::Identity(d, d));
  return ClusteredQuadratic(mats, centers, noise_std, spec);
}

}  // namespace

TEST_CASE("sample_gradient") {
  ClusterSpec spec = ClusterSpec::uniform(2);
  ParamVector c0 = ParamVector::Zero(2);
  ParamVector c1(2);
  c1 << 1, -1;

  SUBCASE("no noise at the cluster minimizer gives zero") {
    auto prob = identity_quadratic({c0, c1}, 0.0, spec);
    RngStream rng(1, RngStream::kNoise);
    CHECK(prob.sample_gradient(1, c1, rng).norm() == 0.0);
  }
  SUBCASE("identity matrix, zero center: gradient is theta") {
    auto prob = identity_quadratic({c0, c0}, 0.0, spec);
    ParamVector theta(2);
    theta << 2, 0;
    RngStream rng(1, RngStream::kNoise);
    CHECK((prob.sample_gradient(0, theta, rng) - theta).norm() == 0.0);
  }
  SUBCASE("Monte-Carlo mean matches the exact cluster gradient within 4 SE") {
    auto prob = ClusteredQuadratic::random_instance(6, spec, 0.5, 2.0, 1.0, 0.5, 3);
    RngStream rng(9, RngStream::kNoise);
    ParamVector theta = RngStream(5, RngStream::kInit).normal_vector(6);
    const ParamVector exact = prob.cluster_mean_gradient(0, theta);
    const int n = 100000;
    ParamVector mean = ParamVector::Zero(6);
    for (int i = 0; i < n; ++i) {
      RngStream srng = rng.derive(static_cast<std::uint64_t>(i));
      mean += prob.sample_gradient(0, theta, srng);
    }
    mean /= n;
    // per-coordinate noise is N(0, s^2); SE of the mean norm over d coords
    const double se = 0.5 * std::sqrt(6.0 / n);
    CHECK((mean - exact).norm() < 4 * se);
  }
  SUBCASE("cluster out of range is an error") {
    auto prob = identity_quadratic({c0, c1}, 0.0, spec);
    RngStream rng(1, RngStream::kNoise);
    CHECK_THROWS_AS(prob.sample_gradient(2, c0, rng), std::invalid_argument);
  }
}

TEST_CASE("true_minimizer") {
  ClusterSpec spec = ClusterSpec::uniform(2);

  SUBCASE("common center is the minimizer") {
    ParamVector c(3);
    c << 1, 2, 3;
    auto prob = ClusteredQuadratic::random_instance(3, spec, 0.5, 2.0, 0.0, 0.0, 5);
    // rebuild with identical centers
    auto common = ClusteredQuadratic({prob.matrix(0), prob.matrix(1)}, {c, c}, 0.0, spec);
    CHECK((common.true_minimizer() - c).norm() < 1e-10);
  }
  SUBCASE("symmetric two-cluster instance lands in the middle") {
    ParamVector c0(2), c1(2);
    c0 << 1, 1;
    c1 << -1, -1;
    auto prob = identity_quadratic({c0, c1}, 0.0, spec);
    CHECK(prob.true_minimizer().norm() < 1e-12);
  }
  SUBCASE("stationarity residual is tiny on random instances") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      auto prob = ClusteredQuadratic::random_instance(20, ClusterSpec::uniform(5), 0.5, 2.0, 1.0,
                                                      0.5, seed);
      const ParamVector star = prob.true_minimizer();
      ParamVector resid = ParamVector::Zero(20);
      for (int n = 0; n < 5; ++n) resid += 0.2 * prob.cluster_mean_gradient(n, star);
      CHECK(resid.norm() <= 1e-8);
    }
  }
  SUBCASE("ill-conditioned pooled matrix is rejected") {
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
    a(0, 0) = 1e13;
    a(1, 1) = 1.0;
    auto prob = ClusteredQuadratic({a}, {ParamVector::Zero(2)}, 0.0, ClusterSpec::uniform(1));
    CHECK_THROWS_AS(prob.true_minimizer(), std::runtime_error);
  }
}

TEST_CASE("cluster_mean_gradient") {
  ClusterSpec spec = ClusterSpec::uniform(2);
  auto prob = ClusteredQuadratic::random_instance(4, spec, 0.5, 2.0, 1.0, 0.0, 7);

  SUBCASE("zero at the cluster center") {
    CHECK(prob.cluster_mean_gradient(0, prob.center(0)).norm() < 1e-14);
  }
  SUBCASE("probability-weighted sum vanishes at the optimum") {
    const ParamVector star = prob.true_minimizer();
    ParamVector sum = 0.5 * prob.cluster_mean_gradient(0, star) +
                      0.5 * prob.cluster_mean_gradient(1, star);
    CHECK(sum.norm() <= 1e-8);
  }
  SUBCASE("scaling centers scales optimum-gradients linearly under a common matrix") {
    Eigen::MatrixXd a = prob.matrix(0);
    ParamVector c0 = prob.center(0), c1 = prob.center(1);
    auto base = ClusteredQuadratic({a, a}, {c0, c1}, 0.0, spec);
    auto scaled = ClusteredQuadratic({a, a}, {3.0 * c0, 3.0 * c1}, 0.0, spec);
    const ParamVector g_base = base.cluster_mean_gradient(0, base.true_minimizer());
    const ParamVector g_scaled = scaled.cluster_mean_gradient(0, scaled.true_minimizer());
    CHECK((g_scaled - 3.0 * g_base).norm() < 1e-8);
  }
}

TEST_CASE("quadratic closed forms") {
  ClusterSpec spec = ClusterSpec::uniform(3);
  auto prob = ClusteredQuadratic::random_instance(8, spec, 0.5, 2.0, 1.0, 0.5, 11);
  const ParamVector star = prob.true_minimizer();

  SUBCASE("sigma_n_sq = 2(||A_n(theta-c_n)||^2 + d s^2)") {
    const double mean_part = prob.cluster_mean_gradient(1, star).squaredNorm();
    CHECK(prob.sigma_n_sq(1, star) ==
          doctest::Approx(2.0 * (mean_part + 8 * 0.25)).epsilon(1e-12));
  }
  SUBCASE("between-cluster variance is zero iff centers coincide") {
    CHECK(prob.between_cluster_var(star) > 0.0);
    ParamVector c = prob.center(0);
    auto common = ClusteredQuadratic({prob.matrix(0), prob.matrix(1), prob.matrix(2)},
                                     {c, c, c}, 0.5, spec);
    CHECK(common.between_cluster_var(common.true_minimizer()) < 1e-16);
  }
  SUBCASE("scale_center_spread scales the between-cluster variance ~ factor^2") {
    auto wide = prob.scale_center_spread(4.0);
    const double base_var = prob.between_cluster_var(star);
    const double wide_var = wide.between_cluster_var(wide.true_minimizer());
    CHECK(wide_var / base_var == doctest::Approx(16.0).epsilon(0.05));
  }
}

TEST_CASE("matrix validation") {
  ClusterSpec spec = ClusterSpec::uniform(1);
  Eigen::MatrixXd asym(2, 2);
  asym << 1, 0.5, 0, 1;
  CHECK_THROWS_AS(ClusteredQuadratic({asym}, {ParamVector::Zero(2)}, 0.0, spec),
                  std::invalid_argument);
  Eigen::MatrixXd indef(2, 2);
  indef << 1, 0, 0, -1;
  CHECK_THROWS_AS(ClusteredQuadratic({indef}, {ParamVector::Zero(2)}, 0.0, spec),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// clustered logistic

TEST_CASE("sample_logistic_example label noise") {
  const int K = 10;
  ClusteredLogistic clean(K, 8, 3.0, 1.0, 0.0, ClusterPolicy::Classes, 0.0, 21);
  RngStream data(3, RngStream::kData);
  RngStream flips(3, RngStream::kLabelFlip);

  SUBCASE("p=0 keeps the class label") {
    for (int i = 0; i < 200; ++i) {
      RngStream d = data.derive(static_cast<std::uint64_t>(i));
      RngStream f = flips.derive(static_cast<std::uint64_t>(i));
      CHECK(clean.sample_example(3, d, f).label == 3);
    }
  }
  SUBCASE("p=0.8 empirical flip rate and uniformity over the other classes") {
    ClusteredLogistic noisy(K, 8, 3.0, 1.0, 0.8, ClusterPolicy::Classes, 0.0, 21);
    const int n = 100000;
    int flipped = 0;
    std::vector<int> flip_counts(static_cast<std::size_t>(K), 0);
    for (int i = 0; i < n; ++i) {
      RngStream d = data.derive(static_cast<std::uint64_t>(i));
      RngStream f = flips.derive(static_cast<std::uint64_t>(i));
      const int label = noisy.sample_example(4, d, f).label;
      if (label != 4) {
        ++flipped;
        ++flip_counts[static_cast<std::size_t>(label)];
      }
    }
    CHECK(std::abs(static_cast<double>(flipped) / n - 0.8) < 0.005);
    // chi-square against uniform over the 9 other classes; crit(8 dof, 1%) = 20.09
    const double expected = static_cast<double>(flipped) / (K - 1);
    double chi2 = 0.0;
    for (int k = 0; k < K; ++k) {
      if (k == 4) continue;
      const double diff = flip_counts[static_cast<std::size_t>(k)] - expected;
      chi2 += diff * diff / expected;
    }
    CHECK(chi2 < 20.09);
  }
  SUBCASE("p=0.2 empirical clean rate") {
    ClusteredLogistic noisy(K, 8, 3.0, 1.0, 0.2, ClusterPolicy::Classes, 0.0, 21);
    const int n = 100000;
    int kept = 0;
    for (int i = 0; i < n; ++i) {
      RngStream d = data.derive(static_cast<std::uint64_t>(i));
      RngStream f = flips.derive(static_cast<std::uint64_t>(i));
      if (noisy.sample_example(7, d, f).label == 7) ++kept;
    }
    CHECK(std::abs(static_cast<double>(kept) / n - 0.8) < 0.005);
  }
}

TEST_CASE("cluster policies shape the sample content") {
  RngStream data(5, RngStream::kData);
  RngStream flips(5, RngStream::kLabelFlip);

  SUBCASE("classes policy ties the class to the cluster") {
    ClusteredLogistic prob(4, 6, 3.0, 0.5, 0.0, ClusterPolicy::Classes, 0.0, 2);
    for (int n = 0; n < 4; ++n) {
      RngStream d = data.derive(static_cast<std::uint64_t>(n));
      RngStream f = flips.derive(static_cast<std::uint64_t>(n));
      auto ex = prob.sample_example(n, d, f);
      CHECK(ex.label == n);
      // features concentrate near the class mean
      CHECK((ex.features - prob.class_mean(n)).norm() < 0.5 * 6);
    }
  }
  SUBCASE("random policy draws classes uniformly regardless of cluster") {
    ClusteredLogistic prob(4, 6, 3.0, 0.5, 0.0, ClusterPolicy::Random, 0.0, 2);
    std::vector<int> counts(4, 0);
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
      RngStream d = data.derive(static_cast<std::uint64_t>(i));
      RngStream f = flips.derive(static_cast<std::uint64_t>(i));
      ++counts[static_cast<std::size_t>(prob.sample_example(0, d, f).label)];
    }
    for (int k = 0; k < 4; ++k)
      CHECK(std::abs(counts[static_cast<std::size_t>(k)] / static_cast<double>(n) - 0.25) < 0.01);
  }
  SUBCASE("transforms policy blends with a second example at a fixed ratio") {
    ClusteredLogistic prob(4, 6, 3.0, 0.5, 0.0, ClusterPolicy::Transforms, 0.5, 2);
    // cluster 0 is the identity transform; higher clusters mix more
    RngStream d0 = data.derive(123), f0 = flips.derive(123);
    RngStream d1 = data.derive(123), f1 = flips.derive(123);
    auto base = prob.sample_example(0, d0, f0);
    auto mixed = prob.sample_example(3, d1, f1);
    CHECK(base.label == mixed.label);  // label follows the base example
    // identity cluster: features are exactly the class-mean + noise draw
    RngStream d2 = data.derive(123), f2 = flips.derive(123);
    auto again = prob.sample_example(0, d2, f2);
    CHECK((base.features - again.features).norm() == 0.0);
    // mixing shrinks the expected distance to the own-class mean
    const int n = 2000;
    double base_dist = 0.0, mixed_dist = 0.0;
    for (int i = 0; i < n; ++i) {
      RngStream da = data.derive(1000 + static_cast<std::uint64_t>(i));
      RngStream fa = flips.derive(1000 + static_cast<std::uint64_t>(i));
      auto e0 = prob.sample_example(0, da, fa);
      base_dist += (e0.features - prob.class_mean(e0.label)).norm();
      RngStream db = data.derive(1000 + static_cast<std::uint64_t>(i));
      RngStream fb = flips.derive(1000 + static_cast<std::uint64_t>(i));
      auto e3 = prob.sample_example(3, db, fb);
      mixed_dist += (e3.features - prob.class_mean(e3.label)).norm();
    }
    CHECK(mixed_dist / n > base_dist / n);  // blending moves mass off the class mean
  }
}

TEST_CASE("logistic_gradient") {
  const int K = 4, F = 3;
  ClusteredLogistic prob(K, F, 2.0, 1.0, 0.0, ClusterPolicy::Classes, 0.0, 17);
  RngStream data(8, RngStream::kData);
  RngStream flips(8, RngStream::kLabelFlip);
  auto ex = prob.sample_example(2, data, flips);

  SUBCASE("uniform predictions at theta = 0") {
    ParamVector theta = ParamVector::Zero(prob.dim());
    const ParamVector g = prob.gradient(theta, ex);
    const double want = 1.0 / K - 1.0;
    for (int j = 0; j < F; ++j)
      CHECK(g[2 * F + j] == doctest::Approx(want * ex.features[j]).epsilon(1e-12));
    // other class blocks carry weight 1/K
    for (int j = 0; j < F; ++j)
      CHECK(g[0 * F + j] == doctest::Approx(ex.features[j] / K).epsilon(1e-12));
    CHECK(g[K * F + 2] == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("analytic gradient matches central differences") {
    RngStream trng(55, RngStream::kInit);
    ParamVector theta = trng.normal_vector(prob.dim(), 0.7);
    const ParamVector g = prob.gradient(theta, ex);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < prob.dim(); ++i) {
      ParamVector up = theta, dn = theta;
      up[i] += h;
      dn[i] -= h;
      const double fd = (prob.loss(up, ex) - prob.loss(dn, ex)) / (2 * h);
      CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
  SUBCASE("duplicate samples give bitwise identical gradients") {
    RngStream trng(56, RngStream::kInit);
    ParamVector theta = trng.normal_vector(prob.dim(), 0.7);
    const ParamVector g1 = prob.gradient(theta, ex);
    const ParamVector g2 = prob.gradient(theta, ex);
    CHECK(std::memcmp(g1.data(), g2.data(),
                      sizeof(double) * static_cast<std::size_t>(g1.size())) == 0);
  }
  SUBCASE("non-finite gradients are rejected") {
    ParamVector theta = ParamVector::Zero(prob.dim());
    theta[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(prob.gradient(theta, ex), std::runtime_error);
  }
}

TEST_CASE("label noise inflates the gradient second moment") {
  const int K = 5, F = 6;
  RngStream data(4, RngStream::kData);
  RngStream flips(4, RngStream::kLabelFlip);
  // a confidently-correct theta: logits aligned with the class means
  ClusteredLogistic ref(K, F, 3.0, 1.0, 0.0, ClusterPolicy::Classes, 0.0, 33);
  ParamVector theta = ParamVector::Zero(ref.dim());
  for (int k = 0; k < K; ++k)
    theta.segment(static_cast<Eigen::Index>(k) * F, F) = ref.class_mean(k);

  double prev = -1.0;
  for (double p : {0.0, 0.2, 0.8}) {
    ClusteredLogistic prob(K, F, 3.0, 1.0, p, ClusterPolicy::Classes, 0.0, 33);
    double acc = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      RngStream d = data.derive(static_cast<std::uint64_t>(i));
      RngStream f = flips.derive(static_cast<std::uint64_t>(i));
      const int cluster = static_cast<int>(d.next_u64() % K);
      acc += prob.gradient(theta, prob.sample_example(cluster, d, f)).squaredNorm();
    }
    const double second_moment = acc / n;
    CHECK(second_moment > prev);
    prev = second_moment;
  }
}

TEST_CASE("validation sets are clean and accuracy is computable") {
  ClusteredLogistic prob(3, 5, 4.0, 0.5, 0.8, ClusterPolicy::Classes, 0.0, 9);
  auto val = prob.make_validation_set(500, RngStream(42, RngStream::kMetrics));
  CHECK(val.size() == 500);
  // Bayes-aligned classifier should be nearly perfect on well-separated classes
  ParamVector theta = ParamVector::Zero(prob.dim());
  for (int k = 0; k < 3; ++k)
    theta.segment(static_cast<Eigen::Index>(k) * 5, 5) = prob.class_mean(k);
  CHECK(prob.accuracy(theta, val) > 0.95);
  // random guessing sits near 1/K
  CHECK(prob.accuracy(ParamVector::Zero(prob.dim()), val) ==
        doctest::Approx(1.0 / 3).epsilon(0.5));
}
