#pragma once

#include "discover/core.hpp"
#include "discover/optim.hpp"
#include "discover/problems.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace discover {

/// Exact problem constants entering the lemmas and the convergence theorem.
/// Only the quadratic family admits them; everything else should refuse
/// rather than estimate.
struct ConvexityConstants {
  double nu = 0.0;           // strong convexity: min_n lambda_min(A_n)
  double delta = 0.0;        // smoothness: max_n lambda_max(A_n)
  double sigma_in_sq = 0.0;  // sum_n p_n sigma_n^2 at theta*
  double C1 = 0.0;           // 4 delta^2
  double C2 = 0.0;           // = sigma_in_sq
  double G0 = 0.0;           // sum_n p_n ||g_n(theta*)||^2
  double p_min = 0.0;
};

inline ConvexityConstants compute_constants(const ClusteredQuadratic& problem) {
  ConvexityConstants c;
  const ClusterSpec& spec = problem.spec();
  c.p_min = spec.p_min();
  const ParamVector theta_star = problem.true_minimizer();
  bool first = true;
  for (int n = 0; n < spec.n_clusters(); ++n) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(problem.matrix(n), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    require(lo > 0.0, "compute_constants: matrix not positive definite");
    if (first || lo < c.nu) c.nu = lo;
    if (first || hi > c.delta) c.delta = hi;
    first = false;
    c.sigma_in_sq += spec.prob(n) * problem.sigma_n_sq(n, theta_star);
    c.G0 += spec.prob(n) * problem.cluster_mean_gradient(n, theta_star).squaredNorm();
  }
  c.C1 = 4.0 * c.delta * c.delta;
  c.C2 = c.sigma_in_sq;
  return c;
}

/// Step-size cap mu <= min{ nu |B| / (3 delta^2 (|B|+5)), alpha / (6 nu) }.
/// alpha must lie in (0, p_min).
inline double step_size_window(const ConvexityConstants& c, int batch_size, double alpha) {
  require(batch_size >= 1, "step_size_window: batch_size must be >= 1");
  require(alpha > 0.0 && alpha < c.p_min, "step_size_window: alpha outside (0, p_min)");
  const double b = static_cast<double>(batch_size);
  const double cap1 = c.nu * b / (3.0 * c.delta * c.delta * (b + 5.0));
  const double cap2 = alpha / (6.0 * c.nu);
  return std::min(cap1, cap2);
}

/// Convergence bound: bound[t] = q^t (msd0 + gamma G0) + 4 mu sigma_in^2 / (nu |B|)
/// with q = 1 - mu nu and gamma = 3 mu^2 / (alpha |B|).
struct TheoremBound {
  double mu_max = 0.0;
  double gamma = 0.0;
  double q = 0.0;
  double steady_state = 0.0;
  std::vector<double> bound_curve;  // t = 0..T
  bool in_regime = true;            // false when mu exceeds mu_max
};

inline TheoremBound theorem_bound_curve(const ConvexityConstants& c, double mu, double alpha,
                                        int batch_size, double msd0, std::int64_t total_steps) {
  require(mu > 0.0, "theorem_bound_curve: mu must be > 0");
  require(total_steps >= 0, "theorem_bound_curve: negative horizon");
  TheoremBound b;
  b.mu_max = step_size_window(c, batch_size, alpha);
  b.in_regime = mu <= b.mu_max;
  b.gamma = 3.0 * mu * mu / (alpha * static_cast<double>(batch_size));
  b.q = 1.0 - mu * c.nu;
  b.steady_state = 4.0 * mu * c.sigma_in_sq / (c.nu * static_cast<double>(batch_size));
  b.bound_curve.reserve(static_cast<std::size_t>(total_steps) + 1);
  const double transient0 = msd0 + b.gamma * c.G0;
  double qt = 1.0;
  for (std::int64_t t = 0; t <= total_steps; ++t) {
    b.bound_curve.push_back(qt * transient0 + b.steady_state);
    qt *= b.q;
  }
  return b;
}

/// Empirical certification of the bound: fraction of steps at which the
/// seed-averaged MSD exceeds the curve. Passes at <= 1% violations with at
/// least 50 seeds; makes no claim when the step size is out of regime.
struct BoundVerification {
  double violation_fraction = 0.0;
  std::int64_t n_steps = 0;
  int n_seeds = 0;
  bool in_regime = true;
  bool passed = false;
};

inline BoundVerification verify_bound(std::span<const std::vector<double>> msd_trajectories,
                                      const TheoremBound& bound) {
  require(!msd_trajectories.empty(), "verify_bound: no trajectories");
  const std::size_t len = msd_trajectories.front().size();
  require(len > 0 && len <= bound.bound_curve.size(), "verify_bound: trajectory/bound mismatch");
  for (const auto& traj : msd_trajectories)
    require(traj.size() == len, "verify_bound: ragged trajectories");
  BoundVerification out;
  out.n_seeds = static_cast<int>(msd_trajectories.size());
  out.n_steps = static_cast<std::int64_t>(len);
  out.in_regime = bound.in_regime;
  std::int64_t violations = 0;
  for (std::size_t t = 0; t < len; ++t) {
    double mean = 0.0;
    for (const auto& traj : msd_trajectories) mean += traj[t];
    mean /= static_cast<double>(out.n_seeds);
    // relative slack absorbs ulp-level ties when the trajectory starts
    // exactly on the bound (e.g. at t = 0)
    if (mean > bound.bound_curve[t] * (1.0 + 1e-12)) ++violations;
  }
  out.violation_fraction = static_cast<double>(violations) / static_cast<double>(len);
  out.passed = out.in_regime && out.n_seeds >= 50 && out.violation_fraction <= 0.01;
  return out;
}

/// G_t = sum_n p_n ||g^(n)_t - g_n(theta*)||^2 for one trajectory's state.
/// Seed-averaging and the recursion check
///   G_{t+1} <= (1-alpha) G_t + 3 alpha delta^2 MSD_t + alpha C2
/// live in the harness.
inline double track_Gt(std::span<const ParamVector> cluster_means_at_opt,
                       const OptimizerState& state, const ClusterSpec& spec) {
  require(is_discover_family(state.variant), "track_Gt: not a Discover-family state");
  require(static_cast<int>(cluster_means_at_opt.size()) == spec.n_clusters(),
          "track_Gt: one mean per cluster required");
  double g = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n) {
    g += spec.prob(n) * (state.cluster_buffers[static_cast<std::size_t>(n)] -
                         cluster_means_at_opt[static_cast<std::size_t>(n)])
                            .squaredNorm();
  }
  return g;
}

/// Fraction of steps at which seed-averaged G_{t+1} exceeds the recursion
/// bound's right-hand side. `g_trajectories` and `msd_trajectories` are S x (T+1).
struct GtRecursionReport {
  double violation_fraction = 0.0;
  std::int64_t n_transitions = 0;
};

inline GtRecursionReport check_gt_recursion(std::span<const std::vector<double>> g_trajectories,
                                            std::span<const std::vector<double>> msd_trajectories,
                                            const ConvexityConstants& c, double alpha) {
  require(!g_trajectories.empty() && g_trajectories.size() == msd_trajectories.size(),
          "check_gt_recursion: trajectory count mismatch");
  const std::size_t len = g_trajectories.front().size();
  require(len >= 2, "check_gt_recursion: need at least one transition");
  const std::size_t seeds = g_trajectories.size();
  GtRecursionReport out;
  out.n_transitions = static_cast<std::int64_t>(len - 1);
  std::int64_t violations = 0;
  for (std::size_t t = 0; t + 1 < len; ++t) {
    double g_now = 0.0, g_next = 0.0, msd_now = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      g_now += g_trajectories[s][t];
      g_next += g_trajectories[s][t + 1];
      msd_now += msd_trajectories[s][t];
    }
    g_now /= static_cast<double>(seeds);
    g_next /= static_cast<double>(seeds);
    msd_now /= static_cast<double>(seeds);
    const double rhs = (1.0 - alpha) * g_now + 3.0 * alpha * c.delta * c.delta * msd_now +
                       alpha * c.C2;
    if (g_next > rhs) ++violations;
  }
  out.violation_fraction =
      static_cast<double>(violations) / static_cast<double>(out.n_transitions);
  return out;
}

}  // namespace discover
