#pragma once

#include "discover/core.hpp"
#include "discover/optim.hpp"
#include "discover/problems.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace discover {

/// One row of variance diagnostics along a trajectory.
struct VarianceReport {
  std::int64_t step = 0;
  double in_cluster = 0.0;
  double between_cluster = 0.0;
  double noise_mean_norm = 0.0;
  double msd = 0.0;
  double gbar_drift = 0.0;
};


// ---------------------------------------------------------------------------
// Between-cluster variance estimates (theta_{t+1} substituted for theta*)

/// SGD form: sum_n p_n ||g_n(theta_next)||^2.
inline double between_var_from_means(std::span<const ParamVector> cluster_means,
                                     const ClusterSpec& spec) {
  require(static_cast<int>(cluster_means.size()) == spec.n_clusters(),
          "between_var: one mean per cluster required");
  double v = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n)
    v += spec.prob(n) * cluster_means[static_cast<std::size_t>(n)].squaredNorm();
  return v;
}

inline double between_var_sgd(const ClusteredQuadratic& problem, const ParamVector& theta_next,
                              const ClusterSpec& spec) {
  std::vector<ParamVector> means;
  means.reserve(static_cast<std::size_t>(spec.n_clusters()));
  for (int n = 0; n < spec.n_clusters(); ++n)
    means.push_back(problem.cluster_mean_gradient(n, theta_next));
  return between_var_from_means(means, spec);
}

/// Discover-family form: (2/|B|) sum_n p_n ||g^(n)_t - g_n(theta_next)||^2.
/// Pass a single buffer (size 1) to score single-buffer methods such as
/// Momentum, where v_t stands in for every g^(n)_t.
inline double between_var_from_buffers(std::span<const ParamVector> buffers,
                                       std::span<const ParamVector> cluster_means,
                                       const ClusterSpec& spec, int batch_size) {
  require(batch_size >= 1, "between_var: batch_size must be >= 1");
  require(static_cast<int>(cluster_means.size()) == spec.n_clusters(),
          "between_var: one mean per cluster required");
  require(buffers.size() == 1 || static_cast<int>(buffers.size()) == spec.n_clusters(),
          "between_var: buffers must be per-cluster or a single shared buffer");
  double v = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n) {
    const ParamVector& buf = buffers.size() == 1 ? buffers[0] : buffers[static_cast<std::size_t>(n)];
    v += spec.prob(n) * (buf - cluster_means[static_cast<std::size_t>(n)]).squaredNorm();
  }
  return 2.0 / static_cast<double>(batch_size) * v;
}

inline double between_var_discover(const ClusteredQuadratic& problem, const OptimizerState& state,
                                   const ParamVector& theta_next, const ClusterSpec& spec,
                                   int batch_size) {
  std::vector<ParamVector> means;
  means.reserve(static_cast<std::size_t>(spec.n_clusters()));
  for (int n = 0; n < spec.n_clusters(); ++n)
    means.push_back(problem.cluster_mean_gradient(n, theta_next));
  if (is_discover_family(state.variant))
    return between_var_from_buffers(state.cluster_buffers, means, spec, batch_size);
  // single global buffer (Momentum / QHM / IGT)
  const ParamVector buf[1] = {state.v};
  return between_var_from_buffers(buf, means, spec, batch_size);
}

// ---------------------------------------------------------------------------
// In-cluster variance sum_n p_n sigma_n^2, sigma_n^2 = 2 E||g(x^n, theta)||^2

struct InClusterVar {
  double mc = 0.0;                  // Monte-Carlo estimate
  std::optional<double> closed;     // closed form (quadratic family only)
};

inline InClusterVar in_cluster_var(const ClusteredQuadratic& problem, const ParamVector& theta,
                                   const ClusterSpec& spec, int n_samples, RngStream rng) {
  require(n_samples >= 1000, "in_cluster_var: n_samples must be >= 1e3");
  InClusterVar out;
  double closed = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n) {
    RngStream crng = rng.derive(static_cast<std::uint64_t>(n));
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      RngStream srng = crng.derive(static_cast<std::uint64_t>(i));
      acc += problem.sample_gradient(n, theta, srng).squaredNorm();
    }
    out.mc += spec.prob(n) * 2.0 * acc / static_cast<double>(n_samples);
    closed += spec.prob(n) * problem.sigma_n_sq(n, theta);
  }
  out.closed = closed;
  return out;
}

inline double in_cluster_var_logistic(const ClusteredLogistic& problem, const ParamVector& theta,
                                      const ClusterSpec& spec, int n_samples, RngStream rng) {
  require(n_samples >= 1000, "in_cluster_var: n_samples must be >= 1e3");
  double total = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n) {
    RngStream crng = rng.derive(static_cast<std::uint64_t>(n));
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      RngStream data = crng.derive(2 * static_cast<std::uint64_t>(i));
      RngStream flips = crng.derive(2 * static_cast<std::uint64_t>(i) + 1);
      acc += problem.gradient(theta, problem.sample_example(n, data, flips)).squaredNorm();
    }
    total += spec.prob(n) * 2.0 * acc / static_cast<double>(n_samples);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Gradient-noise moments on a frozen state
//
// For the Discover family the noise is
//   u = (1/|B|) sum_i (g_i - g^(n_i) + gbar) - g(theta);
// for plain SGD it is the minibatch noise s = mean(g_i) - g(theta).
// Batches are composed i.i.d. (cluster ~ p_n per slot) with fresh samples.

struct NoiseMoments {
  double mean_norm = 0.0;      // || E_hat[noise] ||
  double second_moment = 0.0;  // E_hat ||noise||^2
  double mean_std_error = 0.0; // sqrt(sum_j Var_j / n_batches), for 3-sigma checks
  int n_batches = 0;
};

inline NoiseMoments noise_moments(const ClusteredQuadratic& problem, const OptimizerState& state,
                                  const ParamVector& theta, const ClusterSpec& spec,
                                  int batch_size, int n_batches, RngStream rng) {
  require(batch_size >= 1 && n_batches >= 2, "noise_moments: bad sizes");
  const ParamVector full = problem.full_gradient(theta);
  const Eigen::Index d = theta.size();
  ParamVector mean = ParamVector::Zero(d);
  ParamVector m2 = ParamVector::Zero(d);  // per-coordinate sum of squares
  double sq_acc = 0.0;
  const bool discover = is_discover_family(state.variant);
  for (int b = 0; b < n_batches; ++b) {
    RngStream brng = rng.derive(static_cast<std::uint64_t>(b));
    ParamVector acc = ParamVector::Zero(d);
    for (int i = 0; i < batch_size; ++i) {
      RngStream srng = brng.derive(static_cast<std::uint64_t>(i));
      const int n = srng.next_index(spec.probs());
      ParamVector g = problem.sample_gradient(n, theta, srng);
      if (discover) {
        g -= state.cluster_buffers[static_cast<std::size_t>(n)];
        g += state.gbar;
      }
      acc += g;
    }
    ParamVector noise = acc / static_cast<double>(batch_size) - full;
    mean += noise;
    m2 += noise.cwiseProduct(noise);
    sq_acc += noise.squaredNorm();
  }
  const double inv = 1.0 / static_cast<double>(n_batches);
  mean *= inv;
  NoiseMoments out;
  out.n_batches = n_batches;
  out.mean_norm = mean.norm();
  out.second_moment = sq_acc * inv;
  const ParamVector var = (m2 * inv - mean.cwiseProduct(mean)).cwiseMax(0.0);
  out.mean_std_error = std::sqrt(var.sum() * inv);
  return out;
}


/// Assembles the full diagnostic row for a quadratic trajectory point:
/// closed-form in-cluster variance at theta, the buffer-based between-cluster
/// estimate against g_n(theta_next), the frozen-state noise-mean norm, MSD,
/// and the gbar drift.
inline VarianceReport variance_report(const ClusteredQuadratic& problem,
                                      const OptimizerState& state, const ParamVector& theta_next,
                                      const ClusterSpec& spec, int batch_size, std::int64_t step,
                                      int noise_batches, RngStream rng) {
  VarianceReport report;
  report.step = step;
  report.in_cluster = 0.0;
  for (int n = 0; n < spec.n_clusters(); ++n)
    report.in_cluster += spec.prob(n) * problem.sigma_n_sq(n, theta_next);
  report.between_cluster = between_var_discover(problem, state, theta_next, spec, batch_size);
  const NoiseMoments nm =
      noise_moments(problem, state, theta_next, spec, batch_size, noise_batches, rng);
  report.noise_mean_norm = nm.mean_norm;
  report.msd = (theta_next - problem.true_minimizer()).squaredNorm();
  report.gbar_drift = is_discover_family(state.variant) ? gbar_drift(state, spec) : 0.0;
  require(std::isfinite(report.in_cluster) && std::isfinite(report.between_cluster) &&
              std::isfinite(report.noise_mean_norm) && std::isfinite(report.msd) &&
              std::isfinite(report.gbar_drift),
          "variance_report: non-finite field");
  return report;
}

}  // namespace discover
