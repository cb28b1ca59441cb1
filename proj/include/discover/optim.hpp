#pragma once

#include "discover/core.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace discover {

enum class Variant {
  Sgd,
  Momentum,
  Qhm,
  Igt,
  Adam,
  Discover,
  DiscoverQhm,
  DiscoverIgt,
};

inline bool is_discover_family(Variant v) {
  return v == Variant::Discover || v == Variant::DiscoverQhm || v == Variant::DiscoverIgt;
}

inline bool is_igt_family(Variant v) {
  return v == Variant::Igt || v == Variant::DiscoverIgt;
}

// ---------------------------------------------------------------------------
// Hyperparameters

struct HyperParams {
  double mu = 0.1;        // learning rate
  double beta = 0.9;      // momentum coefficient (Momentum, QHM, IGT)
  double nu_mix = 0.7;    // QHM / D-QHM interpolation between buffer and fresh gradient
  double alpha = 0.1;     // Discover global buffer rate
  std::vector<double> alpha_n;  // per-cluster rates; empty -> alpha / p_n
  double tail_fraction = 1.0;   // IGT tail-averaging control (anchor resets)
  std::int64_t igt_anchor_period = 0;  // steps between anchor resets; 0 = single anchor
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Per-cluster rates with the alpha/p_n default applied. Every rate must
  /// lie in (0, 1].
  std::vector<double> resolved_alpha_n(const ClusterSpec& spec) const {
    std::vector<double> out;
    if (alpha_n.empty()) {
      out.reserve(static_cast<std::size_t>(spec.n_clusters()));
      for (double p : spec.probs()) out.push_back(alpha / p);
    } else if (alpha_n.size() == 1) {
      out.assign(static_cast<std::size_t>(spec.n_clusters()), alpha_n.front());
    } else {
      require(static_cast<int>(alpha_n.size()) == spec.n_clusters(),
              "HyperParams: alpha_n size must match n_clusters");
      out = alpha_n;
    }
    for (double a : out)
      require(a > 0.0 && a <= 1.0, "HyperParams: alpha_n outside (0, 1]");
    return out;
  }
};

// ---------------------------------------------------------------------------
// Optimizer state

/// Per-algorithm buffers. Only the fields a variant uses are allocated; the
/// rest stay empty. All buffers start at zero.
struct OptimizerState {
  Variant variant = Variant::Sgd;
  std::int64_t step = 0;
  ParamVector v;           // momentum buffer / IGT running average
  ParamVector w;           // IGT velocity
  ParamVector theta_prev;  // previous iterate for gradient transport
  std::vector<ParamVector> cluster_buffers;  // g^(n)
  ParamVector gbar;        // running average cluster gradient
  ParamVector adam_m;
  ParamVector adam_v;
};

inline OptimizerState init_state(Variant variant, Eigen::Index dim, const ClusterSpec& spec) {
  require(dim >= 1, "init_state: dimension must be >= 1");
  OptimizerState s;
  s.variant = variant;
  switch (variant) {
    case Variant::Sgd:
      break;
    case Variant::Momentum:
    case Variant::Qhm:
      s.v = ParamVector::Zero(dim);
      break;
    case Variant::Igt:
      s.v = ParamVector::Zero(dim);
      s.w = ParamVector::Zero(dim);
      s.theta_prev = ParamVector::Zero(dim);
      break;
    case Variant::Adam:
      s.adam_m = ParamVector::Zero(dim);
      s.adam_v = ParamVector::Zero(dim);
      break;
    case Variant::Discover:
    case Variant::DiscoverQhm:
      s.cluster_buffers.assign(static_cast<std::size_t>(spec.n_clusters()),
                               ParamVector::Zero(dim));
      s.gbar = ParamVector::Zero(dim);
      break;
    case Variant::DiscoverIgt:
      s.v = ParamVector::Zero(dim);
      s.theta_prev = ParamVector::Zero(dim);
      s.cluster_buffers.assign(static_cast<std::size_t>(spec.n_clusters()),
                               ParamVector::Zero(dim));
      s.gbar = ParamVector::Zero(dim);
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Two-phase step protocol
//
// IGT variants evaluate gradients off-iterate, so a step is split in two:
// ask transport_point() where to evaluate, fetch per-sample gradients there,
// then call the step function. Every other variant evaluates at theta.

struct GradSample {
  int cluster_id = 0;
  ParamVector grad;
};
using GradResponse = std::vector<GradSample>;

struct GradRequest {
  ParamVector eval_point;
  MiniBatch batch;
};

inline double igt_gamma(std::int64_t step, std::int64_t anchor_period) {
  const std::int64_t age = anchor_period > 0 ? step % anchor_period : step;
  return static_cast<double>(age) / static_cast<double>(age + 1);
}

/// Gradient evaluation point for the upcoming step. IGT variants extrapolate
/// theta_t + (gamma/(1-gamma)) * (theta_t - theta_{t-1}); everything else
/// evaluates at theta_t.
inline ParamVector transport_point(const OptimizerState& state, const ParamVector& theta,
                                   const HyperParams& hp) {
  if (!is_igt_family(state.variant)) return theta;
  const double gamma = igt_gamma(state.step, hp.igt_anchor_period);
  if (gamma == 0.0) return theta;
  const double scale = gamma / (1.0 - gamma);
  return theta + scale * (theta - state.theta_prev);
}

namespace detail {

inline ParamVector batch_mean_grad(const GradResponse& grads) {
  require(!grads.empty(), "step: empty gradient response");
  ParamVector sum = ParamVector::Zero(grads.front().grad.size());
  for (const GradSample& g : grads) {
    require(g.grad.size() == sum.size(), "step: gradient dimension mismatch");
    sum += g.grad;
  }
  check_finite(sum, "step: gradients");
  return sum / static_cast<double>(grads.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shard-friendly sufficient statistics for the Discover family.
//
// A summary carries per-cluster gradient sums and counts. Summaries from
// different shards merge by summing, in (cluster id, shard order); the merged
// summary reproduces the sequential update, so one shard is bit-identical to
// the canonical sequential update run on the whole batch.

struct ClusterGradSummary {
  std::map<int, ParamVector> grad_sum;  // per cluster: sum of per-sample gradients
  std::map<int, std::int64_t> count;
  std::int64_t n_samples = 0;

  bool empty() const { return n_samples == 0; }
};

inline ClusterGradSummary summarize(std::span<const GradSample> grads, const ClusterSpec& spec) {
  ClusterGradSummary s;
  for (const GradSample& g : grads) {
    require(g.cluster_id >= 0 && g.cluster_id < spec.n_clusters(),
            "summarize: cluster_id out of range");
    check_finite(g.grad, "summarize: gradient");
    auto it = s.grad_sum.find(g.cluster_id);
    if (it == s.grad_sum.end()) {
      s.grad_sum.emplace(g.cluster_id, g.grad);
      s.count.emplace(g.cluster_id, 1);
    } else {
      it->second += g.grad;
      ++s.count[g.cluster_id];
    }
    ++s.n_samples;
  }
  return s;
}

inline ClusterGradSummary merge_summaries(std::span<const ClusterGradSummary> parts) {
  ClusterGradSummary out;
  for (const ClusterGradSummary& part : parts) {
    for (const auto& [n, sum] : part.grad_sum) {
      auto it = out.grad_sum.find(n);
      if (it == out.grad_sum.end()) {
        out.grad_sum.emplace(n, sum);
        out.count.emplace(n, part.count.at(n));
      } else {
        it->second += sum;
        out.count[n] += part.count.at(n);
      }
    }
    out.n_samples += part.n_samples;
  }
  return out;
}

namespace detail {

// Sum over the batch of (g_i - g^(n_i)_t), per-cluster sums minus
// count-weighted buffers in ascending cluster order. For D-IGT the tail
// average v_t stands in for every per-sample gradient.
inline ParamVector control_variate_sum(const OptimizerState& state, const ClusterGradSummary& sum,
                                       const ParamVector* v_override) {
  ParamVector acc = v_override ? ParamVector(static_cast<double>(sum.n_samples) * *v_override)
                               : ParamVector::Zero(state.gbar.size());
  for (const auto& [n, gsum] : sum.grad_sum) {
    if (!v_override) acc += gsum;
    acc -= static_cast<double>(sum.count.at(n)) *
           state.cluster_buffers[static_cast<std::size_t>(n)];
  }
  return acc;
}

}  // namespace detail

/// Buffer recursions from batch statistics, dispatching on the
/// state's variant. The gbar recursion uses the buffers of time t; clusters
/// absent from the batch keep their buffers bit-identical. For DiscoverQhm
/// the carried buffer is the nu-mix of the updated buffer and the fresh
/// sub-batch mean; for DiscoverIgt, state.v must already hold this step's
/// tail average. Does not touch theta or the step counter.
inline void discover_buffer_update(OptimizerState& state, const ClusterGradSummary& sum,
                                   const HyperParams& hp, const ClusterSpec& spec) {
  require(is_discover_family(state.variant), "discover_buffer_update: wrong variant");
  require(!sum.empty(), "discover_buffer_update: empty batch");
  const std::vector<double> an = hp.resolved_alpha_n(spec);
  const bool use_v = state.variant == Variant::DiscoverIgt;
  const ParamVector corr = detail::control_variate_sum(state, sum, use_v ? &state.v : nullptr);
  const ParamVector gbar_next =
      state.gbar + hp.alpha / static_cast<double>(sum.n_samples) * corr;
  for (const auto& [n, gsum] : sum.grad_sum) {
    const double a = an[static_cast<std::size_t>(n)];
    ParamVector& buf = state.cluster_buffers[static_cast<std::size_t>(n)];
    if (use_v) {
      buf = (1.0 - a) * buf + a * state.v;
    } else {
      const ParamVector target = gsum / static_cast<double>(sum.count.at(n));
      const ParamVector updated = (1.0 - a) * buf + a * target;
      buf = state.variant == Variant::DiscoverQhm
                ? ParamVector(hp.nu_mix * updated + (1.0 - hp.nu_mix) * target)
                : updated;
    }
  }
  state.gbar = gbar_next;
}

// ---------------------------------------------------------------------------
// Step rules
//
// The *_apply forms take the minibatch-mean gradient directly (the engine
// reduces shard partials itself); the step_* forms wrap them for callers
// holding per-sample gradients.

inline ParamVector sgd_apply(OptimizerState& state, const ParamVector& theta,
                             const ParamVector& mean_grad, const HyperParams& hp) {
  ++state.step;
  return theta - hp.mu * mean_grad;
}

inline ParamVector momentum_apply(OptimizerState& state, const ParamVector& theta,
                                  const ParamVector& mean_grad, const HyperParams& hp) {
  state.v = hp.beta * state.v + (1.0 - hp.beta) * mean_grad;
  ++state.step;
  return theta - hp.mu * state.v;
}

inline ParamVector qhm_apply(OptimizerState& state, const ParamVector& theta,
                             const ParamVector& mean_grad, const HyperParams& hp) {
  state.v = hp.beta * state.v + (1.0 - hp.beta) * mean_grad;
  ++state.step;
  return theta - hp.mu * (hp.nu_mix * state.v + (1.0 - hp.nu_mix) * mean_grad);
}

inline ParamVector igt_apply(OptimizerState& state, const ParamVector& theta,
                             const ParamVector& mean_grad_at_transport, const HyperParams& hp) {
  const double gamma = igt_gamma(state.step, hp.igt_anchor_period);
  state.v = gamma * state.v + (1.0 - gamma) * mean_grad_at_transport;
  state.w = hp.beta * state.w - hp.mu * state.v;
  state.theta_prev = theta;
  ++state.step;
  return theta + state.w;
}

inline ParamVector adam_apply(OptimizerState& state, const ParamVector& theta,
                              const ParamVector& mean_grad, const HyperParams& hp) {
  state.adam_m = hp.adam_beta1 * state.adam_m + (1.0 - hp.adam_beta1) * mean_grad;
  state.adam_v = hp.adam_beta2 * state.adam_v +
                 (1.0 - hp.adam_beta2) * mean_grad.cwiseProduct(mean_grad);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const ParamVector m_hat = state.adam_m / (1.0 - std::pow(hp.adam_beta1, t));
  const ParamVector v_hat = state.adam_v / (1.0 - std::pow(hp.adam_beta2, t));
  return theta - hp.mu * (m_hat.array() / (v_hat.array().sqrt() + hp.adam_eps)).matrix();
}

/// theta_{t+1} = theta_t - mu * mean(grads).
inline ParamVector step_sgd(OptimizerState& state, const ParamVector& theta,
                            const GradResponse& grads, const HyperParams& hp) {
  return sgd_apply(state, theta, detail::batch_mean_grad(grads), hp);
}

/// v_t = beta v_{t-1} + (1-beta) mean(grads); theta_{t+1} = theta_t - mu v_t.
inline ParamVector step_momentum(OptimizerState& state, const ParamVector& theta,
                                 const GradResponse& grads, const HyperParams& hp) {
  return momentum_apply(state, theta, detail::batch_mean_grad(grads), hp);
}

/// Momentum buffer as above; the update direction interpolates buffer and
/// fresh gradient: theta_{t+1} = theta_t - mu [nu v_t + (1-nu) mean(grads)].
inline ParamVector step_qhm(OptimizerState& state, const ParamVector& theta,
                            const GradResponse& grads, const HyperParams& hp) {
  return qhm_apply(state, theta, detail::batch_mean_grad(grads), hp);
}

/// Gradients must come from transport_point(). v_t averages transported
/// gradients with weight gamma_t; w_t = beta w_{t-1} - mu v_t; theta moves
/// by w_t.
inline ParamVector step_igt(OptimizerState& state, const ParamVector& theta,
                            const GradResponse& grads_at_transport, const HyperParams& hp) {
  return igt_apply(state, theta, detail::batch_mean_grad(grads_at_transport), hp);
}

/// Bias-corrected Adam.
inline ParamVector step_adam(OptimizerState& state, const ParamVector& theta,
                             const GradResponse& grads, const HyperParams& hp) {
  return adam_apply(state, theta, detail::batch_mean_grad(grads), hp);
}

/// Discover. The theta update uses the buffers from time t,
/// then the per-cluster buffers and gbar advance:
///   theta_{t+1} = theta_t - (mu/|B|) sum_i (g_i - g^(n_i)_t + gbar_t)
///   g^(n)_{t+1} = (1-alpha_n) g^(n)_t + (alpha_n/|B^n|) sum_{B^n} g   for n in C
///   gbar_{t+1}  = gbar_t - (alpha/|B|) sum_i (g^(n_i)_t - g_i)
inline ParamVector discover_apply(OptimizerState& state, const ParamVector& theta,
                                  const ClusterGradSummary& sum, const HyperParams& hp,
                                  const ClusterSpec& spec) {
  require(!sum.empty(), "step_discover: empty batch");
  const ParamVector corr = detail::control_variate_sum(state, sum, nullptr);
  const ParamVector theta_next =
      theta - hp.mu / static_cast<double>(sum.n_samples) * corr - hp.mu * state.gbar;
  discover_buffer_update(state, sum, hp, spec);
  ++state.step;
  return theta_next;
}

inline ParamVector step_discover(OptimizerState& state, const ParamVector& theta,
                                 const GradResponse& grads, const HyperParams& hp,
                                 const ClusterSpec& spec) {
  return discover_apply(state, theta, summarize(grads, spec), hp, spec);
}

/// Discover-QHM. Theta update and gbar recursion as in Discover; the carried
/// per-cluster buffer is the nu-mix of the Discover-updated buffer and the
/// fresh sub-batch mean gradient. nu = 1 recovers Discover exactly.
inline ParamVector discover_qhm_apply(OptimizerState& state, const ParamVector& theta,
                                      const ClusterGradSummary& sum, const HyperParams& hp,
                                      const ClusterSpec& spec) {
  require(!sum.empty(), "step_discover_qhm: empty batch");
  const ParamVector corr = detail::control_variate_sum(state, sum, nullptr);
  const ParamVector theta_next =
      theta - hp.mu / static_cast<double>(sum.n_samples) * corr - hp.mu * state.gbar;
  discover_buffer_update(state, sum, hp, spec);
  ++state.step;
  return theta_next;
}

inline ParamVector step_discover_qhm(OptimizerState& state, const ParamVector& theta,
                                     const GradResponse& grads, const HyperParams& hp,
                                     const ClusterSpec& spec) {
  return discover_qhm_apply(state, theta, summarize(grads, spec), hp, spec);
}

/// Discover-IGT. Gradients must come from transport_point(). The tail
/// average v_t replaces the per-sample gradient in both the theta update and
/// the buffer recursions; plain IGT's w buffer is not used.
inline ParamVector discover_igt_apply(OptimizerState& state, const ParamVector& theta,
                                      const ClusterGradSummary& sum, const HyperParams& hp,
                                      const ClusterSpec& spec) {
  require(!sum.empty(), "step_discover_igt: empty batch");
  ParamVector grad_total = ParamVector::Zero(state.gbar.size());
  for (const auto& [n, gsum] : sum.grad_sum) grad_total += gsum;
  check_finite(grad_total, "step_discover_igt: gradients");
  const double gamma = igt_gamma(state.step, hp.igt_anchor_period);
  state.v = gamma * state.v + (1.0 - gamma) * (grad_total / static_cast<double>(sum.n_samples));

  const ParamVector corr = detail::control_variate_sum(state, sum, &state.v);
  const ParamVector theta_next =
      theta - hp.mu / static_cast<double>(sum.n_samples) * corr - hp.mu * state.gbar;
  discover_buffer_update(state, sum, hp, spec);
  state.theta_prev = theta;
  ++state.step;
  return theta_next;
}

inline ParamVector step_discover_igt(OptimizerState& state, const ParamVector& theta,
                                     const GradResponse& grads_at_transport,
                                     const HyperParams& hp, const ClusterSpec& spec) {
  return discover_igt_apply(state, theta, summarize(grads_at_transport, spec), hp, spec);
}

/// Dispatch on the state's variant.
inline ParamVector step(OptimizerState& state, const ParamVector& theta,
                        const GradResponse& grads, const HyperParams& hp,
                        const ClusterSpec& spec) {
  switch (state.variant) {
    case Variant::Sgd: return step_sgd(state, theta, grads, hp);
    case Variant::Momentum: return step_momentum(state, theta, grads, hp);
    case Variant::Qhm: return step_qhm(state, theta, grads, hp);
    case Variant::Igt: return step_igt(state, theta, grads, hp);
    case Variant::Adam: return step_adam(state, theta, grads, hp);
    case Variant::Discover: return step_discover(state, theta, grads, hp, spec);
    case Variant::DiscoverQhm: return step_discover_qhm(state, theta, grads, hp, spec);
    case Variant::DiscoverIgt: return step_discover_igt(state, theta, grads, hp, spec);
  }
  throw std::logic_error("step: unknown variant");
}

/// || gbar_t - sum_n p_n g^(n)_t ||_2. Diagnoses the divergence between
/// the two representations of the average cluster gradient (the running
/// recursion vs the probability-weighted buffer mean).
inline double gbar_drift(const OptimizerState& state, const ClusterSpec& spec) {
  require(is_discover_family(state.variant), "gbar_drift: not a Discover-family state");
  ParamVector weighted = ParamVector::Zero(state.gbar.size());
  for (int n = 0; n < spec.n_clusters(); ++n)
    weighted += spec.prob(n) * state.cluster_buffers[static_cast<std::size_t>(n)];
  return (state.gbar - weighted).norm();
}

}  // namespace discover
