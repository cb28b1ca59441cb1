#pragma once

#include "discover/core.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace discover {

// ---------------------------------------------------------------------------
// Clustered quadratic
//
// Per-cluster risk 0.5 (theta - c_n)' A_n (theta - c_n) with SPD A_n.
// Sampled gradients are the exact cluster gradient plus isotropic Gaussian
// noise, so every variance constant has a closed form.

class ClusteredQuadratic {
 public:
  ClusteredQuadratic(std::vector<Eigen::MatrixXd> matrices, std::vector<ParamVector> centers,
                     double noise_std, ClusterSpec spec)
      : matrices_(std::move(matrices)),
        centers_(std::move(centers)),
        noise_std_(noise_std),
        spec_(std::move(spec)) {
    require(static_cast<int>(matrices_.size()) == spec_.n_clusters(),
            "ClusteredQuadratic: one matrix per cluster required");
    require(centers_.size() == matrices_.size(),
            "ClusteredQuadratic: one center per cluster required");
    require(noise_std_ >= 0.0, "ClusteredQuadratic: noise_std must be >= 0");
    dim_ = matrices_.front().rows();
    for (std::size_t n = 0; n < matrices_.size(); ++n) {
      const Eigen::MatrixXd& a = matrices_[n];
      require(a.rows() == dim_ && a.cols() == dim_, "ClusteredQuadratic: matrix shape mismatch");
      require((a - a.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + a.cwiseAbs().maxCoeff()),
              "ClusteredQuadratic: matrix not symmetric");
      require(centers_[n].size() == dim_, "ClusteredQuadratic: center dimension mismatch");
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
      require(es.eigenvalues().minCoeff() > 0.0, "ClusteredQuadratic: matrix not positive definite");
    }
  }

  /// Random instance: each A_n is Q diag(lambda) Q' with lambda_1 = eig_min,
  /// lambda_2 = eig_max and the rest uniform in between, so the strong
  /// convexity and smoothness constants equal the requested interval ends.
  static ClusteredQuadratic random_instance(Eigen::Index dim, const ClusterSpec& spec,
                                            double eig_min, double eig_max, double center_scale,
                                            double noise_std, std::uint64_t seed) {
    require(dim >= 2, "ClusteredQuadratic: random instance needs dim >= 2");
    require(eig_min > 0.0 && eig_max >= eig_min, "ClusteredQuadratic: bad eigenvalue range");
    RngStream rng(seed, RngStream::kInit);
    std::vector<Eigen::MatrixXd> mats;
    std::vector<ParamVector> centers;
    for (int n = 0; n < spec.n_clusters(); ++n) {
      RngStream crng = rng.derive(static_cast<std::uint64_t>(n));
      Eigen::MatrixXd gauss(dim, dim);
      for (Eigen::Index i = 0; i < dim; ++i)
        for (Eigen::Index j = 0; j < dim; ++j) gauss(i, j) = crng.next_normal();
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
      Eigen::MatrixXd q = qr.householderQ();
      ParamVector eigs(dim);
      eigs[0] = eig_min;
      eigs[1] = eig_max;
      for (Eigen::Index i = 2; i < dim; ++i)
        eigs[i] = eig_min + (eig_max - eig_min) * crng.next_uniform();
      mats.push_back(q * eigs.asDiagonal() * q.transpose());
      centers.push_back(center_scale * crng.normal_vector(dim));
    }
    return ClusteredQuadratic(std::move(mats), std::move(centers), noise_std, spec);
  }

  Eigen::Index dim() const { return dim_; }
  const ClusterSpec& spec() const { return spec_; }
  double noise_std() const { return noise_std_; }
  const Eigen::MatrixXd& matrix(int n) const { return matrices_.at(static_cast<std::size_t>(n)); }
  const ParamVector& center(int n) const { return centers_.at(static_cast<std::size_t>(n)); }

  /// g_n(theta) = A_n (theta - c_n), exact.
  ParamVector cluster_mean_gradient(int n, const ParamVector& theta) const {
    return matrices_[static_cast<std::size_t>(n)] * (theta - centers_[static_cast<std::size_t>(n)]);
  }

  /// Full gradient sum_n p_n g_n(theta).
  ParamVector full_gradient(const ParamVector& theta) const {
    ParamVector g = ParamVector::Zero(dim_);
    for (int n = 0; n < spec_.n_clusters(); ++n)
      g += spec_.prob(n) * cluster_mean_gradient(n, theta);
    return g;
  }

  /// A_n (theta - c_n) + xi, xi ~ Normal(0, s^2 I) drawn from `noise`.
  ParamVector sample_gradient(int n, const ParamVector& theta, RngStream& noise) const {
    require(n >= 0 && n < spec_.n_clusters(), "sample_gradient: cluster out of range");
    ParamVector g = cluster_mean_gradient(n, theta);
    if (noise_std_ > 0.0) g += noise.normal_vector(dim_, noise_std_);
    return g;
  }

  /// Pooled minimizer of sum_n p_n l_n; solved densely and checked against
  /// the stationarity residual.
  ParamVector true_minimizer() const {
    Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(dim_, dim_);
    ParamVector rhs = ParamVector::Zero(dim_);
    for (int n = 0; n < spec_.n_clusters(); ++n) {
      pooled += spec_.prob(n) * matrices_[static_cast<std::size_t>(n)];
      rhs += spec_.prob(n) * matrices_[static_cast<std::size_t>(n)] *
             centers_[static_cast<std::size_t>(n)];
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(pooled, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 0.0) || hi / lo > 1e12)
      throw std::runtime_error("true_minimizer: pooled matrix ill-conditioned");
    ParamVector theta_star = pooled.ldlt().solve(rhs);
    const double residual = (pooled * theta_star - rhs).norm();
    if (residual > 1e-8)
      throw std::runtime_error("true_minimizer: residual " + std::to_string(residual) +
                               " exceeds 1e-8");
    return theta_star;
  }

  /// Expected risk sum_n p_n 0.5 (theta-c_n)' A_n (theta-c_n). Gradient noise
  /// does not contribute.
  double loss(const ParamVector& theta) const {
    double l = 0.0;
    for (int n = 0; n < spec_.n_clusters(); ++n) {
      const ParamVector diff = theta - centers_[static_cast<std::size_t>(n)];
      l += 0.5 * spec_.prob(n) * diff.dot(matrices_[static_cast<std::size_t>(n)] * diff);
    }
    return l;
  }

  /// sigma_n^2(theta) = 2 E||g(x^n, theta)||^2 = 2 (||A_n(theta-c_n)||^2 + d s^2).
  double sigma_n_sq(int n, const ParamVector& theta) const {
    const double mean_part = cluster_mean_gradient(n, theta).squaredNorm();
    return 2.0 * (mean_part + static_cast<double>(dim_) * noise_std_ * noise_std_);
  }

  /// sum_n p_n ||g_n(theta)||^2.
  double between_cluster_var(const ParamVector& theta) const {
    double v = 0.0;
    for (int n = 0; n < spec_.n_clusters(); ++n)
      v += spec_.prob(n) * cluster_mean_gradient(n, theta).squaredNorm();
    return v;
  }

  /// New instance with the centers pulled away from their p-weighted mean by
  /// `factor` (scales the between-cluster variance roughly quadratically).
  ClusteredQuadratic scale_center_spread(double factor) const {
    ParamVector mean = ParamVector::Zero(dim_);
    for (int n = 0; n < spec_.n_clusters(); ++n)
      mean += spec_.prob(n) * centers_[static_cast<std::size_t>(n)];
    std::vector<ParamVector> centers;
    centers.reserve(centers_.size());
    for (const ParamVector& c : centers_) centers.push_back(mean + factor * (c - mean));
    return ClusteredQuadratic(matrices_, std::move(centers), noise_std_, spec_);
  }

 private:
  std::vector<Eigen::MatrixXd> matrices_;
  std::vector<ParamVector> centers_;
  double noise_std_;
  ClusterSpec spec_;
  Eigen::Index dim_ = 0;
};

// ---------------------------------------------------------------------------
// Clustered softmax regression
//
// K Gaussian classes, cluster structure selectable: classes as clusters,
// fixed affine input perturbations as clusters, or content-free random
// clusters. Labels flip independently at every presentation with
// probability flip_prob.

enum class ClusterPolicy { Classes, Transforms, Random };

inline std::string to_string(ClusterPolicy p) {
  switch (p) {
    case ClusterPolicy::Classes: return "classes";
    case ClusterPolicy::Transforms: return "transforms";
    case ClusterPolicy::Random: return "random";
  }
  return "?";
}

class ClusteredLogistic {
 public:
  struct Example {
    ParamVector features;
    int label = 0;
  };

  ClusteredLogistic(int n_classes, Eigen::Index feature_dim, double class_sep, double input_std,
                    double flip_prob, ClusterPolicy policy, double transform_scale,
                    std::uint64_t seed)
      : n_classes_(n_classes),
        feature_dim_(feature_dim),
        input_std_(input_std),
        flip_prob_(flip_prob),
        policy_(policy),
        spec_(ClusterSpec::uniform(n_classes)) {
    require(n_classes_ >= 2, "ClusteredLogistic: needs at least two classes");
    require(feature_dim_ >= 1, "ClusteredLogistic: feature_dim must be >= 1");
    require(flip_prob_ >= 0.0 && flip_prob_ < 1.0, "ClusteredLogistic: flip_prob in [0, 1)");
    require(policy != ClusterPolicy::Transforms ||
                (transform_scale >= 0.0 && transform_scale < 1.0),
            "ClusteredLogistic: transform_scale must lie in [0, 1)");
    RngStream rng(seed, RngStream::kInit);
    for (int k = 0; k < n_classes_; ++k) {
      RngStream crng = rng.derive(100 + static_cast<std::uint64_t>(k));
      ParamVector m = crng.normal_vector(feature_dim_);
      class_means_.push_back(class_sep * m / m.norm());
    }
    if (policy_ == ClusterPolicy::Transforms) {
      // mixup-style contraction families: cluster n blends the example with
      // an independent second example at a fixed per-cluster ratio, cluster 0
      // being the identity
      for (int n = 0; n < n_classes_; ++n) {
        mix_lambda_.push_back(1.0 - transform_scale * static_cast<double>(n) /
                                        static_cast<double>(n_classes_ - 1));
      }
    }
  }

  int n_classes() const { return n_classes_; }
  Eigen::Index feature_dim() const { return feature_dim_; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(n_classes_) * (feature_dim_ + 1); }
  const ClusterSpec& spec() const { return spec_; }
  double flip_prob() const { return flip_prob_; }
  ClusterPolicy policy() const { return policy_; }
  const ParamVector& class_mean(int k) const { return class_means_.at(static_cast<std::size_t>(k)); }

  /// One training example for the given cluster. Under the classes policy the
  /// cluster fixes the class; otherwise the class is uniform and the cluster
  /// either perturbs the input (transforms) or carries no content (random).
  Example sample_example(int cluster, RngStream& data, RngStream& flips) const {
    require(cluster >= 0 && cluster < n_classes_, "sample_example: cluster out of range");
    int cls = cluster;
    if (policy_ != ClusterPolicy::Classes)
      cls = static_cast<int>(data.next_u64() % static_cast<std::uint64_t>(n_classes_));
    Example ex;
    ex.features = class_means_[static_cast<std::size_t>(cls)] +
                  data.normal_vector(feature_dim_, input_std_);
    if (policy_ == ClusterPolicy::Transforms) {
      const double lambda = mix_lambda_[static_cast<std::size_t>(cluster)];
      if (lambda < 1.0) {
        const int cls2 = static_cast<int>(data.next_u64() % static_cast<std::uint64_t>(n_classes_));
        const ParamVector other = class_means_[static_cast<std::size_t>(cls2)] +
                                  data.normal_vector(feature_dim_, input_std_);
        ex.features = lambda * ex.features + (1.0 - lambda) * other;
      }
    }
    ex.label = maybe_flip(cls, flips);
    return ex;
  }

  /// Clean example from the base distribution (no flips, no perturbation);
  /// used for validation.
  Example sample_clean_example(RngStream& data) const {
    const int cls = static_cast<int>(data.next_u64() % static_cast<std::uint64_t>(n_classes_));
    Example ex;
    ex.features = class_means_[static_cast<std::size_t>(cls)] +
                  data.normal_vector(feature_dim_, input_std_);
    ex.label = cls;
    return ex;
  }

  std::vector<Example> make_validation_set(int n, RngStream rng) const {
    std::vector<Example> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      RngStream srng = rng.derive(static_cast<std::uint64_t>(i));
      out.push_back(sample_clean_example(srng));
    }
    return out;
  }

  /// Softmax cross-entropy gradient for one example. Layout: K*F weights
  /// (row-major per class), then K biases.
  ParamVector gradient(const ParamVector& theta, const Example& ex) const {
    check_dim(theta);
    const ParamVector probs = softmax(theta, ex.features);
    ParamVector g = ParamVector::Zero(dim());
    for (int k = 0; k < n_classes_; ++k) {
      const double coeff = probs[k] - (k == ex.label ? 1.0 : 0.0);
      g.segment(static_cast<Eigen::Index>(k) * feature_dim_, feature_dim_) = coeff * ex.features;
      g[static_cast<Eigen::Index>(n_classes_) * feature_dim_ + k] = coeff;
    }
    check_finite(g, "logistic gradient");
    return g;
  }

  double loss(const ParamVector& theta, const Example& ex) const {
    check_dim(theta);
    ParamVector z = logits(theta, ex.features);
    const double zmax = z.maxCoeff();
    const double lse = zmax + std::log((z.array() - zmax).exp().sum());
    return lse - z[ex.label];
  }

  /// Monte-Carlo estimate of g_n(theta) over the cluster's training
  /// distribution (flips included), using m fresh examples from `rng`.
  ParamVector mc_cluster_mean_gradient(int n, const ParamVector& theta, RngStream rng,
                                       int m) const {
    ParamVector sum = ParamVector::Zero(dim());
    for (int i = 0; i < m; ++i) {
      RngStream data = rng.derive(2 * static_cast<std::uint64_t>(i));
      RngStream flips = rng.derive(2 * static_cast<std::uint64_t>(i) + 1);
      sum += gradient(theta, sample_example(n, data, flips));
    }
    return sum / static_cast<double>(m);
  }

  double accuracy(const ParamVector& theta, const std::vector<Example>& examples) const {
    require(!examples.empty(), "accuracy: empty example set");
    int correct = 0;
    for (const Example& ex : examples) {
      ParamVector z = logits(theta, ex.features);
      Eigen::Index best;
      z.maxCoeff(&best);
      if (static_cast<int>(best) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
  }

 private:
  int maybe_flip(int cls, RngStream& flips) const {
    if (flip_prob_ <= 0.0) return cls;
    if (flips.next_uniform() >= flip_prob_) return cls;
    const int other = static_cast<int>(flips.next_u64() %
                                       static_cast<std::uint64_t>(n_classes_ - 1));
    return other >= cls ? other + 1 : other;
  }

  ParamVector logits(const ParamVector& theta, const ParamVector& x) const {
    ParamVector z(n_classes_);
    for (int k = 0; k < n_classes_; ++k) {
      z[k] = theta.segment(static_cast<Eigen::Index>(k) * feature_dim_, feature_dim_).dot(x) +
             theta[static_cast<Eigen::Index>(n_classes_) * feature_dim_ + k];
    }
    return z;
  }

  ParamVector softmax(const ParamVector& theta, const ParamVector& x) const {
    ParamVector z = logits(theta, x);
    const double zmax = z.maxCoeff();
    ParamVector e = (z.array() - zmax).exp();
    return e / e.sum();
  }

  void check_dim(const ParamVector& theta) const {
    require(theta.size() == dim(), "ClusteredLogistic: theta dimension mismatch");
  }

  int n_classes_;
  Eigen::Index feature_dim_;
  double input_std_;
  double flip_prob_;
  ClusterPolicy policy_;
  ClusterSpec spec_;
  std::vector<ParamVector> class_means_;
  std::vector<double> mix_lambda_;
};

}  // namespace discover
