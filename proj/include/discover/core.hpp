#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace discover {

/// Dense parameter / gradient vector. Dimension is fixed per run.
using ParamVector = Eigen::VectorXd;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_finite(const ParamVector& v, const char* what) {
  if (!v.allFinite())
    throw std::runtime_error(std::string(what) + ": non-finite entries");
}

/// alpha * x + y. Dimensions must agree.
inline ParamVector vec_axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  require(x.size() == y.size(), "vec_axpy: dimension mismatch");
  return alpha * x + y;
}

// ---------------------------------------------------------------------------
// ClusterSpec

/// Cluster count and sampling probabilities p_n. Probabilities must be
/// strictly positive and sum to 1 within 1e-12.
class ClusterSpec {
 public:
  explicit ClusterSpec(std::vector<double> probs) : probs_(std::move(probs)) {
    require(!probs_.empty(), "ClusterSpec: needs at least one cluster");
    double sum = 0.0;
    p_min_ = probs_.front();
    for (double p : probs_) {
      require(std::isfinite(p) && p > 0.0, "ClusterSpec: every p_n must be > 0");
      sum += p;
      if (p < p_min_) p_min_ = p;
    }
    require(std::abs(sum - 1.0) <= 1e-12, "ClusterSpec: probabilities must sum to 1");
  }

  static ClusterSpec uniform(int n) {
    require(n >= 1, "ClusterSpec: n_clusters must be positive");
    return ClusterSpec(std::vector<double>(static_cast<std::size_t>(n), 1.0 / n));
  }

  int n_clusters() const { return static_cast<int>(probs_.size()); }
  double prob(int n) const { return probs_.at(static_cast<std::size_t>(n)); }
  double p_min() const { return p_min_; }
  const std::vector<double>& probs() const { return probs_; }

 private:
  std::vector<double> probs_;
  double p_min_;
};

// ---------------------------------------------------------------------------
// MiniBatch

struct BatchItem {
  int cluster_id = 0;
  std::uint64_t sample_id = 0;  // opaque handle, keys per-sample randomness
};

struct MiniBatch {
  std::vector<BatchItem> items;

  int size() const { return static_cast<int>(items.size()); }
  bool empty() const { return items.empty(); }
};

/// Splits a batch into per-cluster sub-batches B_t^n. Only clusters present
/// in the batch appear as keys, so the key set is the cluster index set C.
inline std::map<int, MiniBatch> partition_batch(const MiniBatch& batch, const ClusterSpec& spec) {
  require(!batch.empty(), "partition_batch: empty batch");
  std::map<int, MiniBatch> parts;
  for (const BatchItem& item : batch.items) {
    require(item.cluster_id >= 0 && item.cluster_id < spec.n_clusters(),
            "partition_batch: cluster_id out of range");
    parts[item.cluster_id].items.push_back(item);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// RngStream
//
// Counter-based deterministic generator (splitmix64 walk from a keyed state).
// A stream is identified by (seed, stream_id) plus any derivation path, so
// sharded and sequential execution can consume identical randomness by
// deriving one child stream per purpose (e.g. per sample id).

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a + 0x9E3779B97F4A7C15ULL + (b ^ (b >> 17)) * 0xD1342543DE82EF95ULL);
}

}  // namespace detail

class RngStream {
 public:
  // Named substreams; one consumer owns each.
  enum Substream : std::uint64_t {
    kData = 1,
    kNoise = 2,
    kLabelFlip = 3,
    kShuffle = 4,
    kMetrics = 5,
    kInit = 6,
  };

  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : key_(detail::combine(detail::mix64(seed ^ 0xA0761D6478BD642FULL), stream_id)),
        state_(key_) {}

  /// Child stream keyed by (this stream's identity, a, b). Independent of how
  /// much the parent has been consumed.
  RngStream derive(std::uint64_t a, std::uint64_t b = 0) const {
    RngStream child(*this);
    child.key_ = detail::combine(detail::combine(key_, a), b);
    child.state_ = child.key_;
    child.cached_valid_ = false;
    return child;
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return detail::mix64(state_);
  }

  /// Uniform in [0, 1).
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller (pairs cached).
  double next_normal() {
    if (cached_valid_) {
      cached_valid_ = false;
      return cached_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log1p(-u1));
    const double a = 6.283185307179586476925 * u2;
    cached_ = r * std::sin(a);
    cached_valid_ = true;
    return r * std::cos(a);
  }

  ParamVector normal_vector(Eigen::Index d, double stddev = 1.0) {
    ParamVector v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = stddev * next_normal();
    return v;
  }

  /// Categorical draw over probs (assumed to sum to 1).
  int next_index(const std::vector<double>& probs) {
    const double u = next_uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

 private:
  std::uint64_t key_;
  std::uint64_t state_;
  double cached_ = 0.0;
  bool cached_valid_ = false;
};

}  // namespace discover
