#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tailquant/rng.hpp"
#include "tailquant/tensor.hpp"

namespace tailquant {

struct CalibrationSample {
  std::string id;
  Tensor payload;  // raw pipeline input
  Tensor feature;  // flat embedding, same dimension across a pool
};

struct CalibrationPool {
  std::vector<CalibrationSample> samples;
  std::vector<std::string> planted_outlier_ids;  // ground truth for synthetic pools
  std::size_t size() const { return samples.size(); }
  const CalibrationSample& by_id(const std::string& id) const;
};

struct ClusterResult {
  std::size_t k = 0;
  Tensor centroids;                      // k x d
  std::vector<std::size_t> assignments;  // row-aligned with the input features
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding; converges when assignments
/// stop changing or max_iter is reached. Deterministic given the seed.
ClusterResult kmeans(const Tensor& features, std::size_t k, Rng& rng, std::size_t max_iter = 100);

/// Coarse outlier suppression: 2-means on the pool features, keep the larger
/// cluster. An exact size tie keeps the cluster holding the lexicographically
/// smallest sample id.
std::set<std::string> stage1_suppress(const CalibrationPool& pool, Rng& rng);

struct SelectionProvenance {
  std::size_t cluster = 0;
  std::size_t rank = 0;  // 1 = nearest to centroid, 2 = second nearest, >2 = backfill order
};

struct SelectionResult {
  std::vector<std::string> selected_ids;  // selection order
  std::set<std::string> stage1_kept;
  ClusterResult stage2_clusters;
  std::vector<std::string> stage2_ids;  // row order of stage2_clusters.assignments
  std::map<std::string, SelectionProvenance> provenance;
};

/// Fine-grained representative selection: (n_target/2)-means over the kept
/// samples, then the two centroid-nearest members per cluster. Singleton
/// clusters contribute their member; the deficit is backfilled from the
/// largest clusters' next-nearest unselected samples.
SelectionResult stage2_select(const CalibrationPool& pool, const std::set<std::string>& kept,
                              std::size_t n_target, Rng& rng);

/// Full two-stage construction: suppress then select, provenance recorded.
SelectionResult build_calibration_set(const CalibrationPool& pool, std::size_t n_target, Rng& rng);

struct StabilityEntry {
  std::string id;
  std::vector<double> layer_variances;  // v_l per tapped layer
  double v_bar = 0.0;
  double score = 0.0;  // 1 / (v_bar + eps)
};

struct StabilityReport {
  std::vector<StabilityEntry> per_sample;  // pool order
  double eps = 1e-8;
};

/// Model hook: per-layer token representations for one payload, each
/// n_tokens x channels.
using LayerTapModel = std::function<std::vector<Tensor>(const Tensor& payload)>;

/// Inverse aggregated token-feature variance per sample. For each layer,
/// the per-token population variance over channels is averaged over tokens;
/// layer values are averaged and inverted with an epsilon guard.
StabilityReport stability_scores(const CalibrationPool& pool, const LayerTapModel& model,
                                 double eps_s = 1e-8);

using FeatureExtractor = std::function<Tensor(const Tensor& payload)>;

/// Default embedding: per-channel summary statistics (mean, population std,
/// skewness, excess kurtosis, min, max), concatenated channel-major. A 1-D
/// payload is a single channel; a 2-D payload has one channel per column.
Tensor default_feature_extractor(const Tensor& payload);

Tensor embed_features(const Tensor& payload, const FeatureExtractor& extractor = {});

}  // namespace tailquant
