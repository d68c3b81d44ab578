#include "tailquant/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace tailquant {

const CalibrationSample& CalibrationPool::by_id(const std::string& id) const {
  for (const auto& s : samples) {
    if (s.id == id) return s;
  }
  throw std::invalid_argument("calibration pool: unknown sample id " + id);
}

namespace {

double sq_dist(const Tensor& features, std::size_t row, const Tensor& centroids, std::size_t c) {
  const std::size_t d = features.cols();
  double acc = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = features.at(row, j) - centroids.at(c, j);
    acc += diff * diff;
  }
  return acc;
}

Tensor pool_features(const CalibrationPool& pool) {
  if (pool.size() == 0) throw std::invalid_argument("calibration pool is empty");
  const std::size_t d = pool.samples.front().feature.size();
  Tensor f({pool.size(), d});
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Tensor& feat = pool.samples[i].feature;
    if (feat.size() != d) {
      throw std::invalid_argument("calibration pool: inconsistent feature dimension for sample " +
                                  pool.samples[i].id);
    }
    for (std::size_t j = 0; j < d; ++j) f.at(i, j) = feat[j];
  }
  return f;
}

}  // namespace

ClusterResult kmeans(const Tensor& features, std::size_t k, Rng& rng, std::size_t max_iter) {
  const std::size_t m = features.rows(), d = features.cols();
  if (k < 1 || k > m) {
    throw std::invalid_argument("kmeans: k " + std::to_string(k) + " out of [1," + std::to_string(m) + "]");
  }

  // k-means++ seeding. When every remaining point coincides with a chosen
  // centroid (zero total weight), fall back to the lowest unchosen row.
  Tensor centroids({k, d});
  std::vector<bool> used(m, false);
  std::vector<double> min_d2(m, std::numeric_limits<double>::infinity());
  {
    const std::size_t first = rng.uniform_index(m);
    used[first] = true;
    for (std::size_t j = 0; j < d; ++j) centroids.at(0, j) = features.at(first, j);
  }
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      min_d2[i] = std::min(min_d2[i], sq_dist(features, i, centroids, c - 1));
      total += min_d2[i];
    }
    std::size_t pick = m;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double run = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        run += min_d2[i];
        if (r < run) {
          pick = i;
          break;
        }
      }
      if (pick == m) pick = m - 1;  // r == total after rounding
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        if (!used[i]) {
          pick = i;
          break;
        }
      }
      if (pick == m) pick = 0;
    }
    used[pick] = true;
    for (std::size_t j = 0; j < d; ++j) centroids.at(c, j) = features.at(pick, j);
  }

  // Lloyd iterations; ties go to the lower centroid index, empty clusters
  // keep their previous centroid.
  std::vector<std::size_t> assign(m, 0);
  double inertia = 0.0;
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    bool changed = iter == 0;
    inertia = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(features, i, centroids, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(features, i, centroids, c);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (assign[i] != best) changed = true;
      assign[i] = best;
      inertia += best_d;
    }
    if (!changed) break;
    Tensor sums({k, d});
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums.at(assign[i], j) += features.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) centroids.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
    }
  }
  // Final consistency pass so inertia matches the reported assignment.
  inertia = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    double best_d = sq_dist(features, i, centroids, 0);
    for (std::size_t c = 1; c < k; ++c) {
      const double dd = sq_dist(features, i, centroids, c);
      if (dd < best_d) {
        best_d = dd;
        best = c;
      }
    }
    assign[i] = best;
    inertia += best_d;
  }

  ClusterResult out;
  out.k = k;
  out.centroids = std::move(centroids);
  out.assignments = std::move(assign);
  out.inertia = inertia;
  return out;
}

std::set<std::string> stage1_suppress(const CalibrationPool& pool, Rng& rng) {
  if (pool.size() < 2) throw std::invalid_argument("stage1_suppress: pool needs at least 2 samples");
  const Tensor features = pool_features(pool);
  const ClusterResult clusters = kmeans(features, 2, rng);

  std::size_t count0 = 0;
  for (std::size_t a : clusters.assignments) count0 += (a == 0);
  const std::size_t count1 = pool.size() - count0;

  std::size_t keep;
  if (count0 != count1) {
    keep = count0 > count1 ? 0 : 1;
  } else {
    // Exact tie: keep the cluster holding the lexicographically smallest id.
    std::size_t smallest = 0;
    for (std::size_t i = 1; i < pool.size(); ++i) {
      if (pool.samples[i].id < pool.samples[smallest].id) smallest = i;
    }
    keep = clusters.assignments[smallest];
  }

  std::set<std::string> kept;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (clusters.assignments[i] == keep) kept.insert(pool.samples[i].id);
  }
  return kept;
}

SelectionResult stage2_select(const CalibrationPool& pool, const std::set<std::string>& kept,
                              std::size_t n_target, Rng& rng) {
  if (n_target == 0 || n_target % 2 != 0) {
    throw std::invalid_argument("stage2_select: target size must be even and positive");
  }
  if (n_target > kept.size()) {
    throw std::invalid_argument("stage2_select: target size " + std::to_string(n_target) +
                                " exceeds kept pool of " + std::to_string(kept.size()));
  }

  // Kept samples in pool order.
  std::vector<std::size_t> rows;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (kept.count(pool.samples[i].id)) {
      rows.push_back(i);
      ids.push_back(pool.samples[i].id);
    }
  }
  const std::size_t d = pool.samples.front().feature.size();
  Tensor features({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) features.at(r, j) = pool.samples[rows[r]].feature[j];
  }

  const std::size_t k = n_target / 2;
  ClusterResult clusters = kmeans(features, k, rng);

  // Distance of every kept sample to its cluster centroid, members per cluster
  // ordered by (distance, id).
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t r = 0; r < rows.size(); ++r) members[clusters.assignments[r]].push_back(r);
  std::vector<double> dist(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    dist[r] = sq_dist(features, r, clusters.centroids, clusters.assignments[r]);
  }
  for (auto& mem : members) {
    std::sort(mem.begin(), mem.end(), [&](std::size_t a, std::size_t b) {
      if (dist[a] != dist[b]) return dist[a] < dist[b];
      return ids[a] < ids[b];
    });
  }

  SelectionResult out;
  out.stage1_kept = kept;
  out.stage2_ids = ids;

  std::vector<bool> taken(rows.size(), false);
  std::vector<std::size_t> taken_count(k, 0);
  auto take = [&](std::size_t cluster, std::size_t member_pos) {
    const std::size_t r = members[cluster][member_pos];
    taken[r] = true;
    ++taken_count[cluster];
    out.selected_ids.push_back(ids[r]);
    out.provenance[ids[r]] = SelectionProvenance{cluster, member_pos + 1};
  };

  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t pos = 0; pos < std::min<std::size_t>(2, members[c].size()); ++pos) take(c, pos);
  }

  // Backfill a deficit left by singleton (or empty) clusters from the largest
  // clusters' next-nearest unselected members, round-robin.
  while (out.selected_ids.size() < n_target) {
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (members[a].size() != members[b].size()) return members[a].size() > members[b].size();
      return a < b;
    });
    bool progressed = false;
    for (std::size_t c : order) {
      if (out.selected_ids.size() >= n_target) break;
      if (taken_count[c] < members[c].size()) {
        take(c, taken_count[c]);
        progressed = true;
      }
    }
    if (!progressed) {
      throw std::logic_error("stage2_select: backfill exhausted the kept pool");
    }
  }

  out.stage2_clusters = std::move(clusters);
  return out;
}

SelectionResult build_calibration_set(const CalibrationPool& pool, std::size_t n_target, Rng& rng) {
  const std::set<std::string> kept = stage1_suppress(pool, rng);
  return stage2_select(pool, kept, n_target, rng);
}

StabilityReport stability_scores(const CalibrationPool& pool, const LayerTapModel& model, double eps_s) {
  if (!model) throw std::invalid_argument("stability_scores: no model hook supplied");
  if (!(eps_s > 0.0)) throw std::invalid_argument("stability_scores: eps must be positive");

  StabilityReport report;
  report.eps = eps_s;
  for (const auto& sample : pool.samples) {
    const std::vector<Tensor> layers = model(sample.payload);
    if (layers.empty()) throw std::invalid_argument("stability_scores: model produced no layers");

    StabilityEntry entry;
    entry.id = sample.id;
    for (const Tensor& t : layers) {
      const std::size_t n_tok = t.rows(), channels = t.cols();
      double acc = 0.0;
      for (std::size_t n = 0; n < n_tok; ++n) {
        double mean = 0.0;
        for (std::size_t c = 0; c < channels; ++c) mean += t.at(n, c);
        mean /= static_cast<double>(channels);
        double var = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const double diff = t.at(n, c) - mean;
          var += diff * diff;
        }
        acc += var / static_cast<double>(channels);
      }
      entry.layer_variances.push_back(acc / static_cast<double>(n_tok));
    }
    entry.v_bar = std::accumulate(entry.layer_variances.begin(), entry.layer_variances.end(), 0.0) /
                  static_cast<double>(entry.layer_variances.size());
    entry.score = 1.0 / (entry.v_bar + eps_s);
    report.per_sample.push_back(std::move(entry));
  }
  return report;
}

namespace {

void channel_stats(const double* vals, std::size_t n, std::size_t stride, double* out6) {
  double mean = 0.0;
  double mn = vals[0], mx = vals[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double v = vals[i * stride];
    mean += v;
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  mean /= static_cast<double>(n);
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dv = vals[i * stride] - mean;
    m2 += dv * dv;
    m3 += dv * dv * dv;
    m4 += dv * dv * dv * dv;
  }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  const double stddev = std::sqrt(m2);
  const double skew = m2 > 0.0 ? m3 / (m2 * stddev) : 0.0;
  const double kurt = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  out6[0] = mean;
  out6[1] = stddev;
  out6[2] = skew;
  out6[3] = kurt;
  out6[4] = mn;
  out6[5] = mx;
}

}  // namespace

Tensor default_feature_extractor(const Tensor& payload) {
  if (payload.size() == 0) throw std::invalid_argument("feature extractor: empty payload");
  if (payload.ndim() == 2) {
    const std::size_t rows = payload.rows(), channels = payload.cols();
    Tensor feat({channels * 6});
    for (std::size_t c = 0; c < channels; ++c) {
      channel_stats(payload.data().data() + c, rows, channels, feat.data().data() + c * 6);
    }
    return feat;
  }
  Tensor flat = payload.flattened();
  Tensor feat({6});
  channel_stats(flat.data().data(), flat.size(), 1, feat.data().data());
  return feat;
}

Tensor embed_features(const Tensor& payload, const FeatureExtractor& extractor) {
  if (payload.size() == 0) throw std::invalid_argument("embed_features: empty payload");
  return extractor ? extractor(payload) : default_feature_extractor(payload);
}

}  // namespace tailquant
