#include "tcyolo/anchors.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <set>

#include "tcyolo/error.hpp"
#include "tcyolo/random.hpp"

namespace tcyolo {

namespace {

double distance(const AnchorWH& a, const AnchorWH& b) { return 1.0 - shape_iou(a.w, a.h, b.w, b.h); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AnchorWH> seed_centroids(const std::vector<AnchorWH>& dims, int k, std::mt19937_64& rng) {
  std::vector<AnchorWH> centroids;
  centroids.push_back(dims[std::size_t(rng() % dims.size())]);
  std::vector<double> nearest(dims.size(), std::numeric_limits<double>::max());
  while (int(centroids.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      nearest[i] = std::min(nearest[i], distance(dims[i], centroids.back()));
      total += nearest[i] * nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (pick = 0; pick + 1 < dims.size(); ++pick) {
        r -= nearest[pick] * nearest[pick];
        if (r < 0 && nearest[pick] > 0) break;
      }
      while (nearest[pick] == 0) pick = (pick + 1) % dims.size();
    }
    centroids.push_back(dims[pick]);
  }
  return centroids;
}

KMeansResult lloyd(const std::vector<AnchorWH>& dims, std::vector<AnchorWH> centroids,
                   int max_iterations) {
  KMeansResult result;
  const std::size_t k = centroids.size();
  std::vector<std::size_t> assign(dims.size(), k);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    double total = 0;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = distance(dims[i], centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed = changed || assign[i] != best;
      assign[i] = best;
      total += best_d;
    }
    result.distance_history.push_back(total);
    result.iterations = it + 1;
    if (!changed) {
      result.converged = true;
      break;
    }
    std::vector<std::vector<double>> ws(k), hs(k);
    for (std::size_t i = 0; i < dims.size(); ++i) {
      ws[assign[i]].push_back(dims[i].w);
      hs[assign[i]].push_back(dims[i].h);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (!ws[c].empty()) {
        // The median does not minimize the IoU distance, so it is only taken
        // when it does not raise the cluster's total distance.
        const AnchorWH candidate{median(ws[c]), median(hs[c])};
        double before = 0, after = 0;
        for (std::size_t i = 0; i < dims.size(); ++i) {
          if (assign[i] != c) continue;
          before += distance(dims[i], centroids[c]);
          after += distance(dims[i], candidate);
        }
        if (after <= before) centroids[c] = candidate;
        continue;
      }
      // Empty cluster: move it to the point farthest from its own centroid.
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < dims.size(); ++i) {
        const double d = distance(dims[i], centroids[assign[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids[c] = dims[far];
      assign[far] = c;
    }
  }
  std::sort(centroids.begin(), centroids.end(), [](const AnchorWH& a, const AnchorWH& b) {
    return a.w * a.h < b.w * b.h || (a.w * a.h == b.w * b.h && a.w < b.w);
  });
  result.centroids = std::move(centroids);
  return result;
}

}  // namespace

KMeansResult kmeans_dims(std::span<const AnchorWH> input, const KMeansOptions& options) {
  if (options.k < 1) throw ConfigError("k-means needs k >= 1");
  for (const auto& d : input)
    if (!(d.w > 0 && d.h > 0)) throw DataError("box dimensions must be positive for k-means");
  std::vector<AnchorWH> dims(input.begin(), input.end());
  std::sort(dims.begin(), dims.end(),
            [](const AnchorWH& a, const AnchorWH& b) { return a.w < b.w || (a.w == b.w && a.h < b.h); });
  std::set<std::pair<double, double>> distinct;
  for (const auto& d : dims) distinct.insert({d.w, d.h});
  if (distinct.size() < std::size_t(options.k))
    throw DataError("k-means needs at least " + std::to_string(options.k) +
                    " distinct box dimensions, got " + std::to_string(distinct.size()));

  std::mt19937_64 rng(options.seed);
  KMeansResult best;
  for (int r = 0; r < std::max(1, options.restarts); ++r) {
    KMeansResult run = lloyd(dims, seed_centroids(dims, options.k, rng), options.max_iterations);
    if (best.centroids.empty() || run.distance_history.back() < best.distance_history.back())
      best = std::move(run);
  }
  return best;
}

AnchorSet kmeans_anchors(std::span<const AnchorWH> dims, const KMeansOptions& options) {
  if (options.k % AnchorSet::kScales != 0)
    throw ConfigError("anchor k must be a multiple of 3, got " + std::to_string(options.k));
  return AnchorSet(kmeans_dims(dims, options).centroids);
}

double mean_best_iou(std::span<const AnchorWH> dims, std::span<const AnchorWH> anchors) {
  if (dims.empty() || anchors.empty()) throw DataError("mean_best_iou needs boxes and anchors");
  double total = 0;
  for (const auto& d : dims) {
    double best = 0;
    for (const auto& a : anchors) best = std::max(best, shape_iou(d.w, d.h, a.w, a.h));
    total += best;
  }
  return total / double(dims.size());
}

}  // namespace tcyolo
