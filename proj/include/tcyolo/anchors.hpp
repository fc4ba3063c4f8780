#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tcyolo/boxgeom.hpp"

namespace tcyolo {

struct KMeansOptions {
  int k = 9;
  std::uint64_t seed = 0;
  int max_iterations = 300;
  /// Independent k-means++ restarts; the lowest final distance wins.
  int restarts = 1;
};

struct KMeansResult {
  std::vector<AnchorWH> centroids;        // sorted ascending by area
  std::vector<double> distance_history;   // total 1 - IoU after each assignment step
  int iterations = 0;
  bool converged = false;
};

/// Lloyd iterations under d = 1 - shape IoU with per-cluster median updates,
/// seeded k-means++ style on the same distance. The input is put into a
/// canonical order first, so the result does not depend on input order.
KMeansResult kmeans_dims(std::span<const AnchorWH> dims, const KMeansOptions& options);

/// kmeans_dims packaged as an anchor set (k must be a multiple of 3).
AnchorSet kmeans_anchors(std::span<const AnchorWH> dims, const KMeansOptions& options = {});

/// Mean over boxes of the best shape IoU against any anchor.
double mean_best_iou(std::span<const AnchorWH> dims, std::span<const AnchorWH> anchors);

}  // namespace tcyolo
