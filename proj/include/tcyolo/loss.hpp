#pragma once

#include <array>
#include <span>

#include "tcyolo/autodiff.hpp"
#include "tcyolo/boxgeom.hpp"

namespace tcyolo {

struct LossWeights {
  double box = 0.05;
  double obj = 1.0;
  double cls = 0.5;
};

struct LossBreakdown {
  double total = 0, box = 0, obj = 0, cls = 0;
  Index positives = 0;
};

template <typename Scalar>
struct LossResult {
  Var<Scalar> total;
  LossBreakdown parts;
};

/// Detection loss over the three raw heads:
///   N * (w_box * mean(1 - GIoU) over positives
///        + w_obj * sum over scales of mean objectness BCE over all cells
///        + w_cls * mean class BCE over positives)
/// where N is the batch size. With no positives only the objectness term is
/// non-zero. Recorded as a single tape node with an analytic backward rule.
template <typename Scalar>
LossResult<Scalar> total_loss(std::span<const Var<Scalar>> heads, std::span<const double> strides,
                              const AnchorSet& anchors, std::span<const Assignment> assignments,
                              int num_classes, const LossWeights& weights = {});

/// Grid geometry of each head, for assign_targets.
template <typename Scalar>
std::vector<GridSize> head_grids(std::span<const Var<Scalar>> heads, std::span<const double> strides);

}  // namespace tcyolo
