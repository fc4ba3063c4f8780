#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tcyolo/tensor.hpp"

namespace tcyolo {

/// Axis-aligned box in pixels, center form.
template <typename Scalar>
struct Box {
  Scalar cx = 0, cy = 0, w = 0, h = 0;
  Scalar score = Scalar(1);
  int class_id = 0;

  Scalar x1() const { return cx - w / 2; }
  Scalar y1() const { return cy - h / 2; }
  Scalar x2() const { return cx + w / 2; }
  Scalar y2() const { return cy + h / 2; }
  Scalar area() const { return w * h; }

  static Box from_corners(Scalar x1, Scalar y1, Scalar x2, Scalar y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

using BoxD = Box<double>;

/// Width/height prior in network-input pixels.
struct AnchorWH {
  double w = 0, h = 0;
  friend bool operator==(const AnchorWH&, const AnchorWH&) = default;
};

/// Nine priors sorted by area, three per detection scale (stride 8, 16, 32).
class AnchorSet {
 public:
  static constexpr int kScales = 3;

  AnchorSet() = default;
  explicit AnchorSet(std::vector<AnchorWH> anchors);

  /// The nine priors published for the tea-chrysanthemum dataset.
  static AnchorSet reference();

  std::size_t size() const { return anchors_.size(); }
  int per_scale() const { return int(anchors_.size()) / kScales; }
  const std::vector<AnchorWH>& all() const { return anchors_; }
  std::span<const AnchorWH> scale(int s) const {
    return std::span<const AnchorWH>(anchors_).subspan(std::size_t(s * per_scale()),
                                                       std::size_t(per_scale()));
  }

 private:
  std::vector<AnchorWH> anchors_;
};

template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b);

/// IoU minus the fraction of the smallest enclosing box not covered by the union.
template <typename Scalar>
Scalar giou(const Box<Scalar>& a, const Box<Scalar>& b);

/// IoU minus squared center distance over squared enclosing-box diagonal.
template <typename Scalar>
Scalar diou(const Box<Scalar>& a, const Box<Scalar>& b);

template <typename Scalar>
struct GiouLoss {
  Scalar loss;
  std::array<Scalar, 4> grad;  // d loss / d (cx, cy, w, h) of the prediction
};

/// 1 - giou(pred, target) with its analytic gradient w.r.t. the prediction.
template <typename Scalar>
GiouLoss<Scalar> giou_loss(const Box<Scalar>& pred, const Box<Scalar>& target);

/// IoU of two boxes sharing a center, from their extents only.
double shape_iou(double w1, double h1, double w2, double h2);

/// Greedy suppression by descending score (ties by input order). Boxes below
/// `score_threshold` are dropped first; a candidate is removed when its DIoU
/// with an already kept box exceeds `overlap_threshold`. Returns input indices.
template <typename Scalar>
std::vector<std::size_t> diou_nms_indices(std::span<const Box<Scalar>> boxes,
                                          Scalar overlap_threshold, Scalar score_threshold);

template <typename Scalar>
std::vector<Box<Scalar>> diou_nms(std::span<const Box<Scalar>> boxes, Scalar overlap_threshold,
                                  Scalar score_threshold);

// ---------------------------------------------------------------------------
// Head decoding. Raw head layout is N x (A * (5 + classes)) x G x G with fields
// (tx, ty, tw, th, objectness, class logits...) per anchor.

/// tw/th are clamped to this magnitude before exponentiation.
inline constexpr double kMaxLogScale = 30.0;

template <typename Scalar>
std::vector<Box<Scalar>> decode_head(const Tensor<Scalar>& raw, std::span<const AnchorWH> anchors,
                                     Scalar stride, int num_classes, Index image = 0);

/// Inverse of the decode map for one cell/anchor: the (tx, ty, tw, th) that
/// decode to `box`. Requires the box center inside the cell's open interval.
std::array<double, 4> encode_box(const BoxD& box, Index row, Index col, const AnchorWH& anchor,
                                 double stride);

// ---------------------------------------------------------------------------
// Target assignment.

struct Assignment {
  Index image = 0;
  int scale = 0;
  int anchor = 0;  // index within its scale
  Index row = 0, col = 0;
  BoxD target;
  double objectness = 1.0;
  int class_id = 0;
};

struct GridSize {
  Index rows = 0, cols = 0;
  double stride = 0;
};

/// One positive per ground truth: the (scale, anchor) with the highest
/// co-centered shape IoU (lower anchor index on ties), at the cell holding the
/// box center.
std::vector<Assignment> assign_targets(std::span<const BoxD> gts, const AnchorSet& anchors,
                                       std::span<const GridSize> grids, Index image = 0,
                                       std::string_view record_id = "");

/// Detection export line: "image class score x1 y1 x2 y2", 4 decimals.
std::string format_detection(std::string_view image_id, const BoxD& box);

}  // namespace tcyolo
