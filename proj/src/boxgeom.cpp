#include "tcyolo/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tcyolo/error.hpp"

namespace tcyolo {

AnchorSet::AnchorSet(std::vector<AnchorWH> anchors) : anchors_(std::move(anchors)) {
  if (anchors_.empty() || anchors_.size() % kScales != 0)
    throw ConfigError("anchor set needs a positive multiple of 3 priors, got " +
                      std::to_string(anchors_.size()));
  for (const auto& a : anchors_)
    if (!(a.w > 0 && a.h > 0)) throw ConfigError("anchor extents must be positive");
  std::stable_sort(anchors_.begin(), anchors_.end(), [](const AnchorWH& a, const AnchorWH& b) {
    return a.w * a.h < b.w * b.h;
  });
}

AnchorSet AnchorSet::reference() {
  return AnchorSet({{10, 13}, {16, 30}, {33, 23}, {30, 61}, {62, 45},
                    {59, 119}, {116, 90}, {156, 198}, {373, 326}});
}

namespace {

template <typename Scalar>
struct Overlap {
  Scalar inter, uni, enclose_w, enclose_h;
};

template <typename Scalar>
Overlap<Scalar> overlap(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar iw = std::max(Scalar(0), std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const Scalar ih = std::max(Scalar(0), std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const Scalar inter = iw * ih;
  return {inter, a.area() + b.area() - inter,
          std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1()),
          std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1())};
}

}  // namespace

template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const auto o = overlap(a, b);
  return o.uni > 0 ? o.inter / o.uni : Scalar(0);
}

template <typename Scalar>
Scalar giou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const auto o = overlap(a, b);
  const Scalar enclose = o.enclose_w * o.enclose_h;
  const Scalar i = o.uni > 0 ? o.inter / o.uni : Scalar(0);
  if (enclose <= 0) return i;
  return i - (enclose - o.uni) / enclose;
}

template <typename Scalar>
Scalar diou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const auto o = overlap(a, b);
  const Scalar i = o.uni > 0 ? o.inter / o.uni : Scalar(0);
  const Scalar diag2 = o.enclose_w * o.enclose_w + o.enclose_h * o.enclose_h;
  if (diag2 <= 0) return i;
  const Scalar dx = a.cx - b.cx, dy = a.cy - b.cy;
  return i - (dx * dx + dy * dy) / diag2;
}

template <typename Scalar>
GiouLoss<Scalar> giou_loss(const Box<Scalar>& p, const Box<Scalar>& t) {
  // Work in corner coordinates, then chain to (cx, cy, w, h).
  const Scalar px1 = p.x1(), px2 = p.x2(), py1 = p.y1(), py2 = p.y2();
  const Scalar tx1 = t.x1(), tx2 = t.x2(), ty1 = t.y1(), ty2 = t.y2();

  const Scalar iw_raw = std::min(px2, tx2) - std::max(px1, tx1);
  const Scalar ih_raw = std::min(py2, ty2) - std::max(py1, ty1);
  const bool ix = iw_raw > 0, iy = ih_raw > 0;
  const Scalar iw = ix ? iw_raw : Scalar(0), ih = iy ? ih_raw : Scalar(0);
  const Scalar inter = iw * ih;
  const Scalar area_p = (px2 - px1) * (py2 - py1);
  const Scalar uni = area_p + t.area() - inter;
  const Scalar cw = std::max(px2, tx2) - std::min(px1, tx1);
  const Scalar ch = std::max(py2, ty2) - std::min(py1, ty1);
  const Scalar enclose = cw * ch;
  if (!(uni > 0) || !(enclose > 0)) return {Scalar(1), {0, 0, 0, 0}};

  const Scalar g = inter / uni - (enclose - uni) / enclose;

  // d inter / d corner
  const Scalar di_x1 = (ix && px1 > tx1) ? -ih : Scalar(0);
  const Scalar di_x2 = (ix && px2 < tx2) ? ih : Scalar(0);
  const Scalar di_y1 = (iy && py1 > ty1) ? -iw : Scalar(0);
  const Scalar di_y2 = (iy && py2 < ty2) ? iw : Scalar(0);
  // d area_p / d corner
  const Scalar ph = py2 - py1, pw = px2 - px1;
  const Scalar da_x1 = -ph, da_x2 = ph, da_y1 = -pw, da_y2 = pw;
  // d enclose / d corner
  const Scalar dc_x1 = px1 < tx1 ? -ch : Scalar(0);
  const Scalar dc_x2 = px2 > tx2 ? ch : Scalar(0);
  const Scalar dc_y1 = py1 < ty1 ? -cw : Scalar(0);
  const Scalar dc_y2 = py2 > ty2 ? cw : Scalar(0);

  // g = I/U - 1 + U/C
  auto dg = [&](Scalar di, Scalar da, Scalar dc) {
    const Scalar du = da - di;
    return di / uni - inter * du / (uni * uni) + du / enclose - uni * dc / (enclose * enclose);
  };
  const Scalar g_x1 = dg(di_x1, da_x1, dc_x1), g_x2 = dg(di_x2, da_x2, dc_x2);
  const Scalar g_y1 = dg(di_y1, da_y1, dc_y1), g_y2 = dg(di_y2, da_y2, dc_y2);

  // loss = 1 - g; x1 = cx - w/2, x2 = cx + w/2
  return {Scalar(1) - g,
          {-(g_x1 + g_x2), -(g_y1 + g_y2), -(g_x2 - g_x1) / 2, -(g_y2 - g_y1) / 2}};
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  const double uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0.0;
}

template <typename Scalar>
std::vector<std::size_t> diou_nms_indices(std::span<const Box<Scalar>> boxes,
                                          Scalar overlap_threshold, Scalar score_threshold) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (boxes[i].score >= score_threshold) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<std::size_t> kept;
  std::vector<bool> removed(order.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (removed[i]) continue;
    const auto& best = boxes[order[i]];
    kept.push_back(order[i]);
    for (std::size_t j = i + 1; j < order.size(); ++j)
      if (!removed[j] && diou(best, boxes[order[j]]) > overlap_threshold) removed[j] = true;
  }
  return kept;
}

template <typename Scalar>
std::vector<Box<Scalar>> diou_nms(std::span<const Box<Scalar>> boxes, Scalar overlap_threshold,
                                  Scalar score_threshold) {
  std::vector<Box<Scalar>> out;
  for (std::size_t i : diou_nms_indices(boxes, overlap_threshold, score_threshold))
    out.push_back(boxes[i]);
  return out;
}

namespace {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace

template <typename Scalar>
std::vector<Box<Scalar>> decode_head(const Tensor<Scalar>& raw, std::span<const AnchorWH> anchors,
                                     Scalar stride, int num_classes, Index image) {
  require_nchw(raw, "decode_head input");
  const Index fields = 5 + num_classes;
  const Index na = Index(anchors.size());
  if (num_classes < 1 || raw.dim(1) != na * fields)
    throw ConfigError("decode_head: expected " + std::to_string(na * fields) +
                      " channels for " + std::to_string(na) + " anchors and " +
                      std::to_string(num_classes) + " classes, got " + std::to_string(raw.dim(1)));
  if (image < 0 || image >= raw.dim(0)) throw DimensionError("decode_head: image index out of range");
  const Index gh = raw.dim(2), gw = raw.dim(3);
  const Scalar clamp = Scalar(kMaxLogScale);
  std::vector<Box<Scalar>> boxes;
  boxes.reserve(std::size_t(na * gh * gw));
  for (Index a = 0; a < na; ++a) {
    for (Index i = 0; i < gh; ++i) {
      for (Index j = 0; j < gw; ++j) {
        auto field = [&](Index f) { return raw.at(image, a * fields + f, i, j); };
        Box<Scalar> b;
        b.cx = (sigmoid(field(0)) + Scalar(j)) * stride;
        b.cy = (sigmoid(field(1)) + Scalar(i)) * stride;
        b.w = Scalar(anchors[std::size_t(a)].w) * std::exp(std::clamp(field(2), -clamp, clamp));
        b.h = Scalar(anchors[std::size_t(a)].h) * std::exp(std::clamp(field(3), -clamp, clamp));
        int best_class = 0;
        Scalar best = field(5);
        for (int c = 1; c < num_classes; ++c)
          if (field(5 + c) > best) {
            best = field(5 + c);
            best_class = c;
          }
        b.score = sigmoid(field(4)) * sigmoid(best);
        b.class_id = best_class;
        boxes.push_back(b);
      }
    }
  }
  return boxes;
}

std::array<double, 4> encode_box(const BoxD& box, Index row, Index col, const AnchorWH& anchor,
                                 double stride) {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  const double fx = box.cx / stride - double(col);
  const double fy = box.cy / stride - double(row);
  if (!(fx > 0 && fx < 1 && fy > 0 && fy < 1))
    throw DimensionError("encode_box: center outside cell (" + std::to_string(row) + ", " +
                         std::to_string(col) + ")");
  return {logit(fx), logit(fy), std::log(box.w / anchor.w), std::log(box.h / anchor.h)};
}

std::vector<Assignment> assign_targets(std::span<const BoxD> gts, const AnchorSet& anchors,
                                       std::span<const GridSize> grids, Index image,
                                       std::string_view record_id) {
  if (grids.size() != std::size_t(AnchorSet::kScales))
    throw ConfigError("assign_targets: expected 3 grid sizes");
  std::vector<Assignment> out;
  out.reserve(gts.size());
  for (const auto& gt : gts) {
    if (!(gt.w > 0 && gt.h > 0))
      throw DataError("zero-area ground truth box in record '" + std::string(record_id) + "'");
    int best = 0;
    double best_iou = -1;
    for (std::size_t k = 0; k < anchors.size(); ++k) {
      const double s = shape_iou(gt.w, gt.h, anchors.all()[k].w, anchors.all()[k].h);
      if (s > best_iou) {
        best_iou = s;
        best = int(k);
      }
    }
    Assignment a;
    a.image = image;
    a.scale = best / anchors.per_scale();
    a.anchor = best % anchors.per_scale();
    const GridSize& g = grids[std::size_t(a.scale)];
    a.col = std::clamp<Index>(Index(std::floor(gt.cx / g.stride)), 0, g.cols - 1);
    a.row = std::clamp<Index>(Index(std::floor(gt.cy / g.stride)), 0, g.rows - 1);
    a.target = gt;
    a.class_id = gt.class_id;
    out.push_back(a);
  }
  return out;
}

std::string format_detection(std::string_view image_id, const BoxD& box) {
  char buf[160];
  std::snprintf(buf, sizeof buf, " %d %.4f %.4f %.4f %.4f %.4f", box.class_id, box.score,
                box.x1(), box.y1(), box.x2(), box.y2());
  return std::string(image_id) + buf;
}

#define TCYOLO_INSTANTIATE_BOXGEOM(S)                                                         \
  template S iou<S>(const Box<S>&, const Box<S>&);                                            \
  template S giou<S>(const Box<S>&, const Box<S>&);                                           \
  template S diou<S>(const Box<S>&, const Box<S>&);                                           \
  template GiouLoss<S> giou_loss<S>(const Box<S>&, const Box<S>&);                            \
  template std::vector<std::size_t> diou_nms_indices<S>(std::span<const Box<S>>, S, S);       \
  template std::vector<Box<S>> diou_nms<S>(std::span<const Box<S>>, S, S);                    \
  template std::vector<Box<S>> decode_head<S>(const Tensor<S>&, std::span<const AnchorWH>, S, \
                                              int, Index);

TCYOLO_INSTANTIATE_BOXGEOM(double)
TCYOLO_INSTANTIATE_BOXGEOM(float)

}  // namespace tcyolo
