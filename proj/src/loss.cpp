#include "tcyolo/loss.hpp"

#include <algorithm>
#include <cmath>

namespace tcyolo {

namespace {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

// Numerically stable binary cross-entropy on a logit.
template <typename Scalar>
Scalar bce_logit(Scalar x, Scalar target) {
  return std::max(x, Scalar(0)) - x * target + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

template <typename Scalar>
std::vector<GridSize> head_grids(std::span<const Var<Scalar>> heads, std::span<const double> strides) {
  if (heads.size() != strides.size()) throw ConfigError("head_grids: one stride per head required");
  std::vector<GridSize> grids;
  for (std::size_t s = 0; s < heads.size(); ++s)
    grids.push_back({heads[s].dim(2), heads[s].dim(3), strides[s]});
  return grids;
}

template <typename Scalar>
LossResult<Scalar> total_loss(std::span<const Var<Scalar>> heads, std::span<const double> strides,
                              const AnchorSet& anchors, std::span<const Assignment> assignments,
                              int num_classes, const LossWeights& weights) {
  if (heads.size() != std::size_t(AnchorSet::kScales) || strides.size() != heads.size())
    throw ConfigError("total_loss: expected three heads with strides");
  const Index na = anchors.per_scale();
  const Index fields = 5 + num_classes;
  const Index batch = heads[0].dim(0);
  for (const auto& h : heads) {
    require_nchw(h.value(), "total_loss head");
    if (h.dim(1) != na * fields)
      throw DimensionError("total_loss: head has " + std::to_string(h.dim(1)) + " channels, expected " +
                           std::to_string(na * fields));
    if (h.dim(0) != batch) throw DimensionError("total_loss: heads disagree on batch size");
  }

  std::vector<Tensor<Scalar>> grads;
  for (const auto& h : heads) grads.emplace_back(h.shape());
  LossBreakdown parts;
  const Scalar n_scale = Scalar(batch);

  // Objectness targets: 1 at assigned cells, 0 elsewhere.
  std::vector<Tensor<Scalar>> obj_target;
  for (const auto& h : heads) obj_target.emplace_back(Shape{batch, na, h.dim(2), h.dim(3)});
  for (const auto& a : assignments) {
    if (a.scale < 0 || a.scale >= AnchorSet::kScales || a.anchor < 0 || a.anchor >= na)
      throw DimensionError("total_loss: assignment scale/anchor out of range");
    const auto& t = obj_target[std::size_t(a.scale)];
    if (a.image < 0 || a.image >= batch || a.row < 0 || a.row >= t.dim(2) || a.col < 0 ||
        a.col >= t.dim(3))
      throw DimensionError("total_loss: assignment outside head grid");
    obj_target[std::size_t(a.scale)].at(a.image, a.anchor, a.row, a.col) = Scalar(a.objectness);
  }

  for (std::size_t s = 0; s < heads.size(); ++s) {
    const Tensor<Scalar>& raw = heads[s].value();
    const Index gh = raw.dim(2), gw = raw.dim(3);
    const Scalar count = Scalar(batch * na * gh * gw);
    Scalar acc = 0;
    for (Index n = 0; n < batch; ++n)
      for (Index a = 0; a < na; ++a)
        for (Index i = 0; i < gh; ++i)
          for (Index j = 0; j < gw; ++j) {
            const Scalar x = raw.at(n, a * fields + 4, i, j);
            const Scalar t = obj_target[s].at(n, a, i, j);
            acc += bce_logit(x, t);
            grads[s].at(n, a * fields + 4, i, j) +=
                n_scale * Scalar(weights.obj) * (sigmoid(x) - t) / count;
          }
    parts.obj += double(acc / count);
  }

  parts.positives = Index(assignments.size());
  if (!assignments.empty()) {
    const Scalar p = Scalar(assignments.size());
    const Scalar clamp = Scalar(kMaxLogScale);
    Scalar box_acc = 0, cls_acc = 0;
    for (const auto& asg : assignments) {
      const std::size_t s = std::size_t(asg.scale);
      const Tensor<Scalar>& raw = heads[s].value();
      const Scalar stride = Scalar(strides[s]);
      const AnchorWH& anchor = anchors.scale(asg.scale)[std::size_t(asg.anchor)];
      const Index base = asg.anchor * fields;
      auto logit = [&](Index f) { return raw.at(asg.image, base + f, asg.row, asg.col); };
      auto grad = [&](Index f) -> Scalar& { return grads[s].at(asg.image, base + f, asg.row, asg.col); };

      const Scalar sx = sigmoid(logit(0)), sy = sigmoid(logit(1));
      const Scalar tw = logit(2), th = logit(3);
      const Scalar ew = std::exp(std::clamp(tw, -clamp, clamp));
      const Scalar eh = std::exp(std::clamp(th, -clamp, clamp));
      Box<Scalar> pred{(sx + Scalar(asg.col)) * stride, (sy + Scalar(asg.row)) * stride,
                       Scalar(anchor.w) * ew, Scalar(anchor.h) * eh};
      Box<Scalar> target{Scalar(asg.target.cx), Scalar(asg.target.cy), Scalar(asg.target.w),
                         Scalar(asg.target.h)};
      const GiouLoss<Scalar> gl = giou_loss(pred, target);
      box_acc += gl.loss;
      const Scalar kb = n_scale * Scalar(weights.box) / p;
      grad(0) += kb * gl.grad[0] * stride * sx * (Scalar(1) - sx);
      grad(1) += kb * gl.grad[1] * stride * sy * (Scalar(1) - sy);
      if (std::abs(tw) < clamp) grad(2) += kb * gl.grad[2] * pred.w;
      if (std::abs(th) < clamp) grad(3) += kb * gl.grad[3] * pred.h;

      const Scalar kc = n_scale * Scalar(weights.cls) / (p * Scalar(num_classes));
      for (int c = 0; c < num_classes; ++c) {
        const Scalar x = logit(5 + c);
        const Scalar t = c == asg.class_id ? Scalar(1) : Scalar(0);
        cls_acc += bce_logit(x, t);
        grad(5 + c) += kc * (sigmoid(x) - t);
      }
    }
    parts.box = double(box_acc / p);
    parts.cls = double(cls_acc / (p * Scalar(num_classes)));
  }
  parts.total = double(batch) * (weights.box * parts.box + weights.obj * parts.obj +
                                 weights.cls * parts.cls);

  std::vector<Var<Scalar>> inputs(heads.begin(), heads.end());
  Var<Scalar> total = heads[0].tape().record(
      "total_loss", Tensor<Scalar>::scalar(Scalar(parts.total)), inputs,
      [inputs, grads = std::move(grads)](Tape<Scalar>& tape, const Tensor<Scalar>& go) {
        for (std::size_t s = 0; s < inputs.size(); ++s)
          tape.accumulate(inputs[s], Tensor<Scalar>(grads[s].shape(),
                                                    typename Tensor<Scalar>::Array(
                                                        grads[s].values() * go[0])));
      });
  return {total, parts};
}

template std::vector<GridSize> head_grids<double>(std::span<const Var<double>>, std::span<const double>);
template std::vector<GridSize> head_grids<float>(std::span<const Var<float>>, std::span<const double>);
template LossResult<double> total_loss<double>(std::span<const Var<double>>, std::span<const double>,
                                               const AnchorSet&, std::span<const Assignment>, int,
                                               const LossWeights&);
template LossResult<float> total_loss<float>(std::span<const Var<float>>, std::span<const double>,
                                             const AnchorSet&, std::span<const Assignment>, int,
                                             const LossWeights&);

}  // namespace tcyolo
