#include "tcyolo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "tcyolo/data.hpp"

namespace tcyolo {

MatchResult match_detections(std::span<const BoxD> dets, std::span<const BoxD> gts, double tau) {
  MatchResult out{std::vector<bool>(dets.size(), false), std::vector<bool>(gts.size(), false)};
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  for (std::size_t d : order) {
    double best = -1;
    std::size_t g_best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (out.gt_hit[g]) continue;
      const double v = iou(dets[d], gts[g]);
      if (v > best) {
        best = v;
        g_best = g;
      }
    }
    if (g_best < gts.size() && best >= tau) {
      out.det_tp[d] = true;
      out.gt_hit[g_best] = true;
    }
  }
  return out;
}

namespace {

void rank(std::vector<RankedDetection>& ranked) {
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedDetection& a, const RankedDetection& b) { return a.score > b.score; });
}

double ratio(std::size_t a, std::size_t b) {
  return b ? double(a) / double(b) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

std::optional<double> average_precision(std::vector<RankedDetection> ranked, std::size_t gt_count) {
  if (gt_count == 0) return ranked.empty() ? std::nullopt : std::optional<double>(0.0);
  rank(ranked);
  double ap = 0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    if (!ranked[k].tp) continue;
    ++tp;
    ap += double(tp) / double(k + 1) / double(gt_count);
  }
  return std::min(ap, 1.0);
}

std::vector<PrPoint> pr_curve(std::vector<RankedDetection> ranked, std::size_t gt_count) {
  rank(ranked);
  std::vector<PrPoint> curve;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    tp += ranked[k].tp;
    curve.push_back({ranked[k].score, gt_count ? double(tp) / double(gt_count) : 0.0, double(tp) / double(k + 1)});
  }
  return curve;
}

double ScenarioRow::correct_rate() const { return ratio(correct, count); }
double ScenarioRow::missed_rate() const { return ratio(missed, count); }
double ScenarioRow::false_rate() const { return ratio(falsely, count); }
double ScenarioRow::false_rate_of_dets() const { return ratio(falsely, detections); }

namespace {

void add_image(ScenarioRow& r, const ImageEval& im, const MatchResult& m) {
  const auto hit = std::size_t(std::count(m.gt_hit.begin(), m.gt_hit.end(), true));
  const auto tp = std::size_t(std::count(m.det_tp.begin(), m.det_tp.end(), true));
  ++r.images;
  r.count += im.ground_truth.size();
  r.correct += hit;
  r.missed += im.ground_truth.size() - hit;
  r.detections += im.detections.size();
  r.falsely += im.detections.size() - tp;
}

}  // namespace

std::vector<ScenarioRow> scenario_report(std::span<const ImageEval> images, double tau) {
  std::map<std::string, ScenarioRow> rows;
  for (const auto& im : images) {
    for (const auto& t : im.tags)
      if (!is_scenario_tag(t)) throw DataError("image '" + im.id + "': unknown scenario tag '" + t + "'");
    if (im.tags.empty()) continue;
    const auto m = match_detections(im.detections, im.ground_truth, tau);
    // a tag listed twice on one image still counts once
    std::vector<std::string> tags = im.tags;
    std::sort(tags.begin(), tags.end());
    tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
    for (const auto& t : tags) {
      rows[t].tag = t;
      add_image(rows[t], im, m);
    }
  }
  std::vector<ScenarioRow> out;
  for (const auto& t : scenario_vocabulary())
    if (auto it = rows.find(t); it != rows.end()) out.push_back(it->second);
  return out;
}

double EvalReport::images_per_second() const { return seconds > 0 ? double(images) / seconds : 0.0; }

EvalReport evaluate(std::span<const ImageEval> images, double tau, double report_score) {
  EvalReport rep;
  rep.tau = tau;
  rep.report_score = report_score;
  rep.images = images.size();
  std::vector<RankedDetection> ranked;
  for (const auto& im : images) {
    const auto m = match_detections(im.detections, im.ground_truth, tau);
    rep.gt_count += im.ground_truth.size();
    rep.detections += im.detections.size();
    for (std::size_t d = 0; d < im.detections.size(); ++d) {
      ranked.push_back({im.detections[d].score, m.det_tp[d]});
      rep.true_positives += m.det_tp[d];
    }
  }
  rep.ap = average_precision(ranked, rep.gt_count);
  rep.curve = pr_curve(std::move(ranked), rep.gt_count);
  std::vector<ImageEval> kept(images.begin(), images.end());
  for (auto& im : kept) std::erase_if(im.detections, [&](const BoxD& b) { return b.score < report_score; });
  rep.rows = scenario_report(kept, tau);
  rep.overall.tag = "all";
  for (const auto& im : kept) add_image(rep.overall, im, match_detections(im.detections, im.ground_truth, tau));
  return rep;
}

namespace {

std::string percent(double v) {
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100 * v);
  return buf;
}

std::string number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_report(const EvalReport& r) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "images %zu  gts %zu  detections %zu  tp %zu\n", r.images, r.gt_count, r.detections,
                r.true_positives);
  out += buf;
  std::snprintf(buf, sizeof buf, "AP@%.2f %s\n", r.tau, r.ap ? number(*r.ap).c_str() : "n/a");
  out += buf;
  if (r.seconds > 0) {
    std::snprintf(buf, sizeof buf, "inference %.3f s  %.2f images/s\n", r.seconds, r.images_per_second());
    out += buf;
  }
  if (r.rows.empty()) return out;
  std::snprintf(buf, sizeof buf, "\nscenarios (detections with score >= %.3g)\n", r.report_score);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-20s %6s %6s %8s %9s %8s %9s %9s %8s %9s\n", "scenario", "images", "count",
                "correct", "rate", "false", "rate/gt", "rate/det", "missed", "rate");
  out += buf;
  std::vector<const ScenarioRow*> all{&r.overall};
  for (const auto& row : r.rows) all.push_back(&row);
  for (const auto* rp : all) {
    const auto& row = *rp;
    std::snprintf(buf, sizeof buf, "%-20s %6zu %6zu %8zu %9s %8zu %9s %9s %8zu %9s\n", row.tag.c_str(), row.images,
                  row.count, row.correct, percent(row.correct_rate()).c_str(), row.falsely,
                  percent(row.false_rate()).c_str(), percent(row.false_rate_of_dets()).c_str(), row.missed,
                  percent(row.missed_rate()).c_str());
    out += buf;
  }
  return out;
}

std::string format_report_csv(const EvalReport& r) {
  std::string out = "scenario,images,count,correct,correct_rate,false,false_rate_gt,false_rate_det,missed,missed_rate\n";
  auto line = [&](const ScenarioRow& row) {
    out += row.tag + "," + std::to_string(row.images) + "," + std::to_string(row.count) + "," +
           std::to_string(row.correct) + "," + number(row.correct_rate()) + "," + std::to_string(row.falsely) + "," +
           number(row.false_rate()) + "," + number(row.false_rate_of_dets()) + "," + std::to_string(row.missed) +
           "," + number(row.missed_rate()) + "\n";
  };
  line(r.overall);
  for (const auto& row : r.rows) line(row);
  return out;
}

std::string format_pr_curve(const std::vector<PrPoint>& curve) {
  std::string out = "recall,precision,score\n";
  for (const auto& p : curve) out += number(p.recall) + "," + number(p.precision) + "," + number(p.score) + "\n";
  return out;
}

}  // namespace tcyolo
