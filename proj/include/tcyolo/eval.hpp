#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tcyolo/boxgeom.hpp"

namespace tcyolo {

struct MatchResult {
  std::vector<bool> det_tp;  // per detection, input order
  std::vector<bool> gt_hit;  // per ground truth
};

/// Greedy by descending score (input order on ties). Each detection takes the
/// unmatched gt of highest IoU (lowest index on ties) and is a TP if that IoU
/// reaches tau.
MatchResult match_detections(std::span<const BoxD> dets, std::span<const BoxD> gts, double tau = 0.5);

struct RankedDetection {
  double score = 0;
  bool tp = false;
};

/// All-points AP: sum of precision at each TP times 1/gt_count, detections
/// ranked by score (stable). Empty when there are neither gts nor detections.
std::optional<double> average_precision(std::vector<RankedDetection> ranked, std::size_t gt_count);

struct PrPoint {
  double score, recall, precision;
};

/// One point per ranked detection.
std::vector<PrPoint> pr_curve(std::vector<RankedDetection> ranked, std::size_t gt_count);

struct ImageEval {
  std::string id;
  std::vector<BoxD> detections;
  std::vector<BoxD> ground_truth;
  std::vector<std::string> tags;
};

struct ScenarioRow {
  std::string tag;
  std::size_t images = 0;
  std::size_t count = 0;  // gts
  std::size_t correct = 0;
  std::size_t falsely = 0;  // unmatched detections
  std::size_t missed = 0;
  std::size_t detections = 0;

  // NaN when the base is zero
  double correct_rate() const;
  double missed_rate() const;
  double false_rate() const;            // over gt count
  double false_rate_of_dets() const;    // over detection count
};

/// One row per tag present, in vocabulary order. Unknown tags are a DataError.
std::vector<ScenarioRow> scenario_report(std::span<const ImageEval> images, double tau = 0.5);

struct EvalReport {
  double tau = 0.5;
  double report_score = 0;  // score floor for the scenario rows
  std::optional<double> ap;
  std::vector<PrPoint> curve;
  std::size_t images = 0, gt_count = 0, detections = 0, true_positives = 0;
  ScenarioRow overall;  // tag "all": every image, same score floor as rows
  std::vector<ScenarioRow> rows;
  double seconds = 0;  // inference time, filled in by the caller
  double images_per_second() const;
};

/// AP over all detections; scenario rows over those scoring >= report_score.
EvalReport evaluate(std::span<const ImageEval> images, double tau = 0.5, double report_score = 0.0);

std::string format_report(const EvalReport& report);
std::string format_report_csv(const EvalReport& report);
std::string format_pr_curve(const std::vector<PrPoint>& curve);

}  // namespace tcyolo
