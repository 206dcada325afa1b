#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmap/geometry.hpp"

namespace hdmap::eval {

struct ScoredInstance {
  MapInstance instance;
  double score = 0.0;
};

using ScenePredictions = std::vector<ScoredInstance>;

/// Chamfer thresholds (meters) of the two AP variants.
inline constexpr std::array<double, 3> kThresholdsAp1{0.2, 0.5, 1.0};
inline constexpr std::array<double, 3> kThresholdsAp2{0.5, 1.0, 1.5};

/// All-points interpolated AP from a ranked TP/FP sequence.
double average_precision(const std::vector<bool>& ranked_is_tp, std::size_t num_gt);

struct ApResult {
  double ap = 0.0;
  std::vector<double> per_threshold;
  /// False when the class has no ground truth anywhere (AP reported as 0).
  bool defined = true;
};

/// Both polylines are resampled to this many arc-length-uniform points
/// before the Chamfer distance, so the score compares curves rather than
/// where their vertices happen to sit.
inline constexpr std::size_t kCurveSamples = 100;

/// Ranks every class-`cls` prediction across scenes by descending score and
/// greedily assigns each to the closest still-unmatched ground truth in its
/// scene; the pair is a true positive when the Chamfer distance is below the
/// threshold. Returns the AP averaged over `thresholds`. `samples` = 0 uses
/// the raw points.
ApResult compute_class_ap(std::span<const ScenePredictions> preds, std::span<const MapScene> gts,
                          ClassId cls, std::span<const double> thresholds,
                          std::size_t samples = kCurveSamples);

struct MapScores {
  double map1 = 0.0;
  double map2 = 0.0;
};

/// Unweighted mean of per-class APs, for each threshold set.
MapScores compute_map(std::span<const double, kNumClasses> ap1, std::span<const double, kNumClasses> ap2);

/// layers[t] holds every predicted point of layer t (same order across
/// layers). Entry t of the result is mean |coord_{t+1} - coord_t| over all
/// points and both coordinates.
std::vector<double> query_stability_mae(std::span<const std::vector<Point2>> layers);

struct EvalReport {
  std::array<double, kNumClasses> ap1{};
  std::array<double, kNumClasses> ap2{};
  std::array<bool, kNumClasses> class_defined{true, true, true};
  double map1 = 0.0;
  double map2 = 0.0;
  std::size_t scenes = 0;
  std::size_t out_of_extent_points = 0;
  std::vector<double> stability_mae;
  /// Fraction of queries whose global-loss gradient norm exceeds 1e-12.
  std::optional<double> grad_coverage;
  std::string label;
  bool failed = false;
  std::string failure;
};

EvalReport evaluate(std::span<const ScenePredictions> preds, std::span<const MapScene> gts,
                    std::size_t samples = kCurveSamples);

nlohmann::json report_to_json(const EvalReport& report);
/// Columns: class,threshold_set,AP,mAP. APs scaled by 100.
std::string report_to_csv(const EvalReport& report);
/// Checks the fields and ranges a consumer relies on; returns problems found.
std::vector<std::string> validate_report_json(const nlohmann::json& doc);

nlohmann::json predictions_to_json(std::span<const ScenePredictions> preds, const Extent& extent);
std::vector<ScenePredictions> predictions_from_json(const nlohmann::json& doc);

}  // namespace hdmap::eval
