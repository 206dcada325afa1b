#include "hdmap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "hdmap/scene_io.hpp"

namespace hdmap::eval {

namespace {

// Zero-length polylines (all points equal) have no curve to resample.
std::vector<Point2> curve(const std::vector<Point2>& points, std::size_t samples) {
  if (samples < 2 || points.size() < 2 || polyline_length(points) <= 0.0) {
    return points;
  }
  return resample_polyline(points, samples);
}

}  // namespace

double average_precision(const std::vector<bool>& ranked_is_tp, std::size_t num_gt) {
  if (num_gt == 0) {
    return 0.0;
  }
  const std::size_t n = ranked_is_tp.size();
  std::vector<double> recall(n), precision(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += ranked_is_tp[k] ? 1 : 0;
    recall[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  // Precision envelope from the right, then area over recall steps.
  for (std::size_t k = n; k-- > 1;) {
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (recall[k] > prev_recall) {
      ap += (recall[k] - prev_recall) * precision[k];
      prev_recall = recall[k];
    }
  }
  return ap;
}

ApResult compute_class_ap(std::span<const ScenePredictions> preds, std::span<const MapScene> gts,
                          ClassId cls, std::span<const double> thresholds, std::size_t samples) {
  if (preds.size() != gts.size()) {
    throw MapError("compute_class_ap: prediction and ground-truth scene counts differ");
  }
  if (thresholds.empty() || !std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw MapError("compute_class_ap: thresholds must be non-empty and ascending");
  }

  struct Candidate {
    std::size_t scene;
    std::size_t index;
    double score;
  };
  std::vector<Candidate> ranked;
  std::vector<std::vector<std::size_t>> gt_of_class(gts.size());
  std::size_t num_gt = 0;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    for (std::size_t g = 0; g < gts[s].instances.size(); ++g) {
      if (gts[s].instances[g].class_id == cls) {
        gt_of_class[s].push_back(g);
        ++num_gt;
      }
    }
    for (std::size_t p = 0; p < preds[s].size(); ++p) {
      if (preds[s][p].instance.class_id == cls) {
        ranked.push_back({s, p, preds[s][p].score});
      }
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });

  std::vector<std::vector<std::vector<Point2>>> gt_curves(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) {
    for (std::size_t g : gt_of_class[s]) {
      gt_curves[s].push_back(curve(gts[s].instances[g].points, samples));
    }
  }
  // Distances are threshold independent.
  std::vector<std::vector<double>> dist(ranked.size());
  for (std::size_t k = 0; k < ranked.size(); ++k) {
    const Candidate& c = ranked[k];
    const std::vector<Point2> pred = curve(preds[c.scene][c.index].instance.points, samples);
    for (const auto& g : gt_curves[c.scene]) {
      dist[k].push_back(chamfer_distance(pred, g));
    }
  }

  ApResult result;
  result.defined = num_gt > 0;
  for (double thr : thresholds) {
    std::vector<std::vector<bool>> taken(gts.size());
    for (std::size_t s = 0; s < gts.size(); ++s) {
      taken[s].assign(gt_of_class[s].size(), false);
    }
    std::vector<bool> is_tp(ranked.size(), false);
    for (std::size_t k = 0; k < ranked.size(); ++k) {
      auto& used = taken[ranked[k].scene];
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_g = used.size();
      for (std::size_t g = 0; g < used.size(); ++g) {
        if (!used[g] && dist[k][g] < best) {
          best = dist[k][g];
          best_g = g;
        }
      }
      if (best_g < used.size() && best < thr) {
        used[best_g] = true;
        is_tp[k] = true;
      }
    }
    result.per_threshold.push_back(average_precision(is_tp, num_gt));
  }
  result.ap = std::accumulate(result.per_threshold.begin(), result.per_threshold.end(), 0.0) /
              static_cast<double>(result.per_threshold.size());
  return result;
}

MapScores compute_map(std::span<const double, kNumClasses> ap1, std::span<const double, kNumClasses> ap2) {
  MapScores s;
  for (int c = 0; c < kNumClasses; ++c) {
    s.map1 += ap1[c];
    s.map2 += ap2[c];
  }
  s.map1 /= kNumClasses;
  s.map2 /= kNumClasses;
  return s;
}

std::vector<double> query_stability_mae(std::span<const std::vector<Point2>> layers) {
  if (layers.size() < 2) {
    throw MapError("query_stability_mae: need at least two layers");
  }
  std::vector<double> out;
  for (std::size_t t = 0; t + 1 < layers.size(); ++t) {
    const auto& a = layers[t];
    const auto& b = layers[t + 1];
    if (a.size() != b.size() || a.empty()) {
      throw MapError("query_stability_mae: layers differ in point count");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      total += std::fabs(b[i].x - a[i].x) + std::fabs(b[i].y - a[i].y);
    }
    out.push_back(total / (2.0 * static_cast<double>(a.size())));
  }
  return out;
}

EvalReport evaluate(std::span<const ScenePredictions> preds, std::span<const MapScene> gts,
                    std::size_t samples) {
  EvalReport report;
  report.scenes = gts.size();
  for (int c = 0; c < kNumClasses; ++c) {
    const auto cls = static_cast<ClassId>(c);
    ApResult r1 = compute_class_ap(preds, gts, cls, kThresholdsAp1, samples);
    ApResult r2 = compute_class_ap(preds, gts, cls, kThresholdsAp2, samples);
    report.ap1[c] = r1.ap;
    report.ap2[c] = r2.ap;
    report.class_defined[c] = r1.defined;
  }
  MapScores m = compute_map(report.ap1, report.ap2);
  report.map1 = m.map1;
  report.map2 = m.map2;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const ScoredInstance& p : preds[s]) {
      for (const Point2& pt : p.instance.points) {
        report.out_of_extent_points += gts[s].extent.contains(pt) ? 0 : 1;
      }
    }
  }
  return report;
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json classes = nlohmann::json::array();
  for (int c = 0; c < kNumClasses; ++c) {
    classes.push_back({{"class", class_name(static_cast<ClassId>(c))},
                       {"ap1", report.ap1[c]},
                       {"ap2", report.ap2[c]},
                       {"defined", report.class_defined[c]}});
  }
  nlohmann::json doc = {{"label", report.label},
                        {"scenes", report.scenes},
                        {"classes", classes},
                        {"map1", report.map1},
                        {"map2", report.map2},
                        {"thresholds_ap1", kThresholdsAp1},
                        {"thresholds_ap2", kThresholdsAp2},
                        {"out_of_extent_points", report.out_of_extent_points},
                        {"stability_mae", report.stability_mae},
                        {"failed", report.failed}};
  if (report.grad_coverage) {
    doc["grad_coverage"] = *report.grad_coverage;
  }
  if (report.failed) {
    doc["failure"] = report.failure;
  }
  return doc;
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "class,threshold_set,AP,mAP\n";
  for (int set = 0; set < 2; ++set) {
    const auto& aps = set == 0 ? report.ap1 : report.ap2;
    const double map = set == 0 ? report.map1 : report.map2;
    for (int c = 0; c < kNumClasses; ++c) {
      os << class_name(static_cast<ClassId>(c)) << "," << (set == 0 ? "AP1" : "AP2") << ","
         << 100.0 * aps[c] << "," << 100.0 * map << "\n";
    }
  }
  return os.str();
}

std::vector<std::string> validate_report_json(const nlohmann::json& doc) {
  std::vector<std::string> problems;
  auto in_unit = [](const nlohmann::json& v) {
    return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0;
  };
  for (const char* key : {"map1", "map2"}) {
    if (!doc.contains(key) || !in_unit(doc[key])) {
      problems.push_back(std::string(key) + " missing or outside [0,1]");
    }
  }
  if (!doc.contains("classes") || !doc["classes"].is_array() || doc["classes"].size() != kNumClasses) {
    problems.push_back("classes must list exactly three entries");
  } else {
    double s1 = 0.0, s2 = 0.0;
    for (const auto& c : doc["classes"]) {
      if (!c.contains("class") || !c["class"].is_string()) problems.push_back("class name missing");
      if (!c.contains("ap1") || !in_unit(c["ap1"])) problems.push_back("ap1 outside [0,1]");
      if (!c.contains("ap2") || !in_unit(c["ap2"])) problems.push_back("ap2 outside [0,1]");
      if (problems.empty()) {
        s1 += c["ap1"].get<double>();
        s2 += c["ap2"].get<double>();
      }
    }
    if (problems.empty() && (std::fabs(s1 / 3.0 - doc["map1"].get<double>()) > 1e-12 ||
                             std::fabs(s2 / 3.0 - doc["map2"].get<double>()) > 1e-12)) {
      problems.push_back("mAP is not the mean of the class APs");
    }
  }
  if (!doc.contains("scenes") || !doc["scenes"].is_number_unsigned()) {
    problems.push_back("scenes count missing");
  }
  if (!doc.contains("stability_mae") || !doc["stability_mae"].is_array()) {
    problems.push_back("stability_mae missing");
  }
  if (doc.contains("grad_coverage") && !in_unit(doc["grad_coverage"])) {
    problems.push_back("grad_coverage outside [0,1]");
  }
  return problems;
}

nlohmann::json predictions_to_json(std::span<const ScenePredictions> preds, const Extent& extent) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const ScenePredictions& sp : preds) {
    MapScene tmp;
    tmp.extent = extent;
    for (const ScoredInstance& s : sp) {
      tmp.instances.push_back(s.instance);
    }
    nlohmann::json doc = scene_to_json(tmp);
    for (std::size_t i = 0; i < sp.size(); ++i) {
      doc["instances"][i]["score"] = sp[i].score;
    }
    scenes.push_back(doc);
  }
  return {{"scenes", scenes}};
}

std::vector<ScenePredictions> predictions_from_json(const nlohmann::json& doc) {
  std::vector<ScenePredictions> out;
  try {
    for (const auto& scene_doc : doc.at("scenes")) {
      MapScene scene = scene_from_json(scene_doc);
      ScenePredictions sp;
      for (std::size_t i = 0; i < scene.instances.size(); ++i) {
        sp.push_back({scene.instances[i], scene_doc.at("instances")[i].at("score").get<double>()});
      }
      out.push_back(std::move(sp));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("predictions JSON: ") + e.what());
  }
  return out;
}

}  // namespace hdmap::eval
