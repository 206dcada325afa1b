#include "hdmap/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numbers>
#include <sstream>

#include "hdmap/scene_io.hpp"

namespace hdmap::experiment {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Training scene seeds carry the top bit; held-out seeds never do.
constexpr std::uint64_t kTrainBit = 1ULL << 63;

std::string fmt(double v) {
  if (std::isnan(v)) {
    return "";
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kGrl: return "grl";
    case Variant::kGrlGrg: return "grl_grg";
  }
  return "unknown";
}

DecoderConfig variant_config(const DecoderConfig& base, Variant v) {
  DecoderConfig cfg = base;
  cfg.grl_enabled = v != Variant::kBaseline;
  cfg.grg_enabled = v == Variant::kGrlGrg;
  if (v == Variant::kBaseline) {
    cfg.lambda_global = 0.0;
  }
  return cfg;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) {
    throw MapError("experiment: need at least one seed");
  }
  if (steps == 0 || batch_size == 0) {
    throw MapError("experiment: steps and batch_size must be >= 1");
  }
  if (!(optim.lr > 0.0) || lr_floor < 0.0 || lr_floor > 1.0 || warmup_steps >= steps) {
    throw MapError("experiment: need lr > 0, lr_floor in [0,1] and warmup_steps < steps");
  }
  if (eval_scenes == 0) {
    throw MapError("experiment: eval_scenes must be >= 1");
  }
  if (gen.max_instances >= decoder.num_queries) {
    throw MapError("experiment: max_instances must stay below num_queries");
  }
  if (gen.points_per_instance != decoder.points_per_instance) {
    throw MapError("experiment: generator and decoder disagree on points per instance");
  }
  if (feature_channel_count(features) != decoder.feature_channels ||
      features.rows != decoder.feature_rows || features.cols != decoder.feature_cols) {
    throw MapError("experiment: feature grid does not match the decoder config");
  }
  decoder.validate();
}

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::json doc = decoder::config_to_json(cfg.decoder);
  doc["seeds"] = cfg.seeds;
  doc["steps"] = cfg.steps;
  doc["batch_size"] = cfg.batch_size;
  doc["eval_every"] = cfg.eval_every;
  doc["eval_scenes"] = cfg.eval_scenes;
  doc["eval_seed_base"] = cfg.eval_seed_base;
  doc["lr"] = cfg.optim.lr;
  doc["cosine_schedule"] = cfg.cosine_schedule;
  doc["lr_floor"] = cfg.lr_floor;
  doc["warmup_steps"] = cfg.warmup_steps;
  doc["weight_decay"] = cfg.optim.weight_decay;
  doc["max_grad_norm"] = cfg.optim.max_grad_norm;
  doc["noise"] = cfg.features.noise;
  doc["blur"] = cfg.features.blur;
  doc["feature_gain"] = cfg.features.gain;
  doc["feature_thickness"] = cfg.features.thickness;
  doc["frequencies"] = cfg.features.frequencies;
  doc["min_instances"] = cfg.gen.min_instances;
  doc["max_instances"] = cfg.gen.max_instances;
  doc["max_bend"] = cfg.gen.max_bend;
  doc["class_mix"] = cfg.gen.class_mix;
  doc["score"] = "max_foreground_softmax";
  if (!cfg.output_dir.empty()) {
    doc["output_dir"] = cfg.output_dir;
  }
  return doc;
}

ExperimentConfig experiment_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw MapError("experiment config: expected a JSON object");
  }
  const nlohmann::json known = experiment_to_json(ExperimentConfig{});
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key) && key != "output_dir") {
      throw MapError("experiment config: unknown key '" + key + "'");
    }
  }
  ExperimentConfig cfg;
  decoder::config_from_json(doc, cfg.decoder);
  try {
    auto take = [&](const char* key, auto& field) {
      if (doc.contains(key)) doc.at(key).get_to(field);
    };
    take("seeds", cfg.seeds);
    take("steps", cfg.steps);
    take("batch_size", cfg.batch_size);
    take("eval_every", cfg.eval_every);
    take("eval_scenes", cfg.eval_scenes);
    take("eval_seed_base", cfg.eval_seed_base);
    take("lr", cfg.optim.lr);
    take("cosine_schedule", cfg.cosine_schedule);
    take("lr_floor", cfg.lr_floor);
    take("warmup_steps", cfg.warmup_steps);
    take("weight_decay", cfg.optim.weight_decay);
    take("max_grad_norm", cfg.optim.max_grad_norm);
    take("noise", cfg.features.noise);
    take("blur", cfg.features.blur);
    take("feature_gain", cfg.features.gain);
    take("feature_thickness", cfg.features.thickness);
    take("frequencies", cfg.features.frequencies);
    take("min_instances", cfg.gen.min_instances);
    take("max_instances", cfg.gen.max_instances);
    take("max_bend", cfg.gen.max_bend);
    take("class_mix", cfg.gen.class_mix);
    take("output_dir", cfg.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("experiment config: ") + e.what());
  }
  cfg.gen.extent = cfg.decoder.extent;
  cfg.gen.points_per_instance = cfg.decoder.points_per_instance;
  cfg.features.rows = cfg.decoder.feature_rows;
  cfg.features.cols = cfg.decoder.feature_cols;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment(const std::string& path) {
  return experiment_from_json(read_json_file(path));
}

double scheduled_lr(const ExperimentConfig& cfg, std::size_t step) {
  const double base = cfg.optim.lr;
  if (step < cfg.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (!cfg.cosine_schedule) {
    return base;
  }
  const double span = static_cast<double>(std::max<std::size_t>(cfg.steps - cfg.warmup_steps, 1));
  const double t = static_cast<double>(step - cfg.warmup_steps) / span;
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return base * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
}

TrainItem make_item(std::uint64_t scene_seed, const ExperimentConfig& cfg) {
  TrainItem item;
  item.scene = generate_synthetic_scene(scene_seed, cfg.gen);
  item.features = synthesize_bev_features(item.scene, cfg.features, splitmix(scene_seed ^ 0xfeedULL));
  const BevGrid grid(cfg.decoder.map_rows, cfg.decoder.map_cols, cfg.decoder.extent);
  item.target = rasterize_scene(item.scene, grid, cfg.decoder.raster);
  return item;
}

std::vector<std::uint64_t> training_scene_seeds(std::uint64_t run_seed, std::size_t step,
                                                std::size_t batch_size) {
  std::vector<std::uint64_t> out(batch_size);
  const std::uint64_t stream = splitmix(run_seed ^ 0x5ce7e5ULL);
  for (std::size_t b = 0; b < batch_size; ++b) {
    out[b] = splitmix(stream + step * batch_size + b) | kTrainBit;
  }
  return out;
}

std::vector<TrainItem> held_out_set(const ExperimentConfig& cfg) {
  std::vector<TrainItem> items;
  items.reserve(cfg.eval_scenes);
  for (std::size_t i = 0; i < cfg.eval_scenes; ++i) {
    items.push_back(make_item((cfg.eval_seed_base + i) & ~kTrainBit, cfg));
  }
  return items;
}

eval::ScenePredictions extract_predictions(const DecoderModel& model,
                                           const decoder::LayerOutput& layer) {
  const DecoderConfig& cfg = model.config();
  const std::size_t n = cfg.num_queries;
  const std::size_t l = cfg.points_per_instance;
  const std::size_t k = static_cast<std::size_t>(kNumClasses) + 1;
  auto logits = layer.class_logits.values();
  auto pts = layer.points.values();
  eval::ScenePredictions out;
  out.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* row = logits.data() + j * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    std::size_t best = 0;
    for (std::size_t c = 1; c < static_cast<std::size_t>(kNumClasses); ++c) {
      if (row[c] > row[best]) best = c;
    }
    eval::ScoredInstance s;
    s.score = std::exp(row[best] - mx) / z;
    s.instance.class_id = static_cast<ClassId>(best);
    s.instance.points.resize(l);
    for (std::size_t p = 0; p < l; ++p) {
      s.instance.points[p] = {pts[(j * l + p) * 2], pts[(j * l + p) * 2 + 1]};
    }
    out.push_back(std::move(s));
  }
  return out;
}

eval::EvalReport evaluate_model(const DecoderModel& model, const std::vector<TrainItem>& items,
                                std::vector<eval::ScenePredictions>* preds_out) {
  std::vector<eval::ScenePredictions> preds;
  std::vector<MapScene> gts;
  std::vector<double> stability;
  for (const TrainItem& item : items) {
    decoder::DecoderOutput out = decoder::decoder_forward(model, item.features);
    preds.push_back(extract_predictions(model, out.layers.back()));
    gts.push_back(item.scene);
    if (out.layers.size() >= 2) {
      std::vector<std::vector<Point2>> per_layer;
      for (const auto& lo : out.layers) {
        auto v = lo.points.values();
        std::vector<Point2> pts(v.size() / 2);
        for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {v[2 * i], v[2 * i + 1]};
        per_layer.push_back(std::move(pts));
      }
      auto mae = eval::query_stability_mae(per_layer);
      if (stability.empty()) stability.assign(mae.size(), 0.0);
      for (std::size_t t = 0; t < mae.size(); ++t) stability[t] += mae[t];
    }
  }
  eval::EvalReport report = eval::evaluate(preds, gts);
  for (double& s : stability) s /= static_cast<double>(items.size());
  report.stability_mae = std::move(stability);
  if (preds_out != nullptr) {
    *preds_out = std::move(preds);
  }
  return report;
}

std::vector<AuditRow> gradient_flow_audit(const DecoderModel& model, const TrainItem& item) {
  const DecoderConfig& cfg = model.config();
  const std::size_t n = cfg.num_queries;
  const std::size_t r = cfg.rows_per_instance();
  const std::size_t cq = cfg.query_width;
  decoder::DecoderOutput out = decoder::decoder_forward(model, item.features);
  const decoder::LayerOutput& lo = out.layers.front();

  auto per_query_norms = [&](const ad::Tensor& loss) {
    ad::backward(loss);
    std::vector<double> g = lo.queries.grad();
    std::vector<double> norms(n, 0.0);
    for (std::size_t q = 0; q < n; ++q) {
      double s = 0.0;
      for (std::size_t i = q * r * cq; i < (q + 1) * r * cq; ++i) s += g[i] * g[i];
      norms[q] = std::sqrt(s);
    }
    return norms;
  };

  ad::Tensor global_logits = lo.global_logits.defined() ? lo.global_logits
                                                        : model.grl(0)(lo.instance_queries);
  std::vector<double> g_norms = per_query_norms(grl::global_loss(global_logits, item.target));

  const MatchResult match = decoder::hungarian_match(lo, item.scene, cfg);
  std::vector<double> d_norms = per_query_norms(decoder::detection_loss(lo, item.scene, match, cfg).total);

  std::vector<AuditRow> rows(n);
  for (std::size_t q = 0; q < n; ++q) {
    rows[q].query = q;
    rows[q].global_norm = g_norms[q];
    rows[q].detection_norm = d_norms[q];
  }
  for (std::size_t j : match.assignment) rows[j].matched = true;
  return rows;
}

std::string audit_to_csv(const std::vector<AuditRow>& rows) {
  std::ostringstream os;
  os << "query,matched,global_grad_norm,detection_grad_norm\n";
  for (const AuditRow& r : rows) {
    os << r.query << "," << (r.matched ? 1 : 0) << "," << fmt(r.global_norm) << ","
       << fmt(r.detection_norm) << "\n";
  }
  return os.str();
}

double grad_coverage(const std::vector<AuditRow>& rows) {
  if (rows.empty()) return 0.0;
  const auto hit = std::count_if(rows.begin(), rows.end(),
                                 [](const AuditRow& r) { return r.global_norm > 1e-12; });
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

RunResult train_and_evaluate(const ExperimentConfig& cfg, const DecoderConfig& decoder_cfg,
                             std::uint64_t seed, const std::vector<TrainItem>& held_out,
                             const std::string& label, const Logger& log, bool keep_checkpoint) {
  DecoderConfig dc = decoder_cfg;
  dc.seed = splitmix(seed ^ 0x0de1ULL);
  DecoderModel model(dc);
  ad::Adam adam(cfg.optim);

  RunResult result;
  result.seed = seed;
  result.label = label;
  std::ostringstream loss_csv, curve;
  loss_csv << "step,layer,L_global,L_det,total\n";
  curve << "step,mAP1,mAP2\n";

  bool failed = false;
  std::string failure;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<TrainItem> batch;
    for (std::uint64_t s : training_scene_seeds(seed, step, cfg.batch_size)) {
      batch.push_back(make_item(s, cfg));
    }
    adam.config().lr = scheduled_lr(cfg, step);
    decoder::LossBreakdown lb;
    try {
      lb = decoder::train_step(model, adam, batch);
    } catch (const MapError& e) {
      failed = true;
      failure = "step " + std::to_string(step) + ": " + e.what();
      if (log) log(label + " failed: " + failure);
      break;
    }
    for (std::size_t k = 0; k < dc.layers; ++k) {
      loss_csv << step << "," << k << "," << fmt(lb.global_per_layer[k]) << ","
               << fmt(lb.detection_per_layer[k]) << "," << fmt(lb.total) << "\n";
    }
    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps) {
      eval::EvalReport r = evaluate_model(model, held_out);
      curve << step + 1 << "," << fmt(r.map1) << "," << fmt(r.map2) << "\n";
    }
    if (log && (step + 1) % 100 == 0) {
      log(label + " step " + std::to_string(step + 1) + " loss " + fmt(lb.total));
    }
  }

  if (failed) {
    result.report.failed = true;
    result.report.failure = failure;
    result.report.scenes = held_out.size();
  } else {
    std::vector<eval::ScenePredictions> preds;
    result.report = evaluate_model(model, held_out, &preds);
    result.predictions = eval::predictions_to_json(preds, dc.extent);
    if (dc.grl_enabled && !held_out.empty()) {
      result.report.grad_coverage = grad_coverage(gradient_flow_audit(model, held_out.front()));
    }
    if (cfg.eval_every > 0) {
      curve << cfg.steps << "," << fmt(result.report.map1) << "," << fmt(result.report.map2) << "\n";
    }
  }
  result.report.label = label;
  result.loss_csv = loss_csv.str();
  if (cfg.eval_every > 0) {
    result.eval_curve_csv = curve.str();
  }
  if (keep_checkpoint) {
    result.checkpoint = model.params().to_json();
  }
  return result;
}

void write_run(const RunResult& run, const std::string& dir) {
  const std::filesystem::path base(dir);
  write_text_file(base / "loss.csv", run.loss_csv);
  write_text_file(base / "report.json", eval::report_to_json(run.report).dump(2) + "\n");
  write_text_file(base / "report.csv", eval::report_to_csv(run.report));
  if (!run.eval_curve_csv.empty()) {
    write_text_file(base / "eval_curve.csv", run.eval_curve_csv);
  }
  if (!run.predictions.is_null()) {
    write_text_file(base / "predictions.json", run.predictions.dump() + "\n");
  }
  if (!run.checkpoint.is_null()) {
    write_text_file(base / "checkpoint.json", run.checkpoint.dump() + "\n");
  }
}

std::vector<RunResult> run_experiment(const ExperimentConfig& cfg, const Logger& log) {
  cfg.validate();
  const std::vector<TrainItem> held_out = held_out_set(cfg);
  std::vector<std::uint64_t> seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  std::vector<RunResult> runs;
  for (std::uint64_t seed : seeds) {
    for (Variant v : kAllVariants) {
      const std::string label = "seed" + std::to_string(seed) + "/" + variant_name(v);
      RunResult run = train_and_evaluate(cfg, variant_config(cfg.decoder, v), seed, held_out, label, log);
      if (log) log(label + " mAP1 " + fmt(run.report.map1) + " mAP2 " + fmt(run.report.map2));
      if (!cfg.output_dir.empty()) {
        write_run(run, (std::filesystem::path(cfg.output_dir) / label).string());
      }
      runs.push_back(std::move(run));
    }
  }
  if (!cfg.output_dir.empty()) {
    const std::filesystem::path out(cfg.output_dir);
    write_text_file(out / "summary.csv", summary_csv(runs));
    write_text_file(out / "config.json", experiment_to_json(cfg).dump(2) + "\n");
  }
  return runs;
}

std::string summary_csv(const std::vector<RunResult>& runs) {
  std::ostringstream os;
  os << "run,seed,mAP1,mAP2,failed\n";
  for (const RunResult& r : runs) {
    os << r.label << "," << r.seed << "," << fmt(r.report.map1) << "," << fmt(r.report.map2) << ","
       << (r.report.failed ? 1 : 0) << "\n";
  }
  return os.str();
}

double sign_test_p(const std::vector<double>& differences) {
  std::size_t n = 0, wins = 0;
  for (double d : differences) {
    if (d == 0.0) continue;
    ++n;
    wins += d > 0.0 ? 1 : 0;
  }
  if (n == 0) return 1.0;
  // Sum_{k >= wins} C(n, k) / 2^n, in log space.
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    const double log_c = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    p += std::exp(log_c - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(p, 1.0);
}

}  // namespace hdmap::experiment
