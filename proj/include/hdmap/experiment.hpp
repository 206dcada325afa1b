#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmap/ad/nn.hpp"
#include "hdmap/decoder.hpp"
#include "hdmap/eval.hpp"
#include "hdmap/synthetic.hpp"

namespace hdmap::experiment {

using decoder::DecoderConfig;
using decoder::DecoderModel;
using decoder::TrainItem;

enum class Variant { kBaseline, kGrl, kGrlGrg };

inline constexpr Variant kAllVariants[] = {Variant::kBaseline, Variant::kGrl, Variant::kGrlGrg};

std::string variant_name(Variant v);
/// Switches GRL/GRG on or off; the baseline also zeroes lambda_global.
DecoderConfig variant_config(const DecoderConfig& base, Variant v);

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  SceneGenParams gen;
  FeatureParams features;
  DecoderConfig decoder;
  ad::AdamConfig optim{.lr = 2e-3};
  /// Cosine decay from optim.lr to lr_floor * optim.lr over the run, after
  /// a linear warmup. False keeps the rate constant.
  bool cosine_schedule = true;
  double lr_floor = 0.01;
  std::size_t warmup_steps = 0;
  std::size_t steps = 600;
  std::size_t batch_size = 2;
  /// Held-out evaluation every this many steps (0: only after training).
  std::size_t eval_every = 0;
  std::size_t eval_scenes = 64;
  std::uint64_t eval_seed_base = 1'000'000;
  std::string output_dir;

  void validate() const;
};

/// Flat document: every DecoderConfig field at the top level plus the
/// experiment keys (seeds, steps, batch_size, lr, noise, ...).
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::string& path);

/// Learning rate of `step` (0-based) under the schedule.
double scheduled_lr(const ExperimentConfig& cfg, std::size_t step);

/// Builds scene, features and raster target for one scene seed.
TrainItem make_item(std::uint64_t scene_seed, const ExperimentConfig& cfg);
/// Scene seeds of training step `step`; independent of the variant.
std::vector<std::uint64_t> training_scene_seeds(std::uint64_t run_seed, std::size_t step,
                                                std::size_t batch_size);
std::vector<TrainItem> held_out_set(const ExperimentConfig& cfg);

/// Last-layer predictions: one per query, scored by the largest
/// non-background class probability.
eval::ScenePredictions extract_predictions(const DecoderModel& model,
                                           const decoder::LayerOutput& layer);

/// Evaluates on `items`; stability MAE is averaged over scenes. The scored
/// predictions are also copied to `preds_out` when given.
eval::EvalReport evaluate_model(const DecoderModel& model, const std::vector<TrainItem>& items,
                                std::vector<eval::ScenePredictions>* preds_out = nullptr);

struct AuditRow {
  std::size_t query = 0;
  bool matched = false;
  double global_norm = 0.0;
  double detection_norm = 0.0;
};

/// Per-query gradient norms at layer 0 from the global loss (layer 0 GRL
/// head) and from the configured detection loss, each backpropagated on its
/// own, with respect to the query rows leaving layer 0.
std::vector<AuditRow> gradient_flow_audit(const DecoderModel& model, const TrainItem& item);
std::string audit_to_csv(const std::vector<AuditRow>& rows);
double grad_coverage(const std::vector<AuditRow>& rows);

using Logger = std::function<void(const std::string&)>;

struct RunResult {
  std::uint64_t seed = 0;
  std::string label;
  eval::EvalReport report;
  std::string loss_csv;
  /// step,mAP1,mAP2 rows when eval_every > 0.
  std::string eval_curve_csv;
  nlohmann::json checkpoint;  // filled only when requested
  /// Final held-out predictions in the `eval --pred` format.
  nlohmann::json predictions;
};

/// Trains `decoder_cfg` on the seed's scene stream and evaluates on
/// `held_out`. A non-finite loss ends training and marks the report failed.
RunResult train_and_evaluate(const ExperimentConfig& cfg, const DecoderConfig& decoder_cfg,
                             std::uint64_t seed, const std::vector<TrainItem>& held_out,
                             const std::string& label, const Logger& log = {},
                             bool keep_checkpoint = false);

/// Writes loss.csv, report.json, report.csv, predictions.json (and
/// eval_curve.csv) under dir.
void write_run(const RunResult& run, const std::string& dir);

/// Baseline, +GRL and +GRL+GRG for every seed, sorted by (seed, variant).
/// Artifacts go under cfg.output_dir when it is non-empty.
std::vector<RunResult> run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

/// seed,variant,mAP1,mAP2,failed rows.
std::string summary_csv(const std::vector<RunResult>& runs);

/// One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2),
/// ties dropped.
double sign_test_p(const std::vector<double>& differences);

}  // namespace hdmap::experiment
