// Command-line front end: scene generation, training, evaluation, audits
// and ablation sweeps. Relative output paths resolve under $HDMAP_OUT_ROOT
// when it is set.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hdmap/eval.hpp"
#include "hdmap/experiment.hpp"
#include "hdmap/recon.hpp"
#include "hdmap/scene_io.hpp"
#include "hdmap/synthetic.hpp"

namespace fs = std::filesystem;
using namespace hdmap;
using decoder::DecoderConfig;
using experiment::ExperimentConfig;

namespace {

fs::path out_path(const std::string& p) {
  fs::path path(p);
  const char* root = std::getenv("HDMAP_OUT_ROOT");
  if (path.is_relative() && root != nullptr && *root != '\0') {
    return fs::path(root) / path;
  }
  return path;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::vector<MapScene> load_scenes(const fs::path& p) {
  std::vector<MapScene> scenes;
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) scenes.push_back(read_scene(f));
    return scenes;
  }
  nlohmann::json doc = read_json_file(p);
  if (doc.contains("scenes")) {
    for (const auto& s : doc.at("scenes")) scenes.push_back(scene_from_json(s));
  } else {
    scenes.push_back(scene_from_json(doc));
  }
  return scenes;
}

int cmd_gen(std::uint64_t seed, std::size_t count, const std::string& out, const std::string& config) {
  ExperimentConfig cfg = config.empty() ? ExperimentConfig{} : experiment::load_experiment(config);
  const fs::path dir = out_path(out);
  for (std::size_t i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.json", i);
    write_scene(dir / name, generate_synthetic_scene(seed + i, cfg.gen));
  }
  std::cout << "wrote " << count << " scenes to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& out, const std::string& variant,
              bool checkpoint) {
  ExperimentConfig cfg = experiment::load_experiment(config);
  DecoderConfig dc = cfg.decoder;
  if (variant != "config") {
    bool found = false;
    for (auto v : experiment::kAllVariants) {
      if (experiment::variant_name(v) == variant) {
        dc = experiment::variant_config(cfg.decoder, v);
        found = true;
      }
    }
    if (!found) throw MapError("unknown variant '" + variant + "'");
  }
  const fs::path dir = out_path(out);
  const auto held_out = experiment::held_out_set(cfg);
  std::vector<experiment::RunResult> runs;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string label = "seed" + std::to_string(seed);
    auto run = experiment::train_and_evaluate(cfg, dc, seed, held_out, label, log_line, checkpoint);
    experiment::write_run(run, (dir / label).string());
    std::cout << label << " mAP1 " << run.report.map1 << " mAP2 " << run.report.map2
              << (run.report.failed ? " FAILED: " + run.report.failure : "") << "\n";
    runs.push_back(std::move(run));
  }
  write_text_file(dir / "summary.csv", experiment::summary_csv(runs));
  nlohmann::json used = experiment::experiment_to_json(cfg);
  used.update(decoder::config_to_json(dc));
  write_text_file(dir / "config.json", used.dump(2) + "\n");
  return 0;
}

int cmd_experiment(const std::string& config, const std::string& out) {
  ExperimentConfig cfg = experiment::load_experiment(config);
  cfg.output_dir = out_path(out).string();
  auto runs = experiment::run_experiment(cfg, log_line);
  std::cout << experiment::summary_csv(runs);
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt, const std::string& out) {
  auto preds = eval::predictions_from_json(read_json_file(pred));
  auto gts = load_scenes(gt);
  if (preds.size() != gts.size()) {
    throw MapError("eval: " + std::to_string(preds.size()) + " predicted scenes vs " +
                   std::to_string(gts.size()) + " ground-truth scenes");
  }
  eval::EvalReport report = eval::evaluate(preds, gts);
  report.label = fs::path(pred).stem().string();
  const fs::path dir = out_path(out);
  write_text_file(dir / "report.json", eval::report_to_json(report).dump(2) + "\n");
  write_text_file(dir / "report.csv", eval::report_to_csv(report));
  std::cout << eval::report_to_csv(report);
  return 0;
}

int cmd_audit(const std::string& config, const std::string& scene_path, const std::string& out) {
  ExperimentConfig cfg = experiment::load_experiment(config);
  decoder::TrainItem item;
  item.scene = read_scene(scene_path);
  validate_scene(item.scene, cfg.decoder.points_per_instance);
  item.features = synthesize_bev_features(item.scene, cfg.features, cfg.decoder.seed);
  item.target = rasterize_scene(item.scene, BevGrid(cfg.decoder.map_rows, cfg.decoder.map_cols,
                                                    cfg.decoder.extent),
                                cfg.decoder.raster);
  decoder::DecoderModel model(cfg.decoder);
  const auto rows = experiment::gradient_flow_audit(model, item);
  const std::string csv = experiment::audit_to_csv(rows);
  if (!out.empty()) write_text_file(out_path(out), csv);
  std::cout << csv;
  std::cerr << "queries with nonzero global gradient: " << experiment::grad_coverage(rows) * 100.0
            << "%\n";
  return 0;
}

int cmd_recon(const std::string& config, const std::string& out) {
  recon::ReconConfig cfg =
      config.empty() ? recon::ReconConfig{} : recon::recon_config_from_json(read_json_file(config));
  recon::ReconMetrics m = recon::reconstruction_experiment(cfg);
  const auto one = recon::make_rasters(cfg.seed * 1'000'003ULL, 1, cfg);
  const double overfit = recon::overfit_single(one.front(), cfg);
  nlohmann::json doc = {{"config", recon::recon_config_to_json(cfg)},
                        {"train_bce", m.train_bce},
                        {"val_bce", m.val_bce},
                        {"constant_bce", m.constant_bce},
                        {"constant_p", m.constant_p},
                        {"val_iou", m.val_iou},
                        {"overfit_iou", overfit},
                        {"parameters", m.parameters}};
  if (!out.empty()) write_text_file(out_path(out), doc.dump(2) + "\n");
  std::cout << doc.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& param, const std::vector<double>& values, const std::string& config,
               const std::string& out) {
  ExperimentConfig base = experiment::load_experiment(config);
  const auto held_out = experiment::held_out_set(base);
  const fs::path dir = out_path(out);
  std::ostringstream rows, per_seed;
  rows << "param,value,mAP1,mAP2,failed\n";
  per_seed << "param,value,seed,mAP1,mAP2,failed\n";
  for (double value : values) {
    DecoderConfig dc = experiment::variant_config(base.decoder, experiment::Variant::kGrlGrg);
    if (param == "N") {
      dc.applied_layers = static_cast<std::size_t>(value);
    } else if (param == "dgrl") {
      dc.grl_feature_dim = static_cast<std::size_t>(value);
    } else if (param == "omega") {
      dc.omega = value;
    } else if (param == "c") {
      dc.weaken = value;
    } else {
      throw MapError("ablate: unknown parameter '" + param + "' (expected N, dgrl, omega or c)");
    }
    dc.validate();
    double m1 = 0.0, m2 = 0.0;
    std::size_t failed = 0;
    for (std::uint64_t seed : base.seeds) {
      std::ostringstream label;
      label << param << "=" << value << "/seed" << seed;
      auto run = experiment::train_and_evaluate(base, dc, seed, held_out, label.str(), log_line);
      experiment::write_run(run, (dir / label.str()).string());
      per_seed << param << "," << value << "," << seed << "," << run.report.map1 << ","
               << run.report.map2 << "," << (run.report.failed ? 1 : 0) << "\n";
      m1 += run.report.map1;
      m2 += run.report.map2;
      failed += run.report.failed ? 1 : 0;
    }
    const double k = static_cast<double>(base.seeds.size());
    rows << param << "," << value << "," << m1 / k << "," << m2 / k << "," << failed << "\n";
  }
  write_text_file(dir / "ablation.csv", rows.str());
  write_text_file(dir / "ablation_per_seed.csv", per_seed.str());
  std::cout << rows.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hdmap: global-map guided vector map decoding at desk scale"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::size_t count = 10;
  std::string out, config, pred, gt, scene, variant = "config", param;
  std::vector<double> values;
  bool checkpoint = false;

  auto* gen = app.add_subcommand("gen-scenes", "write seeded synthetic scenes as JSON");
  gen->add_option("--seed", seed, "first scene seed")->required();
  gen->add_option("--count", count, "number of scenes")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--config", config, "experiment config (generator parameters)");

  auto* train = app.add_subcommand("train", "train one decoder configuration per seed");
  train->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "output directory")->required();
  train->add_option("--variant", variant, "config, baseline, grl or grl_grg");
  train->add_flag("--checkpoint", checkpoint, "also write final parameters");

  auto* exp = app.add_subcommand("experiment", "baseline vs +GRL vs +GRL+GRG on every seed");
  exp->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "score predictions against ground-truth scenes");
  ev->add_option("--pred", pred, "predictions JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--gt", gt, "scene directory or JSON")->required()->check(CLI::ExistingPath);
  ev->add_option("--out", out, "output directory")->required();

  auto* audit = app.add_subcommand("audit", "per-query gradient norms at layer 0");
  audit->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  audit->add_option("--scene", scene, "scene JSON")->required()->check(CLI::ExistingFile);
  audit->add_option("--out", out, "also write the CSV here");

  auto* rec = app.add_subcommand("recon", "raster autoencoder reconstruction experiment");
  rec->add_option("--config", config, "reconstruction config JSON")->check(CLI::ExistingFile);
  rec->add_option("--out", out, "also write the metrics JSON here");

  auto* abl = app.add_subcommand("ablate", "sweep one +GRL+GRG hyperparameter");
  abl->add_option("--param", param, "N, dgrl, omega or c")
      ->required()
      ->check(CLI::IsMember({"N", "dgrl", "omega", "c"}));
  abl->add_option("--values", values, "values to try")->required();
  abl->add_option("--config", config, "experiment config JSON")->required()->check(CLI::ExistingFile);
  abl->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(seed, count, out, config);
    if (*train) return cmd_train(config, out, variant, checkpoint);
    if (*exp) return cmd_experiment(config, out);
    if (*ev) return cmd_eval(pred, gt, out);
    if (*audit) return cmd_audit(config, scene, out);
    if (*rec) return cmd_recon(config, out);
    if (*abl) return cmd_ablate(param, values, config, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
