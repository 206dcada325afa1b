#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>

#include <doctest.h>

#include "hdmap/decoder.hpp"
#include "hdmap/experiment.hpp"
#include "support/oracles.hpp"

using namespace hdmap;
using namespace hdmap::decoder;
using ad::Tensor;

namespace {

// Narrow model on the default feature grid; keeps each forward pass cheap.
experiment::ExperimentConfig small_experiment() {
  experiment::ExperimentConfig cfg;
  cfg.decoder.layers = 3;
  cfg.decoder.query_width = 16;
  cfg.decoder.ffn_hidden = 16;
  cfg.decoder.attn_dim = 8;
  cfg.decoder.grl_feature_dim = 16;
  cfg.decoder.grl_conv_hidden = 4;
  cfg.decoder.global_dim = 8;
  cfg.decoder.map_rows = 16;
  cfg.decoder.map_cols = 8;
  return cfg;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) return a.defined() == b.defined();
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

bool same_outputs(const DecoderOutput& a, const DecoderOutput& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t k = 0; k < a.layers.size(); ++k) {
    const LayerOutput& x = a.layers[k];
    const LayerOutput& y = b.layers[k];
    if (!bit_equal(x.queries, y.queries) || !bit_equal(x.class_logits, y.class_logits) ||
        !bit_equal(x.points, y.points) || !bit_equal(x.global_logits, y.global_logits)) {
      return false;
    }
  }
  return true;
}

void zero_mlp(ad::Mlp& mlp) {
  for (auto& layer : mlp.layers()) {
    for (double& v : layer.weight.mutable_values()) v = 0.0;
    for (double& v : layer.bias.mutable_values()) v = 0.0;
  }
}

// Layer output whose matched queries sit exactly on the ground truth.
LayerOutput perfect_output(const MapScene& scene, const DecoderConfig& cfg, double confidence) {
  const std::size_t n = cfg.num_queries, l = cfg.points_per_instance;
  const std::size_t k = kNumClasses + 1;
  std::vector<double> logits(n * k, 0.0), pts(n * l * 2, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const bool real = j < scene.instances.size();
    logits[j * k + (real ? static_cast<std::size_t>(scene.instances[j].class_id) : kNumClasses)] = confidence;
    for (std::size_t p = 0; p < l; ++p) {
      pts[(j * l + p) * 2] = real ? scene.instances[j].points[p].x : 0.0;
      pts[(j * l + p) * 2 + 1] = real ? scene.instances[j].points[p].y : 0.0;
    }
  }
  LayerOutput out;
  out.class_logits = Tensor::constant({n, k}, logits);
  out.points = Tensor::constant({n * l, 2}, pts);
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  DecoderConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.applied_layers = 7;
  CHECK_THROWS_AS(DecoderModel{cfg}, MapError);
  cfg.applied_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), MapError);
  cfg = DecoderConfig{};
  cfg.omega = -0.1;
  CHECK_THROWS_AS(cfg.validate(), MapError);
  cfg = DecoderConfig{};
  cfg.weaken = 1.5;
  CHECK_THROWS_AS(cfg.validate(), MapError);
}

TEST_CASE("config JSON round trip") {
  DecoderConfig cfg;
  cfg.applied_layers = 3;
  cfg.omega = 0.2;
  cfg.share_grg = true;
  cfg.refine_points = false;
  cfg.extent = {-10, 10, -20, 25};
  cfg.seed = 99;
  DecoderConfig back;
  config_from_json(nlohmann::json::parse(config_to_json(cfg).dump()), back);
  CHECK(config_to_json(back) == config_to_json(cfg));
  CHECK(back.extent == cfg.extent);

  DecoderConfig partial;
  config_from_json(nlohmann::json{{"layers", 4}}, partial);
  CHECK(partial.layers == 4);
  CHECK(partial.applied_layers == DecoderConfig{}.applied_layers);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"layers", "six"}}, partial), MapError);
}

TEST_CASE("position codes multiply into cosines of differences") {
  std::mt19937_64 rng(5);
  const Extent e;
  std::uniform_real_distribution<double> ux(e.x_min, e.x_max), uy(e.y_min, e.y_max);
  for (int trial = 0; trial < 50; ++trial) {
    const Point2 pts[2] = {{ux(rng), uy(rng)}, {ux(rng), uy(rng)}};
    const Tensor code = position_code(pts, e, 3);
    double dot = 0.0;
    for (std::size_t i = 0; i < 12; ++i) dot += code[i] * code[12 + i];
    const double du = 2.0 * (pts[0].x - pts[1].x) / e.width();
    const double dv = 2.0 * (pts[0].y - pts[1].y) / e.height();
    double expect = 0.0;
    for (int f = 0; f < 3; ++f) {
      const double k = std::numbers::pi * (1 << f);
      expect += std::cos(k * du) + std::cos(k * dv);
    }
    CHECK(dot == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("zero heads put every point at the extent center") {
  auto ecfg = small_experiment();
  for (bool refine : {false, true}) {
    ecfg.decoder.refine_points = refine;
    DecoderModel model(ecfg.decoder);
    zero_mlp(model.point_head());
    zero_mlp(model.class_head());
    const auto item = experiment::make_item(3, ecfg);
    const DecoderOutput out = decoder_forward(model, item.features);
    const Point2 c = ecfg.decoder.extent.center();
    for (const LayerOutput& lo : out.layers) {
      auto v = lo.points.values();
      for (std::size_t i = 0; i < v.size(); i += 2) {
        CHECK(v[i] == c.x);
        CHECK(v[i + 1] == c.y);
      }
      for (double z : lo.class_logits.values()) CHECK(z == 0.0);
    }
  }
}

TEST_CASE("heads emit one prediction per query and are local") {
  auto ecfg = small_experiment();
  DecoderModel model(ecfg.decoder);
  const DecoderConfig& cfg = model.config();
  const std::size_t n = cfg.num_queries, l = cfg.points_per_instance, cq = cfg.query_width;
  std::mt19937_64 rng(2);
  const Tensor q = oracle::random_param(rng, {n * l, cq});
  const Tensor inst = ad::group_mean_rows(q, l);
  const InstancePrediction base = predict_instances(model, q, inst);
  CHECK(base.class_logits.shape() == ad::Shape{n, kNumClasses + 1});
  CHECK(base.points.shape() == ad::Shape{n * l, 2});
  for (const double v : base.points.values()) CHECK(std::isfinite(v));

  for (std::size_t j : {std::size_t{0}, n / 2, n - 1}) {
    std::vector<double> moved(q.values().begin(), q.values().end());
    for (std::size_t i = j * l * cq; i < (j + 1) * l * cq; ++i) moved[i] += 0.5;
    const Tensor q2 = Tensor::constant(q.shape(), moved);
    const InstancePrediction p = predict_instances(model, q2, ad::group_mean_rows(q2, l));
    for (std::size_t i = 0; i < n; ++i) {
      bool class_same = true, points_same = true;
      for (std::size_t c = 0; c <= kNumClasses; ++c) {
        class_same = class_same && p.class_logits[i * (kNumClasses + 1) + c] == base.class_logits[i * (kNumClasses + 1) + c];
      }
      for (std::size_t e = i * l * 2; e < (i + 1) * l * 2; ++e) points_same = points_same && p.points[e] == base.points[e];
      CHECK(class_same == (i != j));
      CHECK(points_same == (i != j));
    }
  }
}

TEST_CASE("a zero point head reproduces the prior under refinement") {
  auto ecfg = small_experiment();
  DecoderModel model(ecfg.decoder);
  zero_mlp(model.point_head());
  const DecoderConfig& cfg = model.config();
  const std::size_t rows = cfg.num_queries * cfg.points_per_instance;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ux(-14, 14), uy(-29, 29);
  std::vector<double> prior(rows * 2);
  for (std::size_t i = 0; i < rows; ++i) {
    prior[2 * i] = ux(rng);
    prior[2 * i + 1] = uy(rng);
  }
  const Tensor q = Tensor::zeros({rows, cfg.query_width});
  const InstancePrediction p =
      predict_instances(model, q, ad::group_mean_rows(q, cfg.points_per_instance), Tensor::constant({rows, 2}, prior));
  for (std::size_t i = 0; i < prior.size(); ++i) CHECK(p.points[i] == doctest::Approx(prior[i]).epsilon(1e-12));
  CHECK_THROWS_AS(predict_instances(model, q, ad::group_mean_rows(q, cfg.points_per_instance), Tensor::zeros({3, 2})),
                  MapError);
}

TEST_CASE("hungarian_match edge cases") {
  DecoderConfig cfg;
  cfg.num_queries = 3;
  MapScene empty;
  LayerOutput lo = perfect_output(empty, cfg, 5.0);
  const MatchResult none = hungarian_match(lo, empty, cfg);
  CHECK(none.assignment.empty());
  CHECK(none.total_cost == 0.0);

  std::mt19937_64 rng(1);
  MapScene crowded;
  for (int i = 0; i < 4; ++i) crowded.instances.push_back({oracle::random_polyline(rng, Extent{}, 8), ClassId::kDivider});
  CHECK_THROWS_AS(hungarian_match(lo, crowded, cfg), MapError);
}

TEST_CASE("matching on the decoder cost equals enumeration") {
  auto ecfg = small_experiment();
  ecfg.decoder.num_queries = 7;
  ecfg.gen.max_instances = 6;
  DecoderModel model(ecfg.decoder);
  for (std::uint64_t s = 1; s <= 20; ++s) {
    const auto item = experiment::make_item(s, ecfg);
    const DecoderOutput out = decoder_forward(model, item.features);
    const LayerOutput& lo = out.layers.back();
    const MatchResult m = hungarian_match(lo, item.scene, ecfg.decoder);
    CHECK(m.total_cost == oracle::best_assignment(matching_costs(lo, item.scene, ecfg.decoder)));
  }
}

TEST_CASE("detection loss examples") {
  DecoderConfig cfg;
  std::mt19937_64 rng(4);
  MapScene scene;
  for (int i = 0; i < 3; ++i) {
    scene.instances.push_back({oracle::random_polyline(rng, Extent{}, 8), class_from_int(i)});
  }

  SUBCASE("perfect confident predictions") {
    const LayerOutput lo = perfect_output(scene, cfg, 20.0);
    const MatchResult m = hungarian_match(lo, scene, cfg);
    CHECK(m.assignment == std::vector<std::size_t>{0, 1, 2});
    CHECK(detection_loss(lo, scene, m, cfg).total.item() < 1e-3);
  }

  SUBCASE("reversing ground-truth order changes nothing") {
    std::vector<double> logits(cfg.num_queries * 4);
    for (double& v : logits) v = std::uniform_real_distribution<double>(-2, 2)(rng);
    LayerOutput lo;
    lo.class_logits = Tensor::constant({cfg.num_queries, 4}, logits);
    std::vector<double> pts(cfg.num_queries * 8 * 2);
    for (double& v : pts) v = std::uniform_real_distribution<double>(-14, 14)(rng);
    lo.points = Tensor::constant({cfg.num_queries * 8, 2}, pts);
    MapScene reversed = scene;
    for (auto& inst : reversed.instances) std::reverse(inst.points.begin(), inst.points.end());
    const MatchResult m = hungarian_match(lo, scene, cfg);
    const MatchResult mr = hungarian_match(lo, reversed, cfg);
    CHECK(m.assignment == mr.assignment);
    CHECK(detection_loss(lo, scene, m, cfg).total.item() == detection_loss(lo, reversed, mr, cfg).total.item());
  }

  SUBCASE("constant one meter offset") {
    cfg.point_loss_normalized = false;
    cfg.class_loss = false;
    MapScene one;
    MapInstance line;
    for (int j = 0; j < 8; ++j) line.points.push_back({-10.0 + 2.0 * j, 3.0 * j - 20.0});
    one.instances.push_back(line);
    MapScene shifted = one;
    for (auto& p : shifted.instances[0].points) p.x += 1.0;
    const LayerOutput lo = perfect_output(shifted, cfg, 5.0);
    const MatchResult m = hungarian_match(lo, one, cfg);
    const DetectionLoss loss = detection_loss(lo, one, m, cfg);
    CHECK(loss.point_term == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(loss.total.item() == loss.point_term);
  }

  SUBCASE("normalized points divide by the extent size") {
    cfg.class_loss = false;
    MapScene one;
    MapInstance line;
    for (int j = 0; j < 8; ++j) line.points.push_back({-10.0 + 2.0 * j, 3.0 * j - 20.0});
    one.instances.push_back(line);
    MapScene shifted = one;
    for (auto& p : shifted.instances[0].points) p.y += 1.5;
    const LayerOutput lo = perfect_output(shifted, cfg, 5.0);
    const DetectionLoss loss = detection_loss(lo, one, hungarian_match(lo, one, cfg), cfg);
    CHECK(loss.point_term == doctest::Approx(5.0 * 1.5 / Extent{}.height()).epsilon(1e-12));
  }

  SUBCASE("mismatched assignment size is rejected") {
    const LayerOutput lo = perfect_output(scene, cfg, 5.0);
    MatchResult bad;
    bad.assignment = {0};
    CHECK_THROWS_AS(detection_loss(lo, scene, bad, cfg), MapError);
  }
}

TEST_CASE("GRL runs exactly on the first N layers") {
  auto ecfg = small_experiment();
  ecfg.decoder.layers = 6;
  for (std::size_t applied : {std::size_t{1}, std::size_t{2}, std::size_t{6}}) {
    ecfg.decoder.applied_layers = applied;
    DecoderModel model(ecfg.decoder);
    const auto item = experiment::make_item(5, ecfg);
    const DecoderOutput out = decoder_forward(model, item.features);
    REQUIRE(out.layers.size() == 6);
    for (std::size_t k = 0; k < 6; ++k) {
      CHECK(out.layers[k].global_logits.defined() == (k < applied));
    }
  }
  ecfg.decoder = experiment::variant_config(ecfg.decoder, experiment::Variant::kBaseline);
  DecoderModel baseline(ecfg.decoder);
  const DecoderOutput out = decoder_forward(baseline, experiment::make_item(5, ecfg).features);
  for (const LayerOutput& lo : out.layers) CHECK_FALSE(lo.global_logits.defined());
}

TEST_CASE("layers at or past N never read their GRL/GRG parameters") {
  auto ecfg = small_experiment();
  ecfg.decoder.layers = 6;
  ecfg.decoder.applied_layers = 2;
  DecoderModel model(ecfg.decoder);
  const auto item = experiment::make_item(8, ecfg);
  const DecoderOutput before = decoder_forward(model, item.features);
  std::mt19937_64 rng(3);
  std::size_t touched = 0;
  for (std::size_t k = 2; k < 6; ++k) {
    for (const std::string& prefix : model.global_param_prefixes(k)) {
      for (auto& [name, t] : model.params().all()) {
        if (name.rfind(prefix, 0) != 0) continue;
        for (double& v : t.mutable_values()) v = std::uniform_real_distribution<double>(-5, 5)(rng);
        ++touched;
      }
    }
  }
  CHECK(touched > 0);
  CHECK(same_outputs(before, decoder_forward(model, item.features)));

  // The applied layers do read theirs.
  for (auto& [name, t] : model.params().all()) {
    if (name.rfind("grl.layer1.", 0) == 0) t.mutable_values()[0] += 1.0;
  }
  CHECK_FALSE(same_outputs(before, decoder_forward(model, item.features)));
}

TEST_CASE("forward and training are deterministic") {
  auto ecfg = small_experiment();
  std::vector<TrainItem> batch{experiment::make_item(1, ecfg), experiment::make_item(2, ecfg)};
  DecoderModel a(ecfg.decoder), b(ecfg.decoder);
  CHECK(same_outputs(decoder_forward(a, batch[0].features), decoder_forward(b, batch[0].features)));
  ad::Adam oa(ecfg.optim), ob(ecfg.optim);
  for (int step = 0; step < 3; ++step) {
    const LossBreakdown la = train_step(a, oa, batch);
    const LossBreakdown lb = train_step(b, ob, batch);
    CHECK(std::memcmp(&la.total, &lb.total, sizeof(double)) == 0);
    CHECK(a.params().to_json().dump() == b.params().to_json().dump());
  }
  ecfg.decoder.seed = 1;
  DecoderModel c(ecfg.decoder);
  CHECK(a.params().to_json().dump() != c.params().to_json().dump());
}

TEST_CASE("one step at lr 1e-3 lowers the loss on a fixed batch") {
  auto ecfg = small_experiment();
  ecfg.optim.lr = 1e-3;
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ecfg.decoder.seed = seed;
    DecoderModel model(ecfg.decoder);
    const std::vector<TrainItem> batch{experiment::make_item(seed * 31, ecfg)};
    ad::Adam adam(ecfg.optim);
    const double before = train_step(model, adam, batch).total;
    LossBreakdown after;
    scene_objective(model, batch[0], after);
    decreased += after.total < before;
  }
  CHECK(decreased >= 18);
}

TEST_CASE("loss breakdown follows the layer weights") {
  auto ecfg = small_experiment();
  DecoderModel model(ecfg.decoder);
  const auto item = experiment::make_item(4, ecfg);
  LossBreakdown b;
  const double total = scene_objective(model, item, b).item();
  double expect = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const bool applied = k < 2;
    CHECK(std::isnan(b.global_per_layer[k]) == !applied);
    expect += (applied ? ecfg.decoder.omega : 1.0) * b.detection_per_layer[k];
    if (applied) expect += ecfg.decoder.lambda_global * b.global_per_layer[k];
  }
  CHECK(total == doctest::Approx(expect).epsilon(1e-12));
  CHECK(b.total == total);

  // lambda_global = 0 drops the global terms and the omega discount.
  ecfg.decoder.lambda_global = 0.0;
  DecoderModel off(ecfg.decoder);
  LossBreakdown bo;
  const double t0 = scene_objective(off, item, bo).item();
  double sum_det = 0.0;
  for (double d : bo.detection_per_layer) sum_det += d;
  CHECK(t0 == doctest::Approx(sum_det).epsilon(1e-12));
}

TEST_CASE("global loss reaches every query; point loss only the matched ones") {
  auto ecfg = small_experiment();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ecfg.decoder.seed = seed;
    ecfg.decoder.lambda_global = 1.0;
    ecfg.decoder.class_loss = true;
    const auto item = experiment::make_item(seed + 100, ecfg);
    const auto rows = experiment::gradient_flow_audit(DecoderModel(ecfg.decoder), item);
    REQUIRE(rows.size() == ecfg.decoder.num_queries);
    for (const auto& r : rows) CHECK(r.global_norm > 1e-12);
    CHECK(experiment::grad_coverage(rows) == 1.0);

    ecfg.decoder.lambda_global = 0.0;
    ecfg.decoder.class_loss = false;
    const auto point_only = experiment::gradient_flow_audit(DecoderModel(ecfg.decoder), item);
    std::size_t matched = 0;
    for (const auto& r : point_only) {
      matched += r.matched;
      if (r.matched) {
        CHECK(r.detection_norm > 0.0);
      } else {
        CHECK(r.detection_norm == 0.0);
      }
    }
    CHECK(matched == item.scene.instances.size());
  }
}

TEST_CASE("train_step rejects an empty batch and a non-finite loss") {
  auto ecfg = small_experiment();
  DecoderModel model(ecfg.decoder);
  ad::Adam adam(ecfg.optim);
  CHECK_THROWS_AS(train_step(model, adam, std::span<const TrainItem>{}), MapError);
  auto item = experiment::make_item(2, ecfg);
  std::vector<double> bad(item.features.values().begin(), item.features.values().end());
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  item.features = Tensor::constant(item.features.shape(), bad);
  const std::vector<TrainItem> batch{item};
  CHECK_THROWS_AS(train_step(model, adam, batch), MapError);
}
