#include "hdmap/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace hdmap::decoder {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Point2> points_of(const Tensor& points, std::size_t instance, std::size_t l) {
  std::vector<Point2> out(l);
  auto v = points.values();
  for (std::size_t j = 0; j < l; ++j) {
    out[j] = {v[(instance * l + j) * 2], v[(instance * l + j) * 2 + 1]};
  }
  return out;
}

}  // namespace

void DecoderConfig::validate() const {
  if (layers == 0) {
    throw MapError("DecoderConfig: need at least one layer");
  }
  if (applied_layers < 1 || applied_layers > layers) {
    throw MapError("DecoderConfig: applied layer count N=" + std::to_string(applied_layers) +
                   " must satisfy 1 <= N <= L=" + std::to_string(layers));
  }
  if (num_queries == 0 || query_width == 0 || points_per_instance < 2 || attn_dim == 0 ||
      ffn_hidden == 0 || feature_channels == 0 || feature_rows == 0 || feature_cols == 0) {
    throw MapError("DecoderConfig: sizes must be positive (and l >= 2)");
  }
  if (lambda_global < 0.0 || omega < 0.0 || point_weight < 0.0 || class_weight < 0.0 ||
      background_weight < 0.0 || match_point_weight < 0.0 || match_class_weight < 0.0) {
    throw MapError("DecoderConfig: loss weights must be non-negative");
  }
  if (!(weaken >= 0.0 && weaken <= 1.0)) {
    throw MapError("DecoderConfig: weakening coefficient must lie in [0,1]");
  }
  if (spatial_query && spatial_frequencies == 0) {
    throw MapError("DecoderConfig: spatial_query needs at least one frequency");
  }
  if (map_rows < 2 || map_cols < 2 || grl_small_rows < 2 || grl_small_cols < 2) {
    throw MapError("DecoderConfig: map grids need at least 2 rows and columns");
  }
}

#define HDMAP_CONFIG_FIELDS(X)                                                   \
  X(layers) X(applied_layers) X(num_queries) X(query_width)                      \
  X(points_per_instance) X(point_queries) X(attn_dim) X(ffn_hidden)              \
  X(spatial_query) X(spatial_frequencies) X(spatial_init) X(refine_points)       \
  X(feature_channels) X(feature_rows) X(feature_cols)                            \
  X(grl_enabled) X(grg_enabled) X(grl_feature_dim) X(grl_small_rows)             \
  X(grl_small_cols) X(grl_conv_hidden) X(global_dim) X(share_grg)                \
  X(grg_residual) X(lambda_global) X(omega) X(weaken) X(map_rows) X(map_cols)    \
  X(point_weight) X(point_loss_normalized) X(class_weight) X(background_weight)  \
  X(class_loss) X(match_point_weight) X(match_class_weight) X(seed)

nlohmann::json config_to_json(const DecoderConfig& cfg) {
  nlohmann::json doc;
#define HDMAP_TO(name) doc[#name] = cfg.name;
  HDMAP_CONFIG_FIELDS(HDMAP_TO)
#undef HDMAP_TO
  doc["raster_thickness"] = cfg.raster.thickness;
  doc["fill_crossings"] = cfg.raster.fill_crossings;
  doc["extent"] = {cfg.extent.x_min, cfg.extent.x_max, cfg.extent.y_min, cfg.extent.y_max};
  return doc;
}

void config_from_json(const nlohmann::json& doc, DecoderConfig& cfg) {
  try {
#define HDMAP_FROM(name) \
  if (doc.contains(#name)) doc.at(#name).get_to(cfg.name);
    HDMAP_CONFIG_FIELDS(HDMAP_FROM)
#undef HDMAP_FROM
    if (doc.contains("raster_thickness")) doc.at("raster_thickness").get_to(cfg.raster.thickness);
    if (doc.contains("fill_crossings")) doc.at("fill_crossings").get_to(cfg.raster.fill_crossings);
    if (doc.contains("extent")) {
      auto e = doc.at("extent").get<std::vector<double>>();
      if (e.size() != 4) {
        throw MapError("config: extent needs 4 values");
      }
      cfg.extent = {e[0], e[1], e[2], e[3]};
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("config: ") + e.what());
  }
}

#undef HDMAP_CONFIG_FIELDS

DecoderModel::DecoderModel(const DecoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t n = cfg.num_queries;
  const std::size_t cq = cfg.query_width;
  const std::size_t l = cfg.points_per_instance;
  const std::size_t r = cfg.rows_per_instance();
  std::uint64_t salt = 0;
  auto next_seed = [&] { return mix_seed(cfg.seed, salt++); };

  // Unit-variance query embeddings.
  instance_embed_ = store_.add("query.instance", {n, cq}, ad::he_normal(n * cq, 2, next_seed()));
  if (cfg.point_queries) {
    point_embed_ = store_.add("query.point", {l, cq}, ad::he_normal(l * cq, 2, next_seed()));
  }

  for (std::size_t k = 0; k < cfg.layers; ++k) {
    const std::string base = "decoder.layer" + std::to_string(k);
    Layer layer;
    layer.query_proj_w = store_.add(base + ".attn.q.weight", {cq, cfg.attn_dim},
                                    ad::he_normal(cq * cfg.attn_dim, cq, next_seed()));
    layer.query_proj_b = store_.add(base + ".attn.q.bias", {cfg.attn_dim},
                                    std::vector<double>(cfg.attn_dim, 0.0));
    layer.key_proj_w = store_.add(base + ".attn.k.weight", {cfg.feature_channels, cfg.attn_dim},
                                  ad::he_normal(cfg.feature_channels * cfg.attn_dim,
                                                cfg.feature_channels, next_seed()));
    layer.key_proj_b = store_.add(base + ".attn.k.bias", {cfg.attn_dim},
                                  std::vector<double>(cfg.attn_dim, 0.0));
    layer.out_proj_w = store_.add(base + ".attn.out.weight", {cfg.feature_channels, cq},
                                  ad::he_normal(cfg.feature_channels * cq, cfg.feature_channels,
                                                next_seed()));
    layer.out_proj_b = store_.add(base + ".attn.out.bias", {cq}, std::vector<double>(cq, 0.0));
    if (cfg.spatial_query) {
      const std::size_t d = 4 * cfg.spatial_frequencies;
      std::vector<double> eye(d * d, 0.0);
      for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = cfg.spatial_init;
      layer.spatial_w = store_.add(base + ".attn.spatial", {d, d}, std::move(eye));
    }
    layer.ffn = ad::Mlp({.widths = {cq, cfg.ffn_hidden, cq}, .seed = next_seed()}, store_,
                        base + ".ffn");
    layers_.push_back(std::move(layer));
  }

  class_head_ = ad::Mlp({.widths = {cq, cq, static_cast<std::size_t>(kNumClasses) + 1},
                         .seed = next_seed()},
                        store_, "head.class");
  point_head_ = ad::Mlp({.widths = {cq, cq, 2 * l / r}, .seed = next_seed()}, store_, "head.point");

  for (std::size_t k = 0; k < cfg.layers; ++k) {
    grl::GrlSpec gs;
    gs.query_width = cq;
    gs.feature_dim = cfg.grl_feature_dim;
    gs.num_queries = n;
    gs.small_rows = cfg.grl_small_rows;
    gs.small_cols = cfg.grl_small_cols;
    gs.conv_hidden = cfg.grl_conv_hidden;
    gs.out_rows = cfg.map_rows;
    gs.out_cols = cfg.map_cols;
    gs.seed = next_seed();
    grl_.emplace_back(gs, store_, "grl.layer" + std::to_string(k));
  }
  const std::size_t grg_count = cfg.share_grg ? 1 : cfg.layers;
  for (std::size_t k = 0; k < grg_count; ++k) {
    grg::GrgSpec gs;
    gs.rows = cfg.map_rows;
    gs.cols = cfg.map_cols;
    gs.global_dim = cfg.global_dim;
    gs.query_width = cq;
    gs.fusion_hidden = {cq};
    gs.weaken = cfg.weaken;
    gs.residual = cfg.grg_residual;
    gs.seed = next_seed();
    grg_.emplace_back(gs, store_, "grg.layer" + std::to_string(k));
  }
}

std::vector<std::string> DecoderModel::global_param_prefixes(std::size_t k) const {
  std::vector<std::string> out{"grl.layer" + std::to_string(k) + "."};
  if (!cfg_.share_grg) {
    out.push_back("grg.layer" + std::to_string(k) + ".");
  }
  return out;
}

void DecoderModel::set_weaken(double c) {
  cfg_.weaken = c;
  for (auto& g : grg_) {
    g.set_weaken(c);
  }
}

InstancePrediction predict_instances(const DecoderModel& model, const Tensor& queries,
                                     const Tensor& instance_queries, const Tensor& prior) {
  const DecoderConfig& cfg = model.config();
  const std::size_t n = cfg.num_queries;
  const std::size_t l = cfg.points_per_instance;
  InstancePrediction out;
  out.class_logits = model.class_head()(instance_queries);
  Tensor raw = ad::reshape(model.point_head()(queries), {n * l, 2});
  const Extent& e = cfg.extent;
  if (prior.defined()) {
    if (prior.shape() != ad::Shape{n * l, 2}) {
      throw MapError("predict_instances: prior must be [n * l, 2]");
    }
    auto pv = prior.values();
    std::vector<double> logit(pv.size());
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double u = (pv[i] - (i % 2 == 0 ? e.x_min : e.y_min)) / (i % 2 == 0 ? e.width() : e.height());
      const double c = std::clamp(u, 1e-4, 1.0 - 1e-4);
      logit[i] = std::log(c / (1.0 - c));
    }
    raw = ad::add(raw, Tensor::constant({n * l, 2}, std::move(logit)));
  }
  const double scale[2] = {e.width(), e.height()};
  const double shift[2] = {e.x_min, e.y_min};
  out.points = ad::affine_cols(ad::sigmoid(raw), scale, shift);
  return out;
}

Tensor position_code(std::span<const Point2> points, const Extent& extent, std::size_t frequencies) {
  const std::size_t d = 4 * frequencies;
  std::vector<double> v(points.size() * d);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double u = 2.0 * (points[i].x - extent.x_min) / extent.width() - 1.0;
    const double w = 2.0 * (points[i].y - extent.y_min) / extent.height() - 1.0;
    for (std::size_t f = 0; f < frequencies; ++f) {
      const double k = std::numbers::pi * static_cast<double>(1u << f);
      double* o = v.data() + i * d + 4 * f;
      o[0] = std::sin(k * u);
      o[1] = std::cos(k * u);
      o[2] = std::sin(k * w);
      o[3] = std::cos(k * w);
    }
  }
  return Tensor::constant({points.size(), d}, std::move(v));
}

namespace {

// One reference point per query row: the mean of the points that row predicts.
std::vector<Point2> row_references(const Tensor& points, std::size_t rows) {
  auto v = points.values();
  const std::size_t per_row = v.size() / 2 / rows;
  std::vector<Point2> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double x = 0.0, y = 0.0;
    for (std::size_t j = 0; j < per_row; ++j) {
      x += v[(r * per_row + j) * 2];
      y += v[(r * per_row + j) * 2 + 1];
    }
    out[r] = {x / static_cast<double>(per_row), y / static_cast<double>(per_row)};
  }
  return out;
}

}  // namespace

DecoderOutput decoder_forward(const DecoderModel& model, const Tensor& bev_features) {
  const DecoderConfig& cfg = model.config();
  if (bev_features.rank() != 3 || bev_features.dim(0) != cfg.feature_channels ||
      bev_features.dim(1) != cfg.feature_rows || bev_features.dim(2) != cfg.feature_cols) {
    throw MapError("decoder_forward: BEV features " + ad::shape_string(bev_features.shape()) +
                   " do not match the configured feature grid");
  }
  const std::size_t n = cfg.num_queries;
  const std::size_t r = cfg.rows_per_instance();
  const std::size_t cf = cfg.feature_channels;
  const std::size_t hw = cfg.feature_rows * cfg.feature_cols;

  // Positions as rows: [H_f * W_f, C_f].
  std::vector<double> flat(hw * cf);
  auto bv = bev_features.values();
  for (std::size_t c = 0; c < cf; ++c) {
    for (std::size_t p = 0; p < hw; ++p) {
      flat[p * cf + c] = bv[c * hw + p];
    }
  }
  const Tensor memory = Tensor::constant({hw, cf}, std::move(flat));
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim));

  DecoderOutput out;
  Tensor q = cfg.point_queries ? ad::add(ad::repeat_each_row(model.instance_embed(), r),
                                         ad::tile_rows(model.point_embed(), n))
                               : model.instance_embed();
  out.initial_queries = q;

  Tensor prior;
  if (cfg.spatial_query || cfg.refine_points) {
    Tensor inst0 = r > 1 ? ad::group_mean_rows(q, r) : q;
    out.initial_points = ad::detach(predict_instances(model, q, inst0).points);
    prior = out.initial_points;
  }

  Tensor grid_code;
  std::vector<Point2> refs;
  if (cfg.spatial_query) {
    const BevGrid grid(cfg.feature_rows, cfg.feature_cols, cfg.extent);
    std::vector<Point2> centers;
    centers.reserve(hw);
    for (std::size_t row = 0; row < cfg.feature_rows; ++row) {
      for (std::size_t col = 0; col < cfg.feature_cols; ++col) {
        centers.push_back(pixel_to_world({static_cast<double>(row), static_cast<double>(col)}, grid));
      }
    }
    grid_code = position_code(centers, cfg.extent, cfg.spatial_frequencies);
    refs = row_references(prior, n * r);
  }

  for (std::size_t k = 0; k < cfg.layers; ++k) {
    const DecoderModel::Layer& layer = model.layers()[k];
    Tensor keys = ad::linear(memory, layer.key_proj_w, layer.key_proj_b);
    Tensor probes = ad::linear(q, layer.query_proj_w, layer.query_proj_b);
    Tensor logits = ad::scale(ad::matmul_nt(probes, keys), inv_sqrt_dk);
    if (cfg.spatial_query) {
      Tensor ref_code = position_code(refs, cfg.extent, cfg.spatial_frequencies);
      logits = ad::add(logits, ad::matmul_nt(ad::matmul(ref_code, layer.spatial_w), grid_code));
      out.reference_points.push_back(refs);
    }
    Tensor attn = ad::softmax_rows(logits);
    Tensor read = ad::linear(ad::matmul(attn, memory), layer.out_proj_w, layer.out_proj_b);
    q = ad::layer_norm_rows(ad::add(q, read));
    q = ad::layer_norm_rows(ad::add(q, layer.ffn(q)));

    LayerOutput lo;
    lo.queries = q;
    lo.instance_queries = r > 1 ? ad::group_mean_rows(q, r) : q;
    InstancePrediction pred = predict_instances(model, lo.queries, lo.instance_queries,
                                                cfg.refine_points ? prior : Tensor{});
    lo.class_logits = pred.class_logits;
    lo.points = pred.points;
    prior = ad::detach(lo.points);
    if (cfg.spatial_query) {
      refs = row_references(prior, q.dim(0));
    }

    if (k < cfg.applied_layers && cfg.runs_grl()) {
      lo.global_logits = model.grl(k)(lo.instance_queries);
      if (cfg.grg_enabled) {
        const grg::GrgModule& guide = model.grg(k);
        Tensor global = guide.encode_global(ad::sigmoid(lo.global_logits));
        Tensor fused = guide.inject_global(lo.instance_queries, global);
        // The fused vector replaces the instance mean; point offsets survive.
        q = r > 1 ? ad::add(q, ad::repeat_each_row(ad::sub(fused, lo.instance_queries), r)) : fused;
      }
    }
    out.layers.push_back(std::move(lo));
  }
  return out;
}

CostMatrix matching_costs(const LayerOutput& pred, const MapScene& gt, const DecoderConfig& cfg) {
  const std::size_t n = cfg.num_queries;
  const std::size_t l = cfg.points_per_instance;
  const std::size_t k = static_cast<std::size_t>(kNumClasses) + 1;
  CostMatrix cost{gt.instances.size(), n, std::vector<double>(gt.instances.size() * n)};

  auto logits = pred.class_logits.values();
  std::vector<double> logp(n * k);
  for (std::size_t j = 0; j < n; ++j) {
    const double* row = logits.data() + j * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      z += std::exp(row[c] - mx);
    }
    for (std::size_t c = 0; c < k; ++c) {
      logp[j * k + c] = row[c] - mx - std::log(z);
    }
  }
  std::vector<std::vector<Point2>> pts(n);
  for (std::size_t j = 0; j < n; ++j) {
    pts[j] = points_of(pred.points, j, l);
  }
  for (std::size_t i = 0; i < gt.instances.size(); ++i) {
    const MapInstance& g = gt.instances[i];
    const auto cls = static_cast<std::size_t>(g.class_id);
    for (std::size_t j = 0; j < n; ++j) {
      cost.values[i * n + j] = cfg.match_point_weight * chamfer_distance(g.points, pts[j]) -
                               cfg.match_class_weight * logp[j * k + cls];
    }
  }
  return cost;
}

MatchResult hungarian_match(const LayerOutput& pred, const MapScene& gt, const DecoderConfig& cfg) {
  if (gt.instances.size() > cfg.num_queries) {
    throw MapError("hungarian_match: scene has more instances than queries");
  }
  return solve_assignment(matching_costs(pred, gt, cfg));
}

DetectionLoss detection_loss(const LayerOutput& pred, const MapScene& gt, const MatchResult& match,
                             const DecoderConfig& cfg) {
  const std::size_t n = cfg.num_queries;
  const std::size_t l = cfg.points_per_instance;
  const std::size_t m = gt.instances.size();
  if (match.assignment.size() != m) {
    throw MapError("detection_loss: match does not cover the scene");
  }
  DetectionLoss out;
  std::vector<Tensor> terms;

  if (m > 0) {
    std::vector<Tensor> per_pair;
    const double unit[2] = {1.0 / cfg.extent.width(), 1.0 / cfg.extent.height()};
    const double no_shift[2] = {0.0, 0.0};
    for (std::size_t i = 0; i < m; ++i) {
      const auto& gpts = gt.instances[i].points;
      if (gpts.size() != l) {
        throw MapError("detection_loss: ground truth has wrong point count");
      }
      std::vector<double> fwd(2 * l), rev(2 * l);
      for (std::size_t j = 0; j < l; ++j) {
        fwd[2 * j] = gpts[j].x;
        fwd[2 * j + 1] = gpts[j].y;
        rev[2 * j] = gpts[l - 1 - j].x;
        rev[2 * j + 1] = gpts[l - 1 - j].y;
      }
      Tensor p = ad::slice_rows(pred.points, match.assignment[i] * l, l);
      if (cfg.point_loss_normalized) {
        for (std::size_t j = 0; j < l; ++j) {
          fwd[2 * j] *= unit[0];
          fwd[2 * j + 1] *= unit[1];
          rev[2 * j] *= unit[0];
          rev[2 * j + 1] *= unit[1];
        }
        p = ad::affine_cols(p, unit, no_shift);
      }
      const double inv_l = 1.0 / static_cast<double>(l);
      Tensor a = ad::scale(ad::sum(ad::abs(ad::sub(p, Tensor::constant({l, 2}, std::move(fwd))))), inv_l);
      Tensor b = ad::scale(ad::sum(ad::abs(ad::sub(p, Tensor::constant({l, 2}, std::move(rev))))), inv_l);
      per_pair.push_back(ad::minimum(a, b));
    }
    Tensor pts = ad::scale(ad::sum(ad::stack(per_pair)), cfg.point_weight / static_cast<double>(m));
    out.point_term = pts.item();
    terms.push_back(pts);
  }

  if (cfg.class_loss) {
    std::vector<bool> matched(n, false);
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    for (std::size_t i = 0; i < m; ++i) {
      matched[match.assignment[i]] = true;
      rows.push_back(match.assignment[i]);
      targets.push_back(static_cast<int>(gt.instances[i].class_id));
    }
    if (!rows.empty()) {
      Tensor ce = ad::scale(ad::cross_entropy(ad::gather_rows(pred.class_logits, rows), targets),
                            cfg.class_weight);
      out.class_term = ce.item();
      terms.push_back(ce);
    }
    std::vector<std::size_t> bg_rows;
    for (std::size_t j = 0; j < n; ++j) {
      if (!matched[j]) {
        bg_rows.push_back(j);
      }
    }
    if (!bg_rows.empty()) {
      std::vector<int> bg(bg_rows.size(), kNumClasses);
      Tensor ce = ad::scale(ad::cross_entropy(ad::gather_rows(pred.class_logits, bg_rows), bg),
                            cfg.background_weight);
      out.background_term = ce.item();
      terms.push_back(ce);
    }
  }

  if (terms.empty()) {
    out.total = Tensor::scalar(0.0);
  } else {
    out.total = terms.size() == 1 ? terms[0] : ad::sum(ad::stack(terms));
  }
  return out;
}

Tensor scene_objective(const DecoderModel& model, const TrainItem& item, LossBreakdown& breakdown) {
  const DecoderConfig& cfg = model.config();
  DecoderOutput fwd = decoder_forward(model, item.features);
  const bool global_active = cfg.grl_enabled && cfg.lambda_global > 0.0;
  breakdown.global_per_layer.assign(cfg.layers, std::numeric_limits<double>::quiet_NaN());
  breakdown.detection_per_layer.assign(cfg.layers, 0.0);

  std::vector<Tensor> terms;
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    const LayerOutput& lo = fwd.layers[k];
    const MatchResult match = hungarian_match(lo, item.scene, cfg);
    DetectionLoss det = detection_loss(lo, item.scene, match, cfg);
    breakdown.detection_per_layer[k] = det.total.item();
    const bool applied = k < cfg.applied_layers && global_active;
    terms.push_back(applied ? ad::scale(det.total, cfg.omega) : det.total);
    if (lo.global_logits.defined()) {
      Tensor g = grl::global_loss(lo.global_logits, item.target);
      breakdown.global_per_layer[k] = g.item();
      if (global_active) {
        terms.push_back(ad::scale(g, cfg.lambda_global));
      }
    }
  }
  Tensor total = ad::sum(ad::stack(terms));
  breakdown.total = total.item();
  return total;
}

LossBreakdown train_step(DecoderModel& model, ad::Adam& optimizer, std::span<const TrainItem> batch) {
  if (batch.empty()) {
    throw MapError("train_step: empty batch");
  }
  const std::size_t layers = model.config().layers;
  LossBreakdown mean;
  mean.global_per_layer.assign(layers, 0.0);
  mean.detection_per_layer.assign(layers, 0.0);

  model.params().zero_grad();
  std::vector<Tensor> objectives;
  for (const TrainItem& item : batch) {
    LossBreakdown b;
    objectives.push_back(scene_objective(model, item, b));
    for (std::size_t k = 0; k < layers; ++k) {
      mean.global_per_layer[k] += b.global_per_layer[k];
      mean.detection_per_layer[k] += b.detection_per_layer[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t k = 0; k < layers; ++k) {
    mean.global_per_layer[k] *= inv;
    mean.detection_per_layer[k] *= inv;
  }
  Tensor loss = ad::scale(ad::sum(ad::stack(objectives)), inv);
  mean.total = loss.item();
  if (!std::isfinite(mean.total)) {
    throw MapError("train_step: non-finite loss (" + std::to_string(mean.total) + ")");
  }
  ad::backward(loss);
  optimizer.step(model.params());
  return mean;
}

}  // namespace hdmap::decoder
