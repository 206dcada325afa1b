#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmap/ad/nn.hpp"
#include "hdmap/geometry.hpp"
#include "hdmap/grg.hpp"
#include "hdmap/grl.hpp"
#include "hdmap/matching.hpp"
#include "hdmap/raster.hpp"

namespace hdmap::decoder {

using ad::Tensor;

struct DecoderConfig {
  std::size_t layers = 6;          // L
  std::size_t applied_layers = 2;  // N: GRL/GRG run on layer indices < N
  std::size_t num_queries = 16;    // n
  std::size_t query_width = 64;    // C_q
  std::size_t points_per_instance = 8;  // l
  /// Each instance carries l point queries; the instance query is their mean.
  bool point_queries = true;
  std::size_t attn_dim = 16;
  std::size_t ffn_hidden = 64;
  /// Adds PE(reference point) W PE(position) to the attention logits, with
  /// reference points taken from the previous layer's (detached) predictions.
  bool spatial_query = true;
  std::size_t spatial_frequencies = 4;
  double spatial_init = 0.5;
  /// Each layer's point head predicts a logit-space offset from the previous
  /// layer's (detached) points instead of absolute coordinates.
  bool refine_points = true;

  // Synthetic BEV feature grid [C_f, H_f, W_f].
  std::size_t feature_channels = 17;
  std::size_t feature_rows = 32;
  std::size_t feature_cols = 16;

  bool grl_enabled = true;
  bool grg_enabled = true;
  std::size_t grl_feature_dim = 128;
  std::size_t grl_small_rows = 8;
  std::size_t grl_small_cols = 4;
  std::size_t grl_conv_hidden = 32;
  std::size_t global_dim = 256;
  /// One GRG fusion per applied layer unless shared.
  bool share_grg = false;
  /// Fusion adds a zero-initialized update to the query instead of
  /// replacing it.
  bool grg_residual = true;

  double lambda_global = 1.0;
  /// Detection-loss weight on applied layers while GRL is enabled.
  double omega = 0.1;
  double weaken = 0.8;

  // Global map target.
  std::size_t map_rows = 64;
  std::size_t map_cols = 32;
  RasterOptions raster;
  Extent extent;

  // Detection loss and matching.
  double point_weight = 5.0;
  /// Point L1 on coordinates divided by the extent size instead of meters.
  bool point_loss_normalized = true;
  double class_weight = 1.0;
  double background_weight = 1.0;
  bool class_loss = true;
  double match_point_weight = 1.0;
  double match_class_weight = 1.0;

  std::uint64_t seed = 0;

  std::size_t rows_per_instance() const { return point_queries ? points_per_instance : 1; }
  bool runs_grl() const { return grl_enabled || grg_enabled; }
  void validate() const;
};

nlohmann::json config_to_json(const DecoderConfig& cfg);
/// Fields missing from `doc` keep the values already in `cfg`.
void config_from_json(const nlohmann::json& doc, DecoderConfig& cfg);

/// All trainable state of the toy decoder.
class DecoderModel {
 public:
  struct Layer {
    Tensor query_proj_w, query_proj_b;  // C_q -> d_k
    Tensor key_proj_w, key_proj_b;      // C_f -> d_k
    Tensor out_proj_w, out_proj_b;      // C_f -> C_q
    Tensor spatial_w;                   // [4F, 4F]; undefined without spatial_query
    ad::Mlp ffn;
  };

  explicit DecoderModel(const DecoderConfig& cfg);

  const DecoderConfig& config() const { return cfg_; }
  DecoderConfig& mutable_config() { return cfg_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }

  const Tensor& instance_embed() const { return instance_embed_; }
  const Tensor& point_embed() const { return point_embed_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const ad::Mlp& class_head() const { return class_head_; }
  const ad::Mlp& point_head() const { return point_head_; }
  ad::Mlp& class_head() { return class_head_; }
  ad::Mlp& point_head() { return point_head_; }

  /// GRL head / GRG module owned by decoder layer k (every layer owns one;
  /// only layers < N ever read theirs).
  const grl::GrlHead& grl(std::size_t k) const { return grl_[k]; }
  const grg::GrgModule& grg(std::size_t k) const { return grg_[cfg_.share_grg ? 0 : k]; }
  grl::GrlHead& grl(std::size_t k) { return grl_[k]; }
  grg::GrgModule& grg(std::size_t k) { return grg_[cfg_.share_grg ? 0 : k]; }
  /// Parameter name prefixes of the GRL/GRG modules owned by layer k.
  std::vector<std::string> global_param_prefixes(std::size_t k) const;

  void set_weaken(double c);

 private:
  DecoderConfig cfg_;
  ad::ParamStore store_;
  Tensor instance_embed_;
  Tensor point_embed_;
  std::vector<Layer> layers_;
  ad::Mlp class_head_;
  ad::Mlp point_head_;
  std::vector<grl::GrlHead> grl_;
  std::vector<grg::GrgModule> grg_;
};

/// Per-layer outputs. `queries` is the layer output before any global
/// guidance rewrites it for the next layer.
struct LayerOutput {
  Tensor queries;           // [n * rows_per_instance, C_q]
  Tensor instance_queries;  // [n, C_q]
  Tensor class_logits;      // [n, C + 1]; column C is background
  Tensor points;            // [n * l, 2] in meters
  Tensor global_logits;     // [C, H, W]; undefined when GRL did not run
};

/// [rows, 4F] sinusoidal code of normalized (x, y); the dot product of two
/// codes is a sum of cosines of the coordinate differences.
Tensor position_code(std::span<const Point2> points, const Extent& extent, std::size_t frequencies);

struct DecoderOutput {
  Tensor initial_queries;
  /// Points predicted from the initial queries; layer 0 refines these.
  Tensor initial_points;
  /// Reference point of every query row, per layer (empty without spatial_query).
  std::vector<std::vector<Point2>> reference_points;
  std::vector<LayerOutput> layers;
};

DecoderOutput decoder_forward(const DecoderModel& model, const Tensor& bev_features);

struct InstancePrediction {
  Tensor class_logits;  // [n, C + 1]
  Tensor points;        // [n * l, 2]
};

/// Runs the shared heads on a layer's queries. A defined `prior` [n * l, 2]
/// (meters) is added to the point head output in logit space.
InstancePrediction predict_instances(const DecoderModel& model, const Tensor& queries,
                                     const Tensor& instance_queries, const Tensor& prior = {});

/// Pair cost = match_point_weight * chamfer + match_class_weight * (-log p(gt class)).
CostMatrix matching_costs(const LayerOutput& pred, const MapScene& gt, const DecoderConfig& cfg);
MatchResult hungarian_match(const LayerOutput& pred, const MapScene& gt, const DecoderConfig& cfg);

struct DetectionLoss {
  Tensor total;
  double point_term = 0.0;       // weighted
  double class_term = 0.0;       // weighted
  double background_term = 0.0;  // weighted
};

DetectionLoss detection_loss(const LayerOutput& pred, const MapScene& gt, const MatchResult& match,
                             const DecoderConfig& cfg);

/// One training example: scene, its synthetic features and its raster target.
struct TrainItem {
  MapScene scene;
  Tensor features;
  RasterMask target;
};

struct LossBreakdown {
  std::vector<double> global_per_layer;  // NaN where GRL did not run
  std::vector<double> detection_per_layer;
  double total = 0.0;
};

/// Builds the full objective for one scene; `breakdown` receives the
/// per-layer values.
Tensor scene_objective(const DecoderModel& model, const TrainItem& item, LossBreakdown& breakdown);

/// Mean objective over the batch, one backward pass, one optimizer update.
/// Throws MapError when the loss is not finite.
LossBreakdown train_step(DecoderModel& model, ad::Adam& optimizer, std::span<const TrainItem> batch);

}  // namespace hdmap::decoder
