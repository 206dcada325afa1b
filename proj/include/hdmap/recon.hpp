#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "hdmap/ad/nn.hpp"
#include "hdmap/raster.hpp"
#include "hdmap/synthetic.hpp"

namespace hdmap::recon {

struct ReconConfig {
  std::size_t train_count = 500;
  std::size_t val_count = 100;
  std::size_t bottleneck = 256;
  std::size_t epochs = 30;
  std::size_t batch_size = 20;
  double lr = 1e-3;
  /// Step budget of the single-raster overfit check.
  std::size_t overfit_steps = 400;
  std::uint64_t seed = 7;
  std::size_t rows = 64;
  std::size_t cols = 32;
  RasterOptions raster;
  SceneGenParams gen;
};

nlohmann::json recon_config_to_json(const ReconConfig& cfg);
ReconConfig recon_config_from_json(const nlohmann::json& doc);

/// flatten -> bottleneck (ReLU) -> flatten-size logits.
class RasterAutoencoder {
 public:
  RasterAutoencoder(std::size_t input_size, std::size_t bottleneck, std::uint64_t seed);

  /// x: [B, input_size] with values in [0,1]; returns logits of the same shape.
  ad::Tensor logits(const ad::Tensor& x) const;
  ad::ParamStore& params() { return store_; }
  std::size_t input_size() const { return encoder_.in_width(); }

 private:
  ad::ParamStore store_;
  ad::Mlp encoder_;
  ad::Mlp decoder_;
};

struct ReconMetrics {
  double train_bce = 0.0;
  double val_bce = 0.0;
  /// BCE of the best single constant probability on the held-out set
  /// (its own foreground rate).
  double constant_bce = 0.0;
  double constant_p = 0.0;
  double val_iou = 0.0;
  std::size_t parameters = 0;
};

/// Pixel-level BCE and foreground IoU at threshold 0.5, pooled over masks.
struct MaskScores {
  double bce = 0.0;
  double iou = 0.0;
};
MaskScores score_masks(const RasterAutoencoder& model, std::span<const RasterMask> masks);

/// Best constant predictor on `masks`: p = foreground rate, BCE = H(p).
MaskScores constant_baseline(std::span<const RasterMask> masks, double* p_out = nullptr);

/// Trains on `train` (seeded shuffling, Adam) and scores `val`.
ReconMetrics train_autoencoder(std::span<const RasterMask> train, std::span<const RasterMask> val,
                               const ReconConfig& cfg);

/// Trains on a single raster until IoU on it exceeds 0.999 or the step
/// budget runs out; returns the final IoU.
double overfit_single(const RasterMask& mask, const ReconConfig& cfg);

/// Rasterizes cfg.train_count + cfg.val_count generated scenes (disjoint
/// seeds), then trains and scores.
ReconMetrics reconstruction_experiment(const ReconConfig& cfg);
std::vector<RasterMask> make_rasters(std::uint64_t first_seed, std::size_t count,
                                     const ReconConfig& cfg);

}  // namespace hdmap::recon
