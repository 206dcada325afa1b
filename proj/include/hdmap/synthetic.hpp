#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "hdmap/ad/tensor.hpp"
#include "hdmap/geometry.hpp"

namespace hdmap {

struct SceneGenParams {
  Extent extent;
  std::size_t points_per_instance = 8;
  std::size_t min_instances = 2;
  std::size_t max_instances = 8;
  /// Bound on the quadratic coefficient of divider/boundary curves, in
  /// meters of lateral bend over the half-length of the extent.
  double max_bend = 4.0;
  /// Sampling probabilities for divider, ped_crossing, boundary.
  std::array<double, kNumClasses> class_mix{0.45, 0.2, 0.35};
};

/// Deterministic per seed. Dividers and boundaries are quadratic curves
/// x(y) running the length of the extent (clipped to it); crossings are the
/// closed outline of a transverse rectangle. Every instance is resampled to
/// points_per_instance points.
MapScene generate_synthetic_scene(std::uint64_t seed, const SceneGenParams& params = {});

struct FeatureParams {
  std::size_t rows = 32;
  std::size_t cols = 16;
  double noise = 0.1;        // Gaussian sigma added to the raster channels
  double blur = 1.0;         // Gaussian blur sigma in pixels, 0 = none
  double gain = 1.0;         // multiplies the blurred raster before noise
  double thickness = 1.0;    // raster stroke width in feature pixels
  std::size_t frequencies = 3;  // sin/cos positional channels per axis
};

/// 3 raster + 2 coordinate + 4 * frequencies positional channels.
std::size_t feature_channel_count(const FeatureParams& params);

/// [C_f, rows, cols] constant tensor: blurred class rasters plus seeded noise,
/// followed by normalized coordinate and sinusoidal position channels.
ad::Tensor synthesize_bev_features(const MapScene& scene, const FeatureParams& params,
                                   std::uint64_t seed);

}  // namespace hdmap
