#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hdmap/geometry.hpp"

namespace hdmap {

/// C x H x W grid of values, row-major within each channel. Ground-truth
/// masks hold only 0 and 1; predicted masks hold probabilities.
class RasterMask {
 public:
  RasterMask() = default;
  RasterMask(std::size_t channels, std::size_t rows, std::size_t cols, double fill = 0.0);

  std::size_t channels() const { return channels_; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& at(std::size_t c, std::size_t r, std::size_t col) {
    return data_[(c * rows_ + r) * cols_ + col];
  }
  double at(std::size_t c, std::size_t r, std::size_t col) const {
    return data_[(c * rows_ + r) * cols_ + col];
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool is_binary() const;
  double foreground_fraction() const;

  friend bool operator==(const RasterMask&, const RasterMask&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct RasterOptions {
  /// Stroke width in pixels; a pixel is set when its center lies within
  /// thickness / 2 of the polyline.
  double thickness = 1.5;
  /// When set, pedestrian crossings are additionally filled as polygons.
  /// Off by default: crossings are drawn as their boundary polyline.
  bool fill_crossings = false;
};

/// Single-channel H x W binary mask for one instance.
RasterMask rasterize_instance(const MapInstance& inst, const BevGrid& grid,
                              const RasterOptions& opts = {});

/// kNumClasses-channel mask; channel c is the union of all class-c instances.
RasterMask rasterize_scene(const MapScene& scene, const BevGrid& grid,
                           const RasterOptions& opts = {});

/// Plain-text PGM (P2) dump, one image per channel separated by a comment
/// line. Values are scaled by `maxval` and rounded.
std::string mask_to_pgm(const RasterMask& mask, int maxval = 1);

}  // namespace hdmap
