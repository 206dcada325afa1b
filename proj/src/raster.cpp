#include "hdmap/raster.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hdmap {

RasterMask::RasterMask(std::size_t channels, std::size_t rows, std::size_t cols, double fill)
    : channels_(channels), rows_(rows), cols_(cols), data_(channels * rows * cols, fill) {}

bool RasterMask::is_binary() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

double RasterMask::foreground_fraction() const {
  if (data_.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (double v : data_) {
    sum += v;
  }
  return sum / static_cast<double>(data_.size());
}

namespace {

// Squared distance from (r, c) to segment a-b, all in pixel units.
double segment_dist2(double r, double c, const PixelCoord& a, const PixelCoord& b) {
  const double dr = b.row - a.row;
  const double dc = b.col - a.col;
  const double len2 = dr * dr + dc * dc;
  double t = 0.0;
  if (len2 > 0.0) {
    t = std::clamp(((r - a.row) * dr + (c - a.col) * dc) / len2, 0.0, 1.0);
  }
  const double er = r - (a.row + t * dr);
  const double ec = c - (a.col + t * dc);
  return er * er + ec * ec;
}

bool inside_polygon(double r, double c, const std::vector<PixelCoord>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const PixelCoord& a = poly[i];
    const PixelCoord& b = poly[j];
    if ((a.row > r) != (b.row > r)) {
      const double cross = a.col + (r - a.row) / (b.row - a.row) * (b.col - a.col);
      if (c < cross) {
        inside = !inside;
      }
    }
  }
  return inside;
}

void draw_instance(const MapInstance& inst, const BevGrid& grid, const RasterOptions& opts,
                   RasterMask& out, std::size_t channel) {
  if (!(opts.thickness >= 1.0)) {
    throw MapError("rasterize: thickness must be at least 1 pixel");
  }
  if (inst.points.size() < 2) {
    throw MapError("rasterize: instance needs at least 2 points");
  }
  std::vector<PixelCoord> px;
  px.reserve(inst.points.size());
  for (const Point2& p : inst.points) {
    px.push_back(world_to_pixel(p, grid));
  }
  const bool degenerate = std::all_of(px.begin(), px.end(), [&](const PixelCoord& q) {
    return q.row == px.front().row && q.col == px.front().col;
  });
  if (degenerate) {
    throw MapError("rasterize: degenerate instance (all points coincide)");
  }

  const double radius = 0.5 * opts.thickness;
  const double r2 = radius * radius;
  const auto max_row = static_cast<double>(grid.rows - 1);
  const auto max_col = static_cast<double>(grid.cols - 1);
  for (std::size_t s = 1; s < px.size(); ++s) {
    const PixelCoord& a = px[s - 1];
    const PixelCoord& b = px[s];
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::ceil(std::min(a.row, b.row) - radius)));
    const auto r1 = static_cast<std::size_t>(std::min(max_row, std::floor(std::max(a.row, b.row) + radius)));
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::ceil(std::min(a.col, b.col) - radius)));
    const auto c1 = static_cast<std::size_t>(std::min(max_col, std::floor(std::max(a.col, b.col) + radius)));
    for (std::size_t r = r0; r <= r1; ++r) {
      for (std::size_t c = c0; c <= c1; ++c) {
        if (segment_dist2(static_cast<double>(r), static_cast<double>(c), a, b) <= r2) {
          out.at(channel, r, c) = 1.0;
        }
      }
    }
  }

  if (opts.fill_crossings && inst.class_id == ClassId::kPedCrossing && px.size() >= 3) {
    for (std::size_t r = 0; r < grid.rows; ++r) {
      for (std::size_t c = 0; c < grid.cols; ++c) {
        if (inside_polygon(static_cast<double>(r), static_cast<double>(c), px)) {
          out.at(channel, r, c) = 1.0;
        }
      }
    }
  }
}

}  // namespace

RasterMask rasterize_instance(const MapInstance& inst, const BevGrid& grid,
                              const RasterOptions& opts) {
  RasterMask out(1, grid.rows, grid.cols);
  draw_instance(inst, grid, opts, out, 0);
  return out;
}

RasterMask rasterize_scene(const MapScene& scene, const BevGrid& grid, const RasterOptions& opts) {
  RasterMask out(kNumClasses, grid.rows, grid.cols);
  for (const MapInstance& inst : scene.instances) {
    draw_instance(inst, grid, opts, out, static_cast<std::size_t>(inst.class_id));
  }
  return out;
}

std::string mask_to_pgm(const RasterMask& mask, int maxval) {
  std::ostringstream os;
  for (std::size_t ch = 0; ch < mask.channels(); ++ch) {
    os << "P2\n# channel " << ch << "\n" << mask.cols() << " " << mask.rows() << "\n" << maxval << "\n";
    for (std::size_t r = 0; r < mask.rows(); ++r) {
      for (std::size_t c = 0; c < mask.cols(); ++c) {
        const double v = std::clamp(mask.at(ch, r, c), 0.0, 1.0);
        os << (c ? " " : "") << static_cast<int>(std::lround(v * maxval));
      }
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace hdmap
