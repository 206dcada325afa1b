#include "hdmap/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hdmap {

const char* class_name(ClassId id) {
  switch (id) {
    case ClassId::kDivider:
      return "divider";
    case ClassId::kPedCrossing:
      return "ped_crossing";
    case ClassId::kBoundary:
      return "boundary";
  }
  return "unknown";
}

ClassId class_from_int(int value) {
  if (value < 0 || value >= kNumClasses) {
    throw MapError("class_id out of range: " + std::to_string(value));
  }
  return static_cast<ClassId>(value);
}

void validate_scene(const MapScene& scene, std::size_t points_per_instance) {
  const Extent& e = scene.extent;
  if (!(e.x_max > e.x_min) || !(e.y_max > e.y_min)) {
    throw MapError("scene extent is empty");
  }
  for (std::size_t i = 0; i < scene.instances.size(); ++i) {
    const MapInstance& inst = scene.instances[i];
    if (inst.points.size() != points_per_instance) {
      throw MapError("instance " + std::to_string(i) + " has " +
                     std::to_string(inst.points.size()) + " points, expected " +
                     std::to_string(points_per_instance));
    }
    class_from_int(static_cast<int>(inst.class_id));
    for (const Point2& p : inst.points) {
      if (!e.contains(p)) {
        throw MapError("instance " + std::to_string(i) + " leaves the extent");
      }
    }
  }
}

BevGrid::BevGrid(std::size_t rows_, std::size_t cols_, Extent extent_)
    : rows(rows_), cols(cols_), extent(extent_) {
  if (rows < 2 || cols < 2) {
    throw MapError("BevGrid needs at least 2 rows and 2 columns");
  }
  if (!(extent.x_max > extent.x_min) || !(extent.y_max > extent.y_min)) {
    throw MapError("BevGrid extent is empty");
  }
}

PixelCoord world_to_pixel(Point2 p, const BevGrid& grid) {
  const Extent& e = grid.extent;
  if (!e.contains(p)) {
    throw MapError("world_to_pixel: point outside extent");
  }
  return {(p.y - e.y_min) / e.height() * static_cast<double>(grid.rows - 1),
          (p.x - e.x_min) / e.width() * static_cast<double>(grid.cols - 1)};
}

Point2 pixel_to_world(PixelCoord px, const BevGrid& grid) {
  const Extent& e = grid.extent;
  return {e.x_min + px.col / static_cast<double>(grid.cols - 1) * e.width(),
          e.y_min + px.row / static_cast<double>(grid.rows - 1) * e.height()};
}

double polyline_length(std::span<const Point2> points) {
  double total = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    total += std::hypot(points[i].x - points[i - 1].x, points[i].y - points[i - 1].y);
  }
  return total;
}

std::vector<Point2> resample_polyline(std::span<const Point2> points, std::size_t count) {
  if (points.size() < 2) {
    throw MapError("resample_polyline: need at least 2 input points");
  }
  if (count < 2) {
    throw MapError("resample_polyline: need at least 2 output points");
  }
  std::vector<double> cumulative(points.size(), 0.0);
  for (std::size_t i = 1; i < points.size(); ++i) {
    cumulative[i] = cumulative[i - 1] +
                    std::hypot(points[i].x - points[i - 1].x, points[i].y - points[i - 1].y);
  }
  const double total = cumulative.back();
  if (!(total > 0.0)) {
    throw MapError("resample_polyline: degenerate polyline (zero length)");
  }

  std::vector<Point2> out;
  out.reserve(count);
  out.push_back(points.front());
  std::size_t seg = 1;
  for (std::size_t k = 1; k + 1 < count; ++k) {
    const double s = total * static_cast<double>(k) / static_cast<double>(count - 1);
    while (seg + 1 < points.size() && cumulative[seg] < s) {
      ++seg;
    }
    const double seg_len = cumulative[seg] - cumulative[seg - 1];
    const double t = seg_len > 0.0 ? (s - cumulative[seg - 1]) / seg_len : 0.0;
    const Point2& a = points[seg - 1];
    const Point2& b = points[seg];
    out.push_back({a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)});
  }
  out.push_back(points.back());
  return out;
}

namespace {

double directed_mean_nn(std::span<const Point2> from, std::span<const Point2> to) {
  double sum = 0.0;
  for (const Point2& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Point2& b : to) {
      best = std::min(best, std::hypot(a.x - b.x, a.y - b.y));
    }
    sum += best;
  }
  return sum / static_cast<double>(from.size());
}

}  // namespace

double chamfer_distance(std::span<const Point2> a, std::span<const Point2> b) {
  if (a.empty() || b.empty()) {
    throw MapError("chamfer_distance: empty point set");
  }
  return 0.5 * directed_mean_nn(a, b) + 0.5 * directed_mean_nn(b, a);
}

std::size_t count_out_of_extent(const MapScene& scene) {
  std::size_t n = 0;
  for (const MapInstance& inst : scene.instances) {
    for (const Point2& p : inst.points) {
      n += scene.extent.contains(p) ? 0 : 1;
    }
  }
  return n;
}

}  // namespace hdmap
