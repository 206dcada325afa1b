#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hdmap {

/// Thrown for any violated precondition in the library. Callers that need to
/// distinguish kinds of failure inspect what().
class MapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

enum class ClassId : int { kDivider = 0, kPedCrossing = 1, kBoundary = 2 };

inline constexpr int kNumClasses = 3;

const char* class_name(ClassId id);
ClassId class_from_int(int value);

/// Axis-aligned BEV rectangle in meters. Membership is closed on all sides.
struct Extent {
  double x_min = -15.0;
  double x_max = 15.0;
  double y_min = -30.0;
  double y_max = 30.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  Point2 center() const { return {0.5 * (x_min + x_max), 0.5 * (y_min + y_max)}; }
  bool contains(Point2 p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
  }

  friend bool operator==(const Extent&, const Extent&) = default;
};

struct MapInstance {
  std::vector<Point2> points;
  ClassId class_id = ClassId::kDivider;

  friend bool operator==(const MapInstance&, const MapInstance&) = default;
};

struct MapScene {
  std::vector<MapInstance> instances;
  Extent extent;

  friend bool operator==(const MapScene&, const MapScene&) = default;
};

/// Throws unless every instance has exactly `points_per_instance` points, all
/// inside the scene extent.
void validate_scene(const MapScene& scene, std::size_t points_per_instance);

/// Raster geometry: rows run along y, columns along x. Pixel centers sit on
/// the extent corners, so row 0 is y_min and row H-1 is y_max.
struct BevGrid {
  std::size_t rows = 64;
  std::size_t cols = 32;
  Extent extent;

  BevGrid() = default;
  BevGrid(std::size_t rows_, std::size_t cols_, Extent extent_ = {});

  double row_pitch() const { return extent.height() / static_cast<double>(rows - 1); }
  double col_pitch() const { return extent.width() / static_cast<double>(cols - 1); }
};

struct PixelCoord {
  double row = 0.0;
  double col = 0.0;
};

PixelCoord world_to_pixel(Point2 p, const BevGrid& grid);
Point2 pixel_to_world(PixelCoord px, const BevGrid& grid);

/// Resamples `points` to `count` points equally spaced by arc length. The
/// first and last input points are reproduced exactly.
std::vector<Point2> resample_polyline(std::span<const Point2> points, std::size_t count);

double polyline_length(std::span<const Point2> points);

/// Symmetric Chamfer distance: half the mean nearest-neighbour distance from
/// A to B plus half the same from B to A.
double chamfer_distance(std::span<const Point2> a, std::span<const Point2> b);

/// Number of points of `scene` lying outside its extent.
std::size_t count_out_of_extent(const MapScene& scene);

}  // namespace hdmap
