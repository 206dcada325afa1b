#include "hdmap/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hdmap/raster.hpp"

namespace hdmap {

namespace {

std::vector<Point2> quadratic_curve(std::mt19937_64& rng, const Extent& e, double center_lo,
                                    double center_hi, double max_bend) {
  std::uniform_real_distribution<double> center(center_lo, center_hi);
  std::uniform_real_distribution<double> slope(-2.0, 2.0);
  std::uniform_real_distribution<double> bend(-max_bend, max_bend);
  const double a = center(rng);
  const double b = slope(rng);
  const double c = bend(rng);
  const double mid = 0.5 * (e.y_min + e.y_max);
  const double half = 0.5 * e.height();

  constexpr int kSamples = 97;
  std::vector<Point2> best, run;
  for (int i = 0; i < kSamples; ++i) {
    const double y = e.y_min + e.height() * i / (kSamples - 1);
    const double t = (y - mid) / half;
    const double x = a + b * t + c * t * t;
    if (x >= e.x_min && x <= e.x_max) {
      run.push_back({x, y});
    } else {
      if (run.size() > best.size()) best = run;
      run.clear();
    }
  }
  if (run.size() > best.size()) best = run;
  return best;
}

std::vector<Point2> crossing_outline(std::mt19937_64& rng, const Extent& e) {
  std::uniform_real_distribution<double> width(8.0, std::min(20.0, e.width() - 2.0));
  std::uniform_real_distribution<double> depth(3.0, 5.0);
  const double w = width(rng);
  const double d = depth(rng);
  std::uniform_real_distribution<double> cx(e.x_min + 0.5 * w + 0.5, e.x_max - 0.5 * w - 0.5);
  std::uniform_real_distribution<double> cy(e.y_min + 0.5 * d + 1.0, e.y_max - 0.5 * d - 1.0);
  const double x = cx(rng);
  const double y = cy(rng);
  return {{x - 0.5 * w, y - 0.5 * d},
          {x + 0.5 * w, y - 0.5 * d},
          {x + 0.5 * w, y + 0.5 * d},
          {x - 0.5 * w, y + 0.5 * d},
          {x - 0.5 * w, y - 0.5 * d}};
}

// Samples the resampled points can drift outside a closed extent by an ulp.
void clamp_into(std::vector<Point2>& pts, const Extent& e) {
  for (Point2& p : pts) {
    p.x = std::clamp(p.x, e.x_min, e.x_max);
    p.y = std::clamp(p.y, e.y_min, e.y_max);
  }
}

}  // namespace

MapScene generate_synthetic_scene(std::uint64_t seed, const SceneGenParams& params) {
  if (params.min_instances > params.max_instances) {
    throw MapError("SceneGenParams: min_instances > max_instances");
  }
  const Extent& e = params.extent;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> count(params.min_instances, params.max_instances);
  std::discrete_distribution<int> pick(params.class_mix.begin(), params.class_mix.end());

  MapScene scene;
  scene.extent = e;
  const std::size_t m = count(rng);
  const double min_length = 0.25 * e.height();
  while (scene.instances.size() < m) {
    const auto cls = static_cast<ClassId>(pick(rng));
    std::vector<Point2> raw;
    if (cls == ClassId::kPedCrossing) {
      raw = crossing_outline(rng, e);
    } else if (cls == ClassId::kDivider) {
      raw = quadratic_curve(rng, e, e.x_min + 0.2 * e.width(), e.x_max - 0.2 * e.width(),
                            params.max_bend);
    } else {
      std::bernoulli_distribution left(0.5);
      const bool on_left = left(rng);
      const double lo = on_left ? e.x_min + 0.03 * e.width() : e.x_max - 0.2 * e.width();
      const double hi = on_left ? e.x_min + 0.2 * e.width() : e.x_max - 0.03 * e.width();
      raw = quadratic_curve(rng, e, lo, hi, params.max_bend);
    }
    if (raw.size() < 2 || polyline_length(raw) < min_length) {
      continue;  // curve left the extent too early; draw again
    }
    MapInstance inst;
    inst.class_id = cls;
    inst.points = resample_polyline(raw, params.points_per_instance);
    clamp_into(inst.points, e);
    scene.instances.push_back(std::move(inst));
  }
  return scene;
}

std::size_t feature_channel_count(const FeatureParams& params) {
  return kNumClasses + 2 + 4 * params.frequencies;
}

namespace {

std::vector<double> gaussian_taps(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) {
    taps[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  }
  return taps;
}

// Separable blur with weights renormalized at the borders.
void blur_channel(std::vector<double>& img, std::size_t rows, std::size_t cols, double sigma) {
  const auto taps = gaussian_taps(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(taps.size() / 2);
  const auto R = static_cast<std::ptrdiff_t>(rows);
  const auto C = static_cast<std::ptrdiff_t>(cols);
  std::vector<double> tmp(img.size());
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double acc = 0.0, wsum = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const std::ptrdiff_t cc = c + k;
        if (cc < 0 || cc >= C) continue;
        const double w = taps[static_cast<std::size_t>(k + radius)];
        acc += w * img[static_cast<std::size_t>(r * C + cc)];
        wsum += w;
      }
      tmp[static_cast<std::size_t>(r * C + c)] = acc / wsum;
    }
  }
  for (std::ptrdiff_t r = 0; r < R; ++r) {
    for (std::ptrdiff_t c = 0; c < C; ++c) {
      double acc = 0.0, wsum = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        const std::ptrdiff_t rr = r + k;
        if (rr < 0 || rr >= R) continue;
        const double w = taps[static_cast<std::size_t>(k + radius)];
        acc += w * tmp[static_cast<std::size_t>(rr * C + c)];
        wsum += w;
      }
      img[static_cast<std::size_t>(r * C + c)] = acc / wsum;
    }
  }
}

}  // namespace

ad::Tensor synthesize_bev_features(const MapScene& scene, const FeatureParams& params,
                                   std::uint64_t seed) {
  if (params.noise < 0.0 || params.blur < 0.0) {
    throw MapError("FeatureParams: noise and blur must be non-negative");
  }
  const BevGrid grid(params.rows, params.cols, scene.extent);
  const std::size_t hw = params.rows * params.cols;
  const std::size_t channels = feature_channel_count(params);
  std::vector<double> out(channels * hw, 0.0);

  RasterMask mask = rasterize_scene(scene, grid, {.thickness = params.thickness});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t c = 0; c < static_cast<std::size_t>(kNumClasses); ++c) {
    std::vector<double> img(mask.data().begin() + static_cast<std::ptrdiff_t>(c * hw),
                            mask.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * hw));
    if (params.blur > 0.0) {
      blur_channel(img, params.rows, params.cols, params.blur);
    }
    for (std::size_t i = 0; i < hw; ++i) {
      out[c * hw + i] = params.gain * img[i] + (params.noise > 0.0 ? params.noise * gauss(rng) : 0.0);
    }
  }

  std::size_t ch = kNumClasses;
  for (std::size_t r = 0; r < params.rows; ++r) {
    for (std::size_t c = 0; c < params.cols; ++c) {
      const double u = 2.0 * static_cast<double>(c) / static_cast<double>(params.cols - 1) - 1.0;
      const double v = 2.0 * static_cast<double>(r) / static_cast<double>(params.rows - 1) - 1.0;
      const std::size_t p = r * params.cols + c;
      out[ch * hw + p] = u;
      out[(ch + 1) * hw + p] = v;
      for (std::size_t f = 0; f < params.frequencies; ++f) {
        const double w = std::numbers::pi * static_cast<double>(1u << f);
        const std::size_t base = ch + 2 + 4 * f;
        out[base * hw + p] = std::sin(w * u);
        out[(base + 1) * hw + p] = std::cos(w * u);
        out[(base + 2) * hw + p] = std::sin(w * v);
        out[(base + 3) * hw + p] = std::cos(w * v);
      }
    }
  }
  return ad::Tensor::constant({channels, params.rows, params.cols}, std::move(out));
}

}  // namespace hdmap
