#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "hdmap/ad/nn.hpp"
#include "hdmap/raster.hpp"

namespace hdmap::grl {

using ad::Tensor;

/// Global representation head: every instance query is projected to a small
/// spatial map, the maps are stacked along a channel axis, mixed by a small
/// conv stack and upsampled to the BEV grid.
struct GrlSpec {
  std::size_t query_width = 64;   // C_q
  std::size_t feature_dim = 128;  // hidden width of the projection MLP
  std::size_t num_queries = 16;   // n, input channels of the conv stack
  std::size_t small_rows = 8;     // h
  std::size_t small_cols = 4;     // w
  std::size_t conv_hidden = 32;
  std::size_t conv_kernel = 3;
  std::size_t classes = kNumClasses;
  std::size_t out_rows = 64;  // H
  std::size_t out_cols = 32;  // W
  std::uint64_t seed = 0;
};

class GrlHead {
 public:
  GrlHead() = default;
  GrlHead(const GrlSpec& spec, ad::ParamStore& store, const std::string& prefix);

  const GrlSpec& spec() const { return spec_; }

  /// [n, C_q] -> [n, h, w]; row i of the result comes from query i only.
  Tensor project_and_stack(const Tensor& queries) const;
  /// [n, h, w] -> logits [C, H, W]. sigmoid(logits) is the predicted map.
  Tensor predict_global_map(const Tensor& stack) const;
  Tensor operator()(const Tensor& queries) const {
    return predict_global_map(project_and_stack(queries));
  }

  ad::Mlp& projection() { return projection_; }
  ad::Conv2dLayer& conv_hidden() { return conv1_; }
  ad::Conv2dLayer& conv_out() { return conv2_; }

 private:
  GrlSpec spec_;
  ad::Mlp projection_;
  ad::Conv2dLayer conv1_;
  ad::Conv2dLayer conv2_;
};

/// Elementwise mean of l point queries of equal width.
Tensor pool_point_queries(std::span<const Tensor> points);

Tensor mask_to_tensor(const RasterMask& mask);
RasterMask tensor_to_mask(const Tensor& values);

/// Mean BCE between logits [C,H,W] and the ground-truth raster.
Tensor global_loss(const Tensor& logits, const RasterMask& gt);

/// sigmoid(logits) as a RasterMask, for dumps and metrics.
RasterMask predicted_map(const Tensor& logits);

}  // namespace hdmap::grl
