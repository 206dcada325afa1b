#include "hdmap/grl.hpp"

#include <vector>

namespace hdmap::grl {

GrlHead::GrlHead(const GrlSpec& spec, ad::ParamStore& store, const std::string& prefix)
    : spec_(spec) {
  if (spec.classes == 0 || spec.num_queries == 0) {
    throw MapError("GrlSpec: classes and num_queries must be positive");
  }
  projection_ = ad::Mlp({.widths = {spec.query_width, spec.feature_dim, spec.small_rows * spec.small_cols},
                         .seed = spec.seed * 7 + 1},
                        store, prefix + ".proj");
  conv1_ = ad::Conv2dLayer(spec.num_queries, spec.conv_hidden, spec.conv_kernel, spec.seed * 7 + 2,
                           store, prefix + ".phi0");
  conv2_ = ad::Conv2dLayer(spec.conv_hidden, spec.classes, spec.conv_kernel, spec.seed * 7 + 3,
                           store, prefix + ".phi1");
}

Tensor GrlHead::project_and_stack(const Tensor& queries) const {
  if (queries.rank() != 2 || queries.dim(1) != spec_.query_width) {
    throw MapError("project_and_stack: expected [n, " + std::to_string(spec_.query_width) +
                   "] queries, got " + ad::shape_string(queries.shape()));
  }
  // One MLP row per query, then view each row as an h x w map.
  Tensor flat = projection_(queries);
  return ad::reshape(flat, {queries.dim(0), spec_.small_rows, spec_.small_cols});
}

Tensor GrlHead::predict_global_map(const Tensor& stack) const {
  if (stack.rank() != 3 || stack.dim(0) != spec_.num_queries) {
    throw MapError("predict_global_map: expected " + std::to_string(spec_.num_queries) +
                   " stacked maps, got " + ad::shape_string(stack.shape()));
  }
  Tensor h = ad::relu(conv1_(stack));
  Tensor small = conv2_(h);
  return ad::bilinear_upsample(small, spec_.out_rows, spec_.out_cols);
}

Tensor pool_point_queries(std::span<const Tensor> points) {
  if (points.empty()) {
    throw MapError("pool_point_queries: no point queries");
  }
  std::vector<Tensor> rows;
  rows.reserve(points.size());
  for (const Tensor& p : points) {
    if (p.rank() != 1 || p.dim(0) != points[0].dim(0)) {
      throw MapError("pool_point_queries: point queries must be equal-width vectors");
    }
    rows.push_back(ad::reshape(p, {1, p.dim(0)}));
  }
  Tensor pooled = ad::group_mean_rows(ad::concat0(rows), rows.size());
  return ad::reshape(pooled, {points[0].dim(0)});
}

Tensor mask_to_tensor(const RasterMask& mask) {
  return Tensor::constant({mask.channels(), mask.rows(), mask.cols()}, mask.data());
}

RasterMask tensor_to_mask(const Tensor& values) {
  if (values.rank() != 3) {
    throw MapError("tensor_to_mask: expected [C,H,W]");
  }
  RasterMask out(values.dim(0), values.dim(1), values.dim(2));
  std::copy(values.values().begin(), values.values().end(), out.data().begin());
  return out;
}

Tensor global_loss(const Tensor& logits, const RasterMask& gt) {
  if (logits.rank() != 3 || logits.dim(0) != gt.channels() || logits.dim(1) != gt.rows() ||
      logits.dim(2) != gt.cols()) {
    throw MapError("global_loss: logits " + ad::shape_string(logits.shape()) +
                   " do not match mask [" + std::to_string(gt.channels()) + "," +
                   std::to_string(gt.rows()) + "," + std::to_string(gt.cols()) + "]");
  }
  return ad::bce_with_logits(logits, mask_to_tensor(gt));
}

RasterMask predicted_map(const Tensor& logits) { return tensor_to_mask(ad::sigmoid(ad::detach(logits))); }

}  // namespace hdmap::grl
