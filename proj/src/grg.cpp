#include "hdmap/grg.hpp"

namespace hdmap::grg {

GrgModule::GrgModule(const GrgSpec& spec, ad::ParamStore& store, const std::string& prefix)
    : spec_(spec) {
  set_weaken(spec.weaken);
  std::vector<std::size_t> enc{spec.classes * spec.rows * spec.cols};
  enc.insert(enc.end(), spec.encoder_hidden.begin(), spec.encoder_hidden.end());
  enc.push_back(spec.global_dim);
  encoder_ = ad::Mlp({.widths = enc, .seed = spec.seed * 11 + 1}, store, prefix + ".encoder");

  std::vector<std::size_t> fuse{spec.query_width + spec.global_dim};
  fuse.insert(fuse.end(), spec.fusion_hidden.begin(), spec.fusion_hidden.end());
  fuse.push_back(spec.query_width);
  fusion_ = ad::Mlp({.widths = fuse, .seed = spec.seed * 11 + 2}, store, prefix + ".fusion");
  if (spec.residual) {
    for (double& w : fusion_.layers().back().weight.mutable_values()) w = 0.0;
  }
}

void GrgModule::set_weaken(double c) {
  if (!(c >= 0.0 && c <= 1.0)) {
    throw MapError("GrgSpec: weakening coefficient must lie in [0,1]");
  }
  spec_.weaken = c;
}

Tensor GrgModule::encode_global(const Tensor& map_probs) const {
  if (map_probs.rank() != 3 || map_probs.dim(0) != spec_.classes || map_probs.dim(1) != spec_.rows ||
      map_probs.dim(2) != spec_.cols) {
    throw MapError("encode_global: expected [" + std::to_string(spec_.classes) + "," +
                   std::to_string(spec_.rows) + "," + std::to_string(spec_.cols) + "], got " +
                   ad::shape_string(map_probs.shape()));
  }
  for (double v : map_probs.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw MapError("encode_global: map values must be probabilities in [0,1]");
    }
  }
  return encoder_(ad::flatten(map_probs));
}

Tensor GrgModule::inject_global(const Tensor& queries, const Tensor& global) const {
  if (global.rank() != 1 || global.dim(0) != spec_.global_dim) {
    throw MapError("inject_global: global embedding must have width " +
                   std::to_string(spec_.global_dim));
  }
  const bool single = queries.rank() == 1;
  if (queries.rank() < 1 || queries.rank() > 2 || queries.shape().back() != spec_.query_width) {
    throw MapError("inject_global: queries must have width " + std::to_string(spec_.query_width));
  }
  Tensor q = single ? ad::reshape(queries, {1, spec_.query_width}) : queries;
  Tensor joined = ad::concat_cols(q, ad::repeat_rows(global, q.dim(0)));
  Tensor update = fusion_(joined);
  Tensor fused = ad::gradient_weaken(spec_.residual ? ad::add(q, update) : update, spec_.weaken);
  return single ? ad::reshape(fused, {spec_.query_width}) : fused;
}

}  // namespace hdmap::grg
