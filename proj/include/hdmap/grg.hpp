#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hdmap/ad/nn.hpp"
#include "hdmap/geometry.hpp"

namespace hdmap::grg {

using ad::Tensor;

/// Global guidance: the predicted map is flattened and encoded into a single
/// embedding, which is concatenated onto every query and fused back to query
/// width. The fused query passes through gradient weakening.
///
/// With `residual` set the fusion MLP produces an update added to the query,
/// and its output layer starts at zero, so a fresh module passes queries
/// through unchanged. Otherwise the MLP output replaces the query.
struct GrgSpec {
  std::size_t classes = kNumClasses;
  std::size_t rows = 64;
  std::size_t cols = 32;
  std::size_t global_dim = 256;  // d_g
  std::size_t query_width = 64;  // C_q
  /// Hidden widths between C*H*W and d_g.
  std::vector<std::size_t> encoder_hidden;
  /// Hidden widths between C_q + d_g and C_q.
  std::vector<std::size_t> fusion_hidden{64};
  double weaken = 0.8;
  bool residual = true;
  std::uint64_t seed = 0;
};

class GrgModule {
 public:
  GrgModule() = default;
  GrgModule(const GrgSpec& spec, ad::ParamStore& store, const std::string& prefix);

  const GrgSpec& spec() const { return spec_; }

  /// Probability map [C,H,W] -> embedding [d_g].
  Tensor encode_global(const Tensor& map_probs) const;
  /// queries [n, C_q] (or a single [C_q]) plus the shared embedding [d_g] ->
  /// fused queries of the same shape.
  Tensor inject_global(const Tensor& queries, const Tensor& global) const;

  ad::Mlp& encoder() { return encoder_; }
  ad::Mlp& fusion() { return fusion_; }
  void set_weaken(double c);

 private:
  GrgSpec spec_;
  ad::Mlp encoder_;
  ad::Mlp fusion_;
};

}  // namespace hdmap::grg
