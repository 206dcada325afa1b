#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdmap/ad/ops.hpp"
#include "hdmap/ad/tensor.hpp"

namespace hdmap::ad {

/// Named trainable leaves, keyed by module path ("decoder.layer0.ffn.w1").
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all() { return params_; }
  std::size_t total_size() const;

  void zero_grad();

  /// Flat checkpoint: {"path": [v0, v1, ...], ...}. Only names matching
  /// `keep` (prefix match, empty = all) are written.
  nlohmann::json to_json(const std::vector<std::string>& keep = {}) const;
  /// Overwrites values of every parameter named in `doc`; sizes must match.
  void load_json(const nlohmann::json& doc);

 private:
  std::map<std::string, Tensor> params_;
};

enum class Activation { kNone, kRelu };

struct MlpSpec {
  /// widths[0] is the input width, widths.back() the output width.
  std::vector<std::size_t> widths;
  Activation hidden = Activation::kRelu;
  Activation output = Activation::kNone;
  std::uint64_t seed = 0;
};

/// He-normal weights, zero biases.
std::vector<double> he_normal(std::size_t count, std::size_t fan_in, std::uint64_t seed);

class Mlp {
 public:
  struct Layer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
  };

  Mlp() = default;
  Mlp(const MlpSpec& spec, ParamStore& store, const std::string& prefix);

  std::size_t in_width() const { return spec_.widths.front(); }
  std::size_t out_width() const { return spec_.widths.back(); }
  const MlpSpec& spec() const { return spec_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  /// x has shape [..., in_width]; result has shape [..., out_width].
  Tensor operator()(const Tensor& x) const;

 private:
  MlpSpec spec_;
  std::vector<Layer> layers_;
};

inline Tensor apply_mlp(const Mlp& mlp, const Tensor& x) { return mlp(x); }

struct Conv2dLayer {
  Tensor kernel;  // [c_out, c_in, k, k]
  Tensor bias;    // [c_out]

  Conv2dLayer() = default;
  Conv2dLayer(std::size_t c_in, std::size_t c_out, std::size_t k, std::uint64_t seed,
              ParamStore& store, const std::string& prefix);
  Tensor operator()(const Tensor& x) const { return conv2d(x, kernel, bias); }
};

struct AdamConfig {
  double lr = 6e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled (AdamW)
  double max_grad_norm = 0.0;  // 0 disables global-norm clipping
};

/// AdamW over a ParamStore. Parameters without a gradient from the last
/// backward pass are left untouched, including their moments.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// Applies one update and returns the pre-clip global gradient norm.
  double step(ParamStore& store);
  const AdamConfig& config() const { return cfg_; }
  AdamConfig& config() { return cfg_; }

 private:
  struct State {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
  };
  AdamConfig cfg_;
  std::map<std::string, State> state_;
};

}  // namespace hdmap::ad
