#include "hdmap/ad/nn.hpp"

#include <cmath>
#include <random>

#include <Eigen/Core>

namespace hdmap::ad {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (params_.count(name)) {
    throw MapError("ParamStore: duplicate parameter " + name);
  }
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  params_.emplace(name, t);
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw MapError("ParamStore: unknown parameter " + name);
  }
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) {
    n += t.numel();
  }
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) {
    t.clear_grad();
  }
}

nlohmann::json ParamStore::to_json(const std::vector<std::string>& keep) const {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [name, t] : params_) {
    bool wanted = keep.empty();
    for (const std::string& prefix : keep) {
      wanted = wanted || name.rfind(prefix, 0) == 0;
    }
    if (wanted) {
      doc[name] = std::vector<double>(t.values().begin(), t.values().end());
    }
  }
  return doc;
}

void ParamStore::load_json(const nlohmann::json& doc) {
  for (const auto& [name, arr] : doc.items()) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw MapError("checkpoint: unknown parameter " + name);
    }
    auto vals = arr.get<std::vector<double>>();
    auto dst = it->second.mutable_values();
    if (vals.size() != dst.size()) {
      throw MapError("checkpoint: size mismatch for " + name);
    }
    std::copy(vals.begin(), vals.end(), dst.begin());
  }
}

std::vector<double> he_normal(std::size_t count, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> out(count);
  for (double& v : out) {
    v = dist(rng);
  }
  return out;
}

Mlp::Mlp(const MlpSpec& spec, ParamStore& store, const std::string& prefix) : spec_(spec) {
  if (spec.widths.size() < 2) {
    throw MapError("MlpSpec: need an input and at least one output width");
  }
  for (std::size_t w : spec.widths) {
    if (w == 0) {
      throw MapError("MlpSpec: widths must be positive");
    }
  }
  for (std::size_t i = 0; i + 1 < spec.widths.size(); ++i) {
    const std::size_t in = spec.widths[i];
    const std::size_t out = spec.widths[i + 1];
    const std::string base = prefix + ".fc" + std::to_string(i);
    Layer layer;
    layer.weight = store.add(base + ".weight", {in, out}, he_normal(in * out, in, spec.seed * 1000003ULL + i));
    layer.bias = store.add(base + ".bias", {out}, std::vector<double>(out, 0.0));
    layers_.push_back(layer);
  }
}

Tensor Mlp::operator()(const Tensor& x) const {
  if (layers_.empty()) {
    throw MapError("Mlp: not initialized");
  }
  if (x.rank() == 0 || x.shape().back() != in_width()) {
    throw MapError("apply_mlp: input " + shape_string(x.shape()) + " does not end in width " +
                   std::to_string(in_width()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_width();
  Tensor h = x.rank() <= 2 ? x : reshape(x, {x.numel() / in_width(), in_width()});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = linear(h, layers_[i].weight, layers_[i].bias);
    const bool last = i + 1 == layers_.size();
    const Activation act = last ? spec_.output : spec_.hidden;
    if (act == Activation::kRelu) {
      h = relu(h);
    }
  }
  return h.shape() == out_shape ? h : reshape(h, out_shape);
}

Conv2dLayer::Conv2dLayer(std::size_t c_in, std::size_t c_out, std::size_t k, std::uint64_t seed,
                         ParamStore& store, const std::string& prefix) {
  const std::size_t fan_in = c_in * k * k;
  kernel = store.add(prefix + ".kernel", {c_out, c_in, k, k}, he_normal(c_out * fan_in, fan_in, seed));
  bias = store.add(prefix + ".bias", {c_out}, std::vector<double>(c_out, 0.0));
}

double Adam::step(ParamStore& store) {
  double norm2 = 0.0;
  for (auto& [name, t] : store.all()) {
    if (t.has_grad()) {
      for (double g : t.grad_buffer()) {
        norm2 += g * g;
      }
    }
  }
  const double norm = std::sqrt(norm2);
  if (!std::isfinite(norm)) {
    throw MapError("Adam: non-finite gradient norm");
  }
  const double clip =
      (cfg_.max_grad_norm > 0.0 && norm > cfg_.max_grad_norm) ? cfg_.max_grad_norm / norm : 1.0;

  for (auto& [name, t] : store.all()) {
    if (!t.has_grad()) {
      continue;
    }
    auto grad = t.grad_buffer();
    auto val = t.mutable_values();
    State& s = state_[name];
    if (s.m.empty()) {
      s.m.assign(val.size(), 0.0);
      s.v.assign(val.size(), 0.0);
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
    const auto n = static_cast<Eigen::Index>(val.size());
    Eigen::Map<const Eigen::ArrayXd> g(grad.data(), n);
    Eigen::Map<Eigen::ArrayXd> m(s.m.data(), n), v(s.v.data(), n), x(val.data(), n);
    m = cfg_.beta1 * m + ((1.0 - cfg_.beta1) * clip) * g;
    v = cfg_.beta2 * v + ((1.0 - cfg_.beta2) * clip * clip) * g.square();
    x -= cfg_.lr * ((m / bc1) / ((v / bc2).sqrt() + cfg_.eps) + cfg_.weight_decay * x);
  }
  return norm;
}

}  // namespace hdmap::ad
