#include "hdmap/recon.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace hdmap::recon {

nlohmann::json recon_config_to_json(const ReconConfig& cfg) {
  return {{"train_count", cfg.train_count}, {"val_count", cfg.val_count},
          {"bottleneck", cfg.bottleneck},   {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},   {"lr", cfg.lr},
          {"overfit_steps", cfg.overfit_steps}, {"seed", cfg.seed},
          {"rows", cfg.rows},               {"cols", cfg.cols},
          {"raster_thickness", cfg.raster.thickness},
          {"architecture", "flatten-" + std::to_string(cfg.bottleneck) + "-flatten"}};
}

ReconConfig recon_config_from_json(const nlohmann::json& doc) {
  ReconConfig cfg;
  try {
    auto take = [&](const char* key, auto& field) {
      if (doc.contains(key)) doc.at(key).get_to(field);
    };
    take("train_count", cfg.train_count);
    take("val_count", cfg.val_count);
    take("bottleneck", cfg.bottleneck);
    take("epochs", cfg.epochs);
    take("batch_size", cfg.batch_size);
    take("lr", cfg.lr);
    take("overfit_steps", cfg.overfit_steps);
    take("seed", cfg.seed);
    take("rows", cfg.rows);
    take("cols", cfg.cols);
    take("raster_thickness", cfg.raster.thickness);
  } catch (const nlohmann::json::exception& e) {
    throw MapError(std::string("recon config: ") + e.what());
  }
  if (cfg.train_count == 0 || cfg.val_count == 0 || cfg.batch_size == 0 || cfg.bottleneck == 0) {
    throw MapError("recon config: counts, batch size and bottleneck must be positive");
  }
  return cfg;
}

RasterAutoencoder::RasterAutoencoder(std::size_t input_size, std::size_t bottleneck,
                                     std::uint64_t seed)
    : encoder_({.widths = {input_size, bottleneck}, .output = ad::Activation::kRelu, .seed = seed},
               store_, "recon.encoder"),
      decoder_({.widths = {bottleneck, input_size}, .seed = seed + 1}, store_, "recon.decoder") {}

ad::Tensor RasterAutoencoder::logits(const ad::Tensor& x) const { return decoder_(encoder_(x)); }

namespace {

ad::Tensor batch_tensor(std::span<const RasterMask> masks, std::span<const std::size_t> index) {
  const std::size_t d = masks.front().data().size();
  std::vector<double> v(index.size() * d);
  for (std::size_t b = 0; b < index.size(); ++b) {
    const auto& src = masks[index[b]].data();
    std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(b * d));
  }
  return ad::Tensor::constant({index.size(), d}, std::move(v));
}

double bce_term(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::fabs(logit)));
}

void check_masks(std::span<const RasterMask> masks, const char* what) {
  if (masks.empty()) {
    throw MapError(std::string("recon: empty ") + what + " set");
  }
  for (const RasterMask& m : masks) {
    if (m.data().size() != masks.front().data().size()) {
      throw MapError(std::string("recon: ") + what + " rasters differ in size");
    }
  }
}

}  // namespace

MaskScores score_masks(const RasterAutoencoder& model, std::span<const RasterMask> masks) {
  check_masks(masks, "scored");
  double bce = 0.0;
  std::size_t inter = 0, uni = 0, count = 0;
  constexpr std::size_t kChunk = 50;
  for (std::size_t start = 0; start < masks.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, masks.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    ad::Tensor z = model.logits(batch_tensor(masks, idx));
    auto zv = z.values();
    const std::size_t d = model.input_size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& t = masks[idx[b]].data();
      for (std::size_t i = 0; i < d; ++i) {
        const double zi = zv[b * d + i];
        bce += bce_term(zi, t[i]);
        const bool pred = zi > 0.0;  // sigmoid > 0.5
        const bool gt = t[i] > 0.5;
        inter += pred && gt ? 1 : 0;
        uni += pred || gt ? 1 : 0;
        ++count;
      }
    }
  }
  return {bce / static_cast<double>(count),
          uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni)};
}

MaskScores constant_baseline(std::span<const RasterMask> masks, double* p_out) {
  check_masks(masks, "baseline");
  double fg = 0.0, count = 0.0;
  for (const RasterMask& m : masks) {
    for (double v : m.data()) fg += v;
    count += static_cast<double>(m.data().size());
  }
  const double p = fg / count;
  if (p_out) *p_out = p;
  MaskScores s;
  s.bce = (p <= 0.0 || p >= 1.0) ? 0.0 : -(p * std::log(p) + (1.0 - p) * std::log(1.0 - p));
  // A constant p < 0.5 predicts background everywhere.
  s.iou = p > 0.5 ? p : 0.0;
  return s;
}

ReconMetrics train_autoencoder(std::span<const RasterMask> train, std::span<const RasterMask> val,
                               const ReconConfig& cfg) {
  check_masks(train, "training");
  check_masks(val, "held-out");
  const std::size_t d = train.front().data().size();
  RasterAutoencoder model(d, cfg.bottleneck, cfg.seed);
  ad::Adam adam({.lr = cfg.lr, .weight_decay = 0.0});
  std::mt19937_64 rng(cfg.seed ^ 0xa5a5ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, b);
      ad::Tensor x = batch_tensor(train, idx);
      ad::Tensor loss = ad::bce_with_logits(model.logits(x), x);
      model.params().zero_grad();
      ad::backward(loss);
      adam.step(model.params());
    }
  }

  ReconMetrics m;
  m.parameters = model.params().total_size();
  m.train_bce = score_masks(model, train).bce;
  const MaskScores v = score_masks(model, val);
  m.val_bce = v.bce;
  m.val_iou = v.iou;
  m.constant_bce = constant_baseline(val, &m.constant_p).bce;
  return m;
}

double overfit_single(const RasterMask& mask, const ReconConfig& cfg) {
  const std::size_t d = mask.data().size();
  RasterAutoencoder model(d, cfg.bottleneck, cfg.seed);
  ad::Adam adam({.lr = cfg.lr, .weight_decay = 0.0});
  const std::vector<RasterMask> one{mask};
  const std::size_t idx[1] = {0};
  const ad::Tensor x = batch_tensor(one, idx);
  double iou = score_masks(model, one).iou;
  for (std::size_t step = 0; step < cfg.overfit_steps && iou <= 0.999; ++step) {
    ad::Tensor loss = ad::bce_with_logits(model.logits(x), x);
    model.params().zero_grad();
    ad::backward(loss);
    adam.step(model.params());
    iou = score_masks(model, one).iou;
  }
  return iou;
}

std::vector<RasterMask> make_rasters(std::uint64_t first_seed, std::size_t count,
                                     const ReconConfig& cfg) {
  const BevGrid grid(cfg.rows, cfg.cols, cfg.gen.extent);
  std::vector<RasterMask> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(rasterize_scene(generate_synthetic_scene(first_seed + i, cfg.gen), grid, cfg.raster));
  }
  return out;
}

ReconMetrics reconstruction_experiment(const ReconConfig& cfg) {
  const std::uint64_t base = cfg.seed * 1'000'003ULL;
  const auto train = make_rasters(base, cfg.train_count, cfg);
  const auto val = make_rasters(base + cfg.train_count, cfg.val_count, cfg);
  return train_autoencoder(train, val, cfg);
}

}  // namespace hdmap::recon
