#include <cmath>
#include <cstring>
#include <random>

#include <doctest.h>

#include "hdmap/ad/ops.hpp"
#include "hdmap/grg.hpp"
#include "hdmap/grl.hpp"
#include "hdmap/synthetic.hpp"
#include "support/oracles.hpp"

using namespace hdmap;
using ad::Tensor;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double row_norm(const std::vector<double>& g, std::size_t row, std::size_t width) {
  double s = 0.0;
  for (std::size_t c = 0; c < width; ++c) s += g[row * width + c] * g[row * width + c];
  return std::sqrt(s);
}

grl::GrlSpec small_grl(std::uint64_t seed) {
  return {.query_width = 6, .feature_dim = 8, .num_queries = 5, .small_rows = 4, .small_cols = 2,
          .conv_hidden = 4, .out_rows = 8, .out_cols = 4, .seed = seed};
}

}  // namespace

TEST_CASE("pool_point_queries examples") {
  const Tensor v = Tensor::constant({3}, {1.5, -2.0, 0.25});
  const Tensor same[3] = {v, v, v};
  CHECK(to_vec(grl::pool_point_queries(same)) == to_vec(v));
  const Tensor opposite[2] = {v, ad::scale(v, -1.0)};
  CHECK(to_vec(grl::pool_point_queries(opposite)) == std::vector<double>(3, 0.0));
  const Tensor pair[2] = {Tensor::constant({2}, {1, 3}), Tensor::constant({2}, {3, 5})};
  CHECK(to_vec(grl::pool_point_queries(pair)) == std::vector<double>{2, 4});
  CHECK_THROWS_AS(grl::pool_point_queries(std::span<const Tensor>{}), MapError);
}

TEST_CASE("pooled gradient splits equally over point queries") {
  std::mt19937_64 rng(4);
  ad::ParamStore store;
  grl::GrlHead head(small_grl(3), store, "grl");
  RasterMask gt(3, 8, 4);
  gt.at(0, 2, 1) = 1.0;
  const std::size_t l = 4;
  std::vector<Tensor> points;
  for (std::size_t j = 0; j < l; ++j) points.push_back(oracle::random_param(rng, {6}));
  // Queries 1..4 are fixed; query 0 is pooled from the point queries.
  const Tensor rest = Tensor::constant({4, 6}, to_vec(oracle::random_param(rng, {4, 6})));
  const auto loss_of = [&](const Tensor& q0) {
    const Tensor parts[2] = {ad::reshape(q0, {1, 6}), rest};
    return grl::global_loss(head(ad::concat0(parts)), gt);
  };
  ad::backward(loss_of(grl::pool_point_queries(points)));
  std::vector<std::vector<double>> gp;
  for (const auto& p : points) gp.push_back(p.grad());

  std::vector<double> mean(6, 0.0);
  for (const auto& p : points)
    for (std::size_t c = 0; c < 6; ++c) mean[c] += p[c] / static_cast<double>(l);
  Tensor q0 = Tensor::parameter({6}, mean);
  const std::vector<Tensor> in{q0};
  const oracle::GradCheck fd = oracle::finite_difference([&] { return loss_of(q0); }, in);
  CHECK(fd.max_rel_error < 1e-4);
  ad::backward(loss_of(q0));
  const auto gq = q0.grad();
  for (std::size_t j = 0; j < l; ++j) {
    for (std::size_t c = 0; c < 6; ++c) {
      CHECK(gp[j][c] == doctest::Approx(gq[c] / static_cast<double>(l)).epsilon(1e-10));
    }
  }
}

TEST_CASE("project_and_stack contract") {
  std::mt19937_64 rng(1);
  ad::ParamStore store;
  grl::GrlHead head(small_grl(1), store, "grl");
  for (std::size_t n : {1, 5, 9}) {
    const Tensor s = head.project_and_stack(oracle::random_param(rng, {n, 6}));
    CHECK(s.shape() == ad::Shape{n, 4, 2});
  }
  CHECK_THROWS_AS(head.project_and_stack(Tensor::zeros({5, 7})), MapError);

  // Permuting queries permutes rows; each row depends on its own query only.
  const Tensor q = oracle::random_param(rng, {5, 6});
  const std::size_t perm[5] = {3, 0, 4, 1, 2};
  const Tensor a = head.project_and_stack(q);
  const Tensor b = head.project_and_stack(ad::gather_rows(q, perm));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 8; ++k) CHECK(b[i * 8 + k] == a[perm[i] * 8 + k]);

  for (auto& layer : head.projection().layers()) {
    for (double& v : layer.weight.mutable_values()) v = 0.0;
    for (double& v : layer.bias.mutable_values()) v = 0.0;
  }
  CHECK(to_vec(head.project_and_stack(q)) == std::vector<double>(40, 0.0));
}

TEST_CASE("predict_global_map contract") {
  ad::ParamStore store;
  grl::GrlHead head({}, store, "grl");
  std::mt19937_64 rng(2);
  const Tensor logits = head(oracle::random_param(rng, {16, 64}));
  CHECK(logits.shape() == ad::Shape{3, 64, 32});
  CHECK_THROWS_AS(head.predict_global_map(Tensor::zeros({15, 8, 4})), MapError);

  for (double& v : head.conv_out().kernel.mutable_values()) v = 0.0;
  const double bias[3] = {0.5, -1.0, 2.0};
  for (std::size_t c = 0; c < 3; ++c) head.conv_out().bias.mutable_values()[c] = bias[c];
  const Tensor flat = head.predict_global_map(Tensor::filled({16, 8, 4}, 0.3));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64 * 32; ++i) CHECK(flat[c * 64 * 32 + i] == doctest::Approx(bias[c]).epsilon(1e-15));
}

TEST_CASE("predict_global_map gradient matches finite differences") {
  ad::ParamStore store;
  grl::GrlHead head(small_grl(7), store, "grl");
  std::mt19937_64 rng(7);
  Tensor q = oracle::random_param(rng, {5, 6});
  const std::vector<Tensor> in{q};
  CHECK(oracle::finite_difference([&] { return ad::sum(head(q)); }, in).max_rel_error < 1e-4);
}

TEST_CASE("global_loss examples") {
  RasterMask gt(3, 4, 2);
  gt.at(1, 1, 1) = 1.0;
  gt.at(2, 3, 0) = 1.0;
  CHECK(grl::global_loss(Tensor::zeros({3, 4, 2}), gt).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  std::vector<double> sat(gt.size());
  for (std::size_t i = 0; i < sat.size(); ++i) sat[i] = gt.data()[i] > 0.5 ? 60.0 : -60.0;
  CHECK(grl::global_loss(Tensor::constant({3, 4, 2}, sat), gt).item() < 1e-20);
  CHECK_THROWS_AS(grl::global_loss(Tensor::zeros({3, 4, 3}), gt), MapError);

  ad::ParamStore s1, s2;
  grl::GrlHead h1({.seed = 5}, s1, "grl"), h2({.seed = 5}, s2, "grl");
  std::mt19937_64 r1(3), r2(3);
  const Tensor q1 = oracle::random_param(r1, {16, 64}), q2 = oracle::random_param(r2, {16, 64});
  const RasterMask target = rasterize_scene(generate_synthetic_scene(3), BevGrid(64, 32));
  const double a = grl::global_loss(h1(q1), target).item();
  const double b = grl::global_loss(h2(q2), target).item();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("every query receives a global-loss gradient") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ad::ParamStore store;
    grl::GrlHead head({.seed = seed}, store, "grl");
    std::mt19937_64 rng(seed);
    Tensor q = oracle::random_param(rng, {16, 64});
    const RasterMask gt = rasterize_scene(generate_synthetic_scene(seed), BevGrid(64, 32));
    ad::backward(grl::global_loss(head(q), gt));
    const auto g = q.grad();
    for (std::size_t i = 0; i < 16; ++i) CHECK(row_norm(g, i, 64) > 1e-12);
  }
}

TEST_CASE("encode_global contract") {
  ad::ParamStore store;
  grg::GrgModule guide({}, store, "grg");
  const Tensor probs = Tensor::filled({3, 64, 32}, 0.25);
  CHECK(guide.encode_global(probs).shape() == ad::Shape{256});
  CHECK_THROWS_AS(guide.encode_global(Tensor::filled({3, 64, 31}, 0.5)), MapError);
  CHECK_THROWS_AS(guide.encode_global(Tensor::filled({3, 64, 32}, 1.5)), MapError);

  // Different maps, different embeddings.
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ad::ParamStore s;
    grg::GrgModule g({.seed = seed}, s, "grg");
    const RasterMask a = rasterize_scene(generate_synthetic_scene(2 * seed), BevGrid(64, 32));
    const RasterMask b = rasterize_scene(generate_synthetic_scene(2 * seed + 1), BevGrid(64, 32));
    CHECK(to_vec(g.encode_global(grl::mask_to_tensor(a))) != to_vec(g.encode_global(grl::mask_to_tensor(b))));
  }

  for (double& v : guide.encoder().layers()[0].weight.mutable_values()) v = 0.0;
  for (std::size_t i = 0; i < 256; ++i) guide.encoder().layers()[0].bias.mutable_values()[i] = 0.01 * i;
  const Tensor f1 = guide.encode_global(probs);
  const Tensor f2 = guide.encode_global(Tensor::filled({3, 64, 32}, 0.9));
  CHECK(to_vec(f1) == to_vec(f2));
  CHECK(f1[100] == doctest::Approx(1.0));
}

TEST_CASE("inject_global constructions") {
  ad::ParamStore store;
  const std::size_t cq = 4, dg = 3;
  // Replacement form, so the MLP itself is the map from q to the fused query.
  grg::GrgModule guide(
      {.rows = 2, .cols = 2, .global_dim = dg, .query_width = cq, .fusion_hidden = {}, .residual = false}, store,
      "grg");
  auto& layer = guide.fusion().layers()[0];  // [cq + dg, cq]
  auto w = layer.weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < cq; ++i) w[i * cq + i] = 1.0;
  std::mt19937_64 rng(5);
  const Tensor q = oracle::random_param(rng, {3, cq});
  const Tensor g = oracle::random_param(rng, {dg});
  CHECK(to_vec(guide.inject_global(q, g)) == to_vec(q));
  const Tensor single = ad::slice_rows(q, 1, 1);
  CHECK(guide.inject_global(ad::reshape(single, {cq}), g).shape() == ad::Shape{cq});

  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < dg; ++i)
    for (std::size_t j = 0; j < cq; ++j) w[(cq + i) * cq + j] = 0.5 * static_cast<double>(i + j);
  const Tensor out_a = guide.inject_global(q, g);
  const Tensor out_b = guide.inject_global(oracle::random_param(rng, {3, cq}), g);
  CHECK(to_vec(out_a) == to_vec(out_b));

  CHECK_THROWS_AS(guide.inject_global(Tensor::zeros({3, cq + 1}), g), MapError);
  CHECK_THROWS_AS(guide.inject_global(q, Tensor::zeros({dg + 1})), MapError);
  CHECK_THROWS_AS(guide.set_weaken(1.5), MapError);
}

TEST_CASE("a fresh residual fusion passes queries through") {
  ad::ParamStore store;
  grg::GrgModule guide({.rows = 4, .cols = 2, .global_dim = 5, .query_width = 6, .seed = 3}, store, "grg");
  std::mt19937_64 rng(3);
  const Tensor q = oracle::random_param(rng, {4, 6});
  const Tensor g = guide.encode_global(ad::sigmoid(oracle::random_param(rng, {3, 4, 2})));
  CHECK(to_vec(guide.inject_global(q, g)) == to_vec(q));
}

TEST_CASE("weakening leaves the forward pass alone and scales the backward pass") {
  std::mt19937_64 rng(9);
  ad::ParamStore store;
  grg::GrgModule guide({.rows = 4, .cols = 2, .global_dim = 5, .query_width = 6, .fusion_hidden = {6}, .seed = 2},
                       store, "grg");
  for (double& w : guide.fusion().layers().back().weight.mutable_values()) {
    w = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  Tensor q = oracle::random_param(rng, {4, 6});
  const Tensor probs = ad::sigmoid(oracle::random_param(rng, {3, 4, 2}));
  const Tensor wts = Tensor::constant({4, 6}, to_vec(oracle::random_param(rng, {4, 6})));

  guide.set_weaken(0.0);
  const Tensor f0 = guide.inject_global(q, guide.encode_global(probs));
  ad::backward(ad::sum(ad::mul(f0, wts)));
  const auto g0 = q.grad();
  guide.set_weaken(0.8);
  const Tensor f8 = guide.inject_global(q, guide.encode_global(probs));
  ad::backward(ad::sum(ad::mul(f8, wts)));
  const auto g8 = q.grad();

  CHECK(std::memcmp(f0.values().data(), f8.values().data(), f0.numel() * sizeof(double)) == 0);
  for (std::size_t i = 0; i < g0.size(); ++i) CHECK(g8[i] == doctest::Approx(0.2 * g0[i]).epsilon(1e-12));
}

TEST_CASE("one query can move every fused query") {
  ad::ParamStore store;
  grl::GrlHead head(small_grl(4), store, "grl");
  grg::GrgModule guide({.rows = 8, .cols = 4, .global_dim = 5, .query_width = 6, .fusion_hidden = {6}, .seed = 4},
                       store, "grg");
  std::mt19937_64 rng(4);
  for (double& w : guide.fusion().layers().back().weight.mutable_values()) {
    w = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  Tensor q = oracle::random_param(rng, {5, 6});
  const std::size_t target_row[1] = {0};
  ad::backward(ad::sum(ad::gather_rows(
      guide.inject_global(ad::detach(q), guide.encode_global(ad::sigmoid(head(q)))), target_row)));
  const auto g = q.grad();
  // Row 0 of the output is reached from every other query through the map.
  for (std::size_t j = 1; j < 5; ++j) CHECK(row_norm(g, j, 6) > 0.0);
}
