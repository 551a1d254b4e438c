#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "earth_adapter/adapter.hpp"
#include "earth_adapter/model.hpp"
#include "support.hpp"

using namespace ea;
using ea::testing::check_gradients;
using ea::testing::random_tensor;

namespace {

void randomize(std::vector<NamedParam> params, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : params)
    for (auto& v : p.tensor->data()) v = u(rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(SpatialDelta, ZeroUpProjectionGivesZero) {
  std::mt19937_64 rng(1);
  AdapterExpert e(8, 4, rng);
  Graph g;
  Var d = spatial_delta(g, g.constant(random_tensor({5, 8}, rng)), e);
  for (double v : g.value(d).data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(spatial_delta(g, g.constant(Tensor(Shape{5, 7})), e), DimensionError);
}

TEST(SpatialDelta, IdentityComposition) {
  std::mt19937_64 rng(2);
  AdapterExpert e(4, 4, rng);
  std::fill(e.w_down.data().begin(), e.w_down.data().end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    e.w_down[i * 4 + i] = 1.0;
    e.w_up[i * 4 + i] = 1.0;
  }
  Tensor f = random_tensor({6, 4}, rng, 0.0, 1.0);
  Graph g;
  EXPECT_EQ(max_abs_diff(g.value(spatial_delta(g, g.constant(f), e)), f), 0.0);
}

TEST(SpatialDelta, Gradient) {
  std::mt19937_64 rng(3);
  AdapterExpert e(6, 3, rng);
  randomize({{"up", &e.w_up}}, rng);
  Tensor f = random_tensor({5, 6}, rng), w = random_tensor({5, 6}, rng);
  auto rep = check_gradients([&](Graph& g) { return sum(mul(spatial_delta(g, g.param(f), e), g.constant(w))); },
                             {{"w_down", &e.w_down}, {"w_up", &e.w_up}, {"f", &f}});
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

TEST(FrequencyDeltas, ConstantFeatureAndFullPass) {
  std::mt19937_64 rng(4);
  AdapterExpert lo(4, 3, rng), hi(4, 3, rng);
  randomize({{"lo", &lo.w_up}, {"hi", &hi.w_up}}, rng);
  Tensor f(Shape{16, 4});
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t ch = 0; ch < 4; ++ch) f[t * 4 + ch] = 0.1 * static_cast<double>(ch) - 0.2;
  Graph g;
  auto d = frequency_deltas(g, g.constant(f), lo, hi, 0.3);
  for (double v : g.value(d.high).data()) EXPECT_LT(std::abs(v), 1e-12);

  Tensor r = random_tensor({16, 4}, rng);
  Graph g2;
  auto full = frequency_deltas(g2, g2.constant(r), lo, hi, 1.0);
  Var direct = spatial_delta(g2, g2.constant(r), lo);
  EXPECT_LT(max_abs_diff(g2.value(full.low), g2.value(direct)), 1e-12);
  for (double v : g2.value(full.high).data()) EXPECT_LT(std::abs(v), 1e-12);
  EXPECT_THROW(frequency_deltas(g2, g2.constant(Tensor(Shape{15, 4})), lo, hi, 0.3), DimensionError);
}

TEST(FrequencyDeltas, GradientThroughSplit) {
  std::mt19937_64 rng(5);
  AdapterExpert lo(4, 3, rng), hi(4, 3, rng);
  randomize({{"lo", &lo.w_up}, {"hi", &hi.w_up}}, rng);
  Tensor f = random_tensor({16, 4}, rng), wl = random_tensor({16, 4}, rng), wh = random_tensor({16, 4}, rng);
  auto rep = check_gradients(
      [&](Graph& g) {
        auto d = frequency_deltas(g, g.param(f), lo, hi, 0.3);
        return add(sum(mul(d.low, g.constant(wl))), sum(mul(d.high, g.constant(wh))));
      },
      {{"low/w_down", &lo.w_down}, {"low/w_up", &lo.w_up}, {"high/w_down", &hi.w_down}, {"high/w_up", &hi.w_up},
       {"f", &f}});
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
}

TEST(FrequencyDeltas, FullPassLeavesHighExpertWithoutGradient) {
  std::mt19937_64 rng(6);
  AdapterExpert lo(4, 3, rng), hi(4, 3, rng);
  randomize({{"lo", &lo.w_up}, {"hi", &hi.w_up}}, rng);
  hi.w_down.set_requires_grad(true);
  hi.w_up.set_requires_grad(true);
  Graph g;
  auto d = frequency_deltas(g, g.constant(random_tensor({16, 4}, rng)), lo, hi, 1.0);
  g.backward(add(sum(d.low), sum(d.high)));
  for (double v : hi.w_down.grad()) EXPECT_EQ(v, 0.0);
  for (double v : hi.w_up.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Router, UniformAndClosedForm) {
  std::mt19937_64 rng(7);
  AdapterConfig ac;
  ac.dim = 3;
  MoALayer m(0, 4, ac, true, rng);
  Tensor f = random_tensor({16, 4}, rng);
  {
    Graph g;
    const Tensor& w = g.value(m.router_weights(g, g.constant(f)));
    for (double v : w.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
  m.router_bias()[0] = std::log(2.0);
  {
    Graph g;
    const Tensor& w = g.value(m.router_weights(g, g.constant(f)));
    EXPECT_NEAR(w[0], 0.5, 1e-15);
    EXPECT_NEAR(w[1], 0.25, 1e-15);
    EXPECT_NEAR(w[2], 0.25, 1e-15);
  }
  randomize({{"w", &m.router_weight()}, {"b", &m.router_bias()}}, rng, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Tensor& w = g.value(m.router_weights(g, g.constant(random_tensor({16, 4}, rng, -5, 5))));
    double s = 0.0;
    for (double v : w.data()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Router, PermutationEquivariance) {
  std::mt19937_64 rng(8);
  AdapterConfig ac;
  ac.dim = 3;
  MoALayer m(0, 4, ac, true, rng);
  randomize({{"w", &m.router_weight()}, {"b", &m.router_bias()}}, rng, 2.0);
  MoALayer p = m;
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t k = 0; k < 3; ++k) p.router_weight()[ch * 3 + k] = m.router_weight()[ch * 3 + perm[k]];
  for (std::size_t k = 0; k < 3; ++k) p.router_bias()[k] = m.router_bias()[perm[k]];
  Tensor f = random_tensor({16, 4}, rng);
  Graph g;
  const Tensor& a = g.value(m.router_weights(g, g.constant(f)));
  const Tensor& b = g.value(p.router_weights(g, g.constant(f)));
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(b[k], a[perm[k]], 1e-15);
}

TEST(AggregateInject, HandArithmetic) {
  std::mt19937_64 rng(9);
  Tensor f = random_tensor({4, 3}, rng);
  std::vector<Tensor> ones(3, Tensor(Shape{4, 3}, 1.0));
  Tensor out = aggregate_inject(f, ones, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.01);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], f[i] + 0.01, 1e-15);
  EXPECT_EQ(max_abs_diff(aggregate_inject(f, ones, {0.2, 0.3, 0.5}, 0.0), f), 0.0);
  std::vector<Tensor> d{random_tensor({4, 3}, rng), random_tensor({4, 3}, rng), random_tensor({4, 3}, rng)};
  Tensor one_hot = aggregate_inject(f, d, {1.0, 0.0, 0.0}, 0.4);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(one_hot[i], f[i] + 0.4 * d[0][i], 1e-15);
  EXPECT_THROW(aggregate_inject(f, d, {1.0, 0.0}, 0.4), DimensionError);
}

TEST(MoALayer, ForwardIsConvexCombinationScaledByAlpha) {
  std::mt19937_64 rng(10);
  AdapterConfig ac;
  ac.dim = 3;
  MoALayer m(0, 4, ac, true, rng);
  for (Expert e : m.experts()) randomize({{"up", &m.expert(e)->w_up}}, rng);
  randomize({{"w", &m.router_weight()}, {"b", &m.router_bias()}}, rng, 2.0);
  m.alpha()[0] = 0.7;
  Tensor f = random_tensor({16, 4}, rng);
  Graph g;
  MoACapture cap;
  Var out = m.forward(g, g.constant(f), &cap);
  const Tensor& w = g.value(cap.weights);
  Tensor expect = aggregate_inject(f, {g.value(*cap.spatial), g.value(*cap.low), g.value(*cap.high)},
                                   {w[0], w[1], w[2]}, 0.7);
  EXPECT_LT(max_abs_diff(g.value(out), expect), 1e-14);
}

TEST(MoALayer, SpatialOnlyLayerHasNoRouter) {
  std::mt19937_64 rng(11);
  AdapterConfig ac;
  ac.dim = 3;
  MoALayer m(2, 4, ac, false, rng);
  EXPECT_EQ(m.experts().size(), 1u);
  EXPECT_EQ(m.expert(Expert::kLow), nullptr);
  EXPECT_EQ(m.named_params().size(), 3u);  // alpha, w_down, w_up
  randomize({{"up", &m.expert(Expert::kSpatial)->w_up}}, rng);
  Tensor f = random_tensor({16, 4}, rng);
  Graph g;
  Var out = m.forward(g, g.constant(f));
  Var d = spatial_delta(g, g.constant(f), *m.expert(Expert::kSpatial));
  Tensor expect = aggregate_inject(f, {g.value(d)}, {1.0}, ac.alpha_init);
  EXPECT_LT(max_abs_diff(g.value(out), expect), 1e-15);
}

TEST(EarthAdapter, DefaultLayoutAndParameterCount) {
  ViTConfig vit;
  AdapterConfig ac;
  EarthAdapter a(vit, ac, 0);
  EXPECT_EQ(a.layers().size(), 8u);
  EXPECT_EQ(a.frequency_layer_count(), 3u);
  for (std::size_t l = 0; l < 8; ++l) EXPECT_EQ(a.at_layer(l)->has_frequency(), l >= 5);
  // per layer: alpha + spatial expert; frequency layers add two experts and a 64x3 router with bias
  const std::size_t expect = 8 * (1 + 2 * 64 * 16) + 3 * (2 * (2 * 64 * 16) + 64 * 3 + 3);
  EXPECT_EQ(a.parameter_count(), expect);
  EXPECT_EQ(expect, 29265u);
  for (auto& p : a.named_params()) EXPECT_EQ(p.name.rfind("peft/", 0), 0u) << p.name;
  for (auto& l : a.layers()) EXPECT_EQ(l.alpha()[0], 0.01);
}

TEST(EarthAdapter, EmptyFrequencySetIsSpatialBaseline) {
  ViTConfig vit;
  AdapterConfig ac;
  ac.freq_layers.clear();
  EarthAdapter a(vit, ac, 0);
  EXPECT_EQ(a.frequency_layer_count(), 0u);
  EXPECT_EQ(a.parameter_count(), 8u * (1 + 2 * 64 * 16));
}

TEST(EarthAdapter, RejectsOutOfRangeLayers) {
  ViTConfig vit;
  AdapterConfig ac;
  ac.freq_layers = {8};
  EXPECT_THROW(EarthAdapter(vit, ac, 0), RangeError);
}

TEST(EarthAdapter, IdentityAtInitialization) {
  ViTConfig vit;
  vit.depth = 3;
  auto backbone = std::make_shared<VisionTransformer>(vit, 1);
  AdapterConfig ac;
  ac.freq_layers = {0, 1, 2};
  SegModel frozen(backbone, SegDecoder(vit, 1), std::nullopt);
  SegModel adapted(backbone, SegDecoder(vit, 1), EarthAdapter(vit, ac, 1));
  std::mt19937_64 rng(12);
  for (int i = 0; i < 3; ++i) {
    Tensor img = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    Graph g1, g2;
    EXPECT_LE(max_abs_diff(g1.value(frozen.forward(g1, img)), g2.value(adapted.forward(g2, img))), 1e-12);
  }
}

TEST(EarthAdapter, FullModelGradientSuite) {
  ViTConfig vit;
  vit.image_size = 16;
  vit.patch_size = 4;
  vit.depth = 2;
  vit.dim = 16;
  vit.heads = 2;
  vit.mlp_ratio = 2;
  vit.decoder_dim = 8;
  vit.num_classes = 3;
  AdapterConfig ac;
  ac.dim = 4;
  ac.freq_layers = {0, 1};
  auto backbone = std::make_shared<VisionTransformer>(vit, 2);
  SegModel model(backbone, SegDecoder(vit, 2), EarthAdapter(vit, ac, 2));
  std::mt19937_64 rng(13);
  randomize(model.adapter()->named_params(), rng, 0.3);
  Tensor img = random_tensor({3, 16, 16}, rng, 0.0, 1.0);
  std::vector<int> labels(256);
  for (auto& l : labels) l = static_cast<int>(rng() % 3);
  auto params = model.trainable_params();
  auto rep = check_gradients([&](Graph& g) { return cross_entropy(model.forward(g, img), labels); }, params);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst;
  EXPECT_GT(rep.checked, 500u);
}
