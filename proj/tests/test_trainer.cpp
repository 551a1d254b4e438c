#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "earth_adapter/benchgen.hpp"
#include "earth_adapter/trainer.hpp"
#include "support.hpp"

using namespace ea;
using ea::testing::random_tensor;

namespace {

ViTConfig small() {
  ViTConfig c;
  c.depth = 2;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 16;
  return c;
}

ViTConfig desk() {
  ViTConfig c;
  c.depth = 4;
  c.dim = 32;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 32;
  return c;
}

SegModel make_model(const ViTConfig& c, bool adapter, std::uint64_t seed = 1) {
  std::optional<EarthAdapter> a;
  if (adapter) {
    AdapterConfig ac;
    ac.freq_layers = {c.depth - 1};
    a.emplace(c, ac, seed);
  }
  return SegModel(std::make_shared<VisionTransformer>(c, seed), SegDecoder(c, seed), std::move(a));
}

std::vector<bench::Sample> samples(const bench::DomainSpec& spec, std::size_t n, std::uint64_t seed) {
  std::vector<bench::Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(bench::generate_sample(spec, bench::mix_seed(seed, i)));
  return out;
}

}  // namespace

TEST(PseudoLabel, FavoredClassAndTies) {
  ViTConfig c = small();
  SegModel m = make_model(c, false);
  auto params = m.decoder().named_params();  // w1 b1 w2 b2
  for (auto& p : params) std::fill(p.tensor->data().begin(), p.tensor->data().end(), 0.0);
  std::mt19937_64 rng(1);
  Tensor img = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
  for (int v : train::pseudo_label(m, img)) EXPECT_EQ(v, 0);  // all tied
  (*params[3].tensor)[1] = 1.0;
  for (int v : train::pseudo_label(m, img)) EXPECT_EQ(v, 1);
  (*params[3].tensor)[3] = 1.0;
  for (int v : train::pseudo_label(m, img)) EXPECT_EQ(v, 1);  // tie between 1 and 3
}

TEST(Ema, ArithmeticAndClosedForm) {
  ViTConfig c = small();
  SegModel student = make_model(c, true);
  SegModel teacher = student.detached_copy();
  auto set_all = [](SegModel& m, double v) {
    for (auto& p : m.trainable_params()) std::fill(p.tensor->data().begin(), p.tensor->data().end(), v);
  };
  set_all(teacher, 1.0);
  set_all(student, 0.0);
  train::ema_update(teacher, student, 0.99);
  for (auto& p : teacher.trainable_params())
    for (double v : p.tensor->data()) EXPECT_EQ(v, 0.99);

  set_all(student, 0.25);
  train::ema_update(teacher, student, 0.0);
  for (auto& p : teacher.trainable_params())
    for (double v : p.tensor->data()) EXPECT_EQ(v, 0.25);

  const double t0 = -0.8, s = 0.3, a = 0.99;
  set_all(teacher, t0);
  set_all(student, s);
  for (int k = 0; k < 10; ++k) train::ema_update(teacher, student, a);
  const double expect = t0 * std::pow(a, 10) + s * (1.0 - std::pow(a, 10));
  for (auto& p : teacher.trainable_params())
    for (double v : p.tensor->data()) EXPECT_NEAR(v, expect, 1e-12);

  SegModel other = make_model(c, false);
  EXPECT_THROW(train::ema_update(teacher, other, 0.5), ConsistencyError);
  EXPECT_THROW(train::ema_update(teacher, student, 1.0), RangeError);
}

TEST(ClassMix, ProvenanceAudit) {
  std::mt19937_64 rng(2);
  const auto spec = bench::default_source_spec();
  for (int trial = 0; trial < 50; ++trial) {
    bench::Sample src = bench::generate_sample(spec, rng());
    Tensor tgt = random_tensor({3, 32, 32}, rng, 0.0, 1.0);
    std::vector<int> pseudo(1024);
    for (auto& p : pseudo) p = static_cast<int>(rng() % 4);
    train::MixBatch mb = train::classmix(src, tgt, pseudo, rng);
    std::set<int> present(src.label.begin(), src.label.end());
    EXPECT_EQ(mb.classes.size(), (present.size() + 1) / 2);
    for (int k : mb.classes) EXPECT_TRUE(present.count(k));
    for (std::size_t i = 0; i < 1024; ++i) {
      const bool from_src = std::count(mb.classes.begin(), mb.classes.end(), src.label[i]) > 0;
      EXPECT_EQ(mb.mask[i], from_src ? 1 : 0);
      EXPECT_EQ(mb.label[i], from_src ? src.label[i] : pseudo[i]);
      for (std::size_t ch = 0; ch < 3; ++ch)
        EXPECT_EQ(mb.image[ch * 1024 + i], from_src ? src.image[ch * 1024 + i] : tgt[ch * 1024 + i]);
    }
  }
}

TEST(ClassMix, DegenerateMasks) {
  std::mt19937_64 rng(3);
  bench::Sample src{random_tensor({3, 4, 4}, rng), std::vector<int>(16, 2)};
  Tensor tgt = random_tensor({3, 4, 4}, rng);
  std::vector<int> pseudo(16, 1);
  auto all = train::classmix(src, tgt, pseudo, rng);
  ASSERT_EQ(all.classes, std::vector<int>{2});
  for (std::size_t i = 0; i < src.image.size(); ++i) EXPECT_EQ(all.image[i], src.image[i]);
  auto none = train::classmix_with_classes(src, tgt, pseudo, {});
  for (std::size_t i = 0; i < tgt.size(); ++i) EXPECT_EQ(none.image[i], tgt[i]);
  for (int v : none.label) EXPECT_EQ(v, 1);

  bench::Sample two{random_tensor({3, 2, 2}, rng), {0, 1, 1, 0}};
  Tensor t2 = random_tensor({3, 2, 2}, rng);
  auto m = train::classmix_with_classes(two, t2, {3, 3, 3, 3}, {0});
  EXPECT_EQ(m.mask, (std::vector<unsigned char>{1, 0, 0, 1}));
  EXPECT_EQ(m.label, (std::vector<int>{0, 3, 3, 0}));
}

TEST(UdaStep, LossCompositionAndFreeze) {
  ViTConfig c = small();
  SegModel student = make_model(c, true);
  SegModel teacher = student.detached_copy();
  AdamW opt;
  opt.add_group("decoder", 1e-3, student.decoder().named_params());
  opt.add_group("peft", 1e-3, student.adapter()->named_params());
  const auto src = samples(bench::default_source_spec(), 2, 1);
  const auto tgt = samples(bench::default_target_spec(), 2, 2);
  const auto before = student.backbone().checksum();
  std::mt19937_64 rng(4);
  for (long s = 0; s < 5; ++s) {
    const bench::Sample* sb[] = {&src[s % 2]};
    const Tensor* tb[] = {&tgt[s % 2].image};
    auto r = train::uda_step(student, teacher, opt, sb, tb, 0.5, 0.99, rng, s);
    EXPECT_EQ(r.total, r.l_src + 0.5 * r.l_mix);
  }
  EXPECT_EQ(student.backbone().checksum(), before);
  for (auto& p : student.backbone().named_params()) {
    if (!p.tensor->has_grad()) continue;
    for (double v : p.tensor->grad()) EXPECT_EQ(v, 0.0) << p.name;
  }
  for (auto& p : teacher.trainable_params()) EXPECT_FALSE(p.tensor->has_grad()) << p.name;
}

TEST(UdaStep, ZeroLambdaMatchesSourceStep) {
  ViTConfig c = small();
  SegModel a = make_model(c, true, 5), b = make_model(c, true, 5);
  SegModel ta = a.detached_copy();
  AdamW oa, ob;
  oa.add_group("decoder", 1e-3, a.decoder().named_params());
  oa.add_group("peft", 1e-3, a.adapter()->named_params());
  ob.add_group("decoder", 1e-3, b.decoder().named_params());
  ob.add_group("peft", 1e-3, b.adapter()->named_params());
  const auto src = samples(bench::default_source_spec(), 1, 6);
  const auto tgt = samples(bench::default_target_spec(), 1, 7);
  std::mt19937_64 rng(8);
  const bench::Sample* sb[] = {&src[0]};
  const Tensor* tb[] = {&tgt[0].image};
  for (long s = 0; s < 3; ++s) {
    train::uda_step(a, ta, oa, sb, tb, 0.0, 0.99, rng, s);
    train::dg_step(b, ob, sb, s);
  }
  auto pa = a.trainable_params(), pb = b.trainable_params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i].tensor->size(); ++k) EXPECT_EQ((*pa[i].tensor)[k], (*pb[i].tensor)[k]) << pa[i].name;
}

TEST(DgStep, OverfitsSmallSetAndIsDeterministic) {
  ViTConfig c = small();
  const auto set = samples(bench::default_source_spec(), 4, 9);
  auto run = [&] {
    SegModel m = make_model(c, true, 3);
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    opt.add_group("decoder", 1e-2, m.decoder().named_params());
    opt.add_group("peft", 1e-2, m.adapter()->named_params());
    std::vector<double> losses;
    for (long s = 0; s < 200; ++s) {
      std::vector<const bench::Sample*> b{&set[0], &set[1], &set[2], &set[3]};
      losses.push_back(train::dg_step(m, opt, b, s).l_src);
    }
    return losses;
  };
  // The frozen random backbone limits what the head can fit, so the
  // backbone is trained here as well.
  auto run_full = [&] {
    SegModel m = make_model(c, false, 3);
    m.backbone().set_trainable(true);
    AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.0});
    opt.add_group("backbone", 3e-3, m.backbone().named_params());
    opt.add_group("decoder", 3e-3, m.decoder().named_params());
    std::vector<double> losses;
    for (long s = 0; s < 200; ++s) {
      std::vector<const bench::Sample*> b{&set[0], &set[1], &set[2], &set[3]};
      losses.push_back(train::dg_step(m, opt, b, s).l_src);
    }
    return losses;
  };
  auto l1 = run(), l2 = run();
  EXPECT_EQ(l1, l2);
  auto lf = run_full();
  EXPECT_LT(lf.back(), 0.1 * lf.front()) << lf.front() << " -> " << lf.back();
}

TEST(DgStep, ZeroLearningRateLeavesParameters) {
  ViTConfig c = small();
  SegModel m = make_model(c, true, 4);
  AdamW opt(AdamWConfig{0.9, 0.999, 1e-8, 0.01});
  opt.add_group("decoder", 0.0, m.decoder().named_params());
  opt.add_group("peft", 0.0, m.adapter()->named_params());
  std::vector<Tensor> before;
  for (auto& p : m.trainable_params()) before.push_back(*p.tensor);
  const auto set = samples(bench::default_source_spec(), 1, 10);
  const bench::Sample* b[] = {&set[0]};
  train::dg_step(m, opt, b, 0);
  auto after = m.trainable_params();
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t k = 0; k < before[i].size(); ++k) EXPECT_EQ((*after[i].tensor)[k], before[i][k]);
}

TEST(Pretrain, ZeroStepsKeepsInitAndSourceOracle) {
  ViTConfig c = desk();
  const auto train_set = samples(bench::default_source_spec(), 200, 11);
  const auto val_set = samples(bench::default_source_spec(), 50, 12);
  SegModel untouched = make_model(c, false, 7);
  const auto init = untouched.backbone().checksum();
  train::pretrain_source(untouched, train_set, 0, 4, 1e-3, 0);
  EXPECT_EQ(untouched.backbone().checksum(), init);

  SegModel m = make_model(c, false, 7);
  train::pretrain_source(m, train_set, 500, 4, 1e-3, 0);
  SegModel m2 = make_model(c, false, 7);
  train::pretrain_source(m2, train_set, 500, 4, 1e-3, 0);
  EXPECT_EQ(m.backbone().checksum(), m2.backbone().checksum());
  const double miou = train::evaluate_model(m, val_set).miou;
  EXPECT_GT(miou, 0.85);
  // The same network used as a teacher labels source images accurately.
  std::vector<std::vector<int>> preds, labels;
  for (const auto& s : val_set) {
    preds.push_back(train::pseudo_label(m, s.image));
    labels.push_back(s.label);
  }
  EXPECT_GT(bench::evaluate(preds, labels, 4).miou, 0.85);
}

TEST(BatchIndices, KeyedBySeedAndStep) {
  EXPECT_EQ(train::batch_indices(1, 5, 0, 4, 100), train::batch_indices(1, 5, 0, 4, 100));
  EXPECT_NE(train::batch_indices(1, 5, 0, 4, 100), train::batch_indices(1, 6, 0, 4, 100));
  EXPECT_NE(train::batch_indices(1, 5, 0, 4, 100), train::batch_indices(1, 5, 1, 4, 100));
  EXPECT_THROW(train::batch_indices(1, 5, 0, 4, 0), DimensionError);
}
