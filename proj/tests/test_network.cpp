#include <gtest/gtest.h>

#include "fun/gradcheck.hpp"
#include "fun/network.hpp"

using namespace fun;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

FunConfig tiny_config() {
  FunConfig cfg;
  cfg.bands = 4;
  cfg.base_channels = 4;
  cfg.depths = {1, 1, 1, 1, 1, 1};
  cfg.bank_size = 4;
  cfg.detection.num_classes = 2;
  cfg.detection.head_channels = 4;
  return cfg;
}

}  // namespace

TEST(Network, ShapePropagation) {
  FunConfig cfg;  // C = 16, 8 bands
  auto m = FunModel<double>::build(cfg, 1);
  Rng rng(1);
  auto out = m.forward(Var<double>::constant(random_tensor({32, 32, 8}, rng)));
  EXPECT_EQ(out.residual.shape(), (Shape{32, 32, 8}));
  EXPECT_EQ(out.reconstruction.shape(), (Shape{32, 32, 8}));
  ASSERT_EQ(out.pyramid.size(), 3u);
  EXPECT_EQ(out.pyramid[0].shape(), (Shape{4, 4, 128}));
  EXPECT_EQ(out.pyramid[1].shape(), (Shape{8, 8, 64}));
  EXPECT_EQ(out.pyramid[2].shape(), (Shape{16, 16, 32}));
  EXPECT_EQ(out.strides, (std::vector<std::size_t>{8, 4, 2}));
  ASSERT_EQ(out.det.size(), 3u);
  EXPECT_EQ(out.det[2].cls.shape(), (Shape{16, 16, 5}));
  EXPECT_EQ(out.det[2].reg.shape(), (Shape{16, 16, 4}));
  EXPECT_EQ(out.det[2].ctr.shape(), (Shape{16, 16, 1}));
}

TEST(Network, BatchedAndRectangularInputs) {
  auto cfg = tiny_config();
  cfg.bands = 3;
  auto m = FunModel<double>::build(cfg, 2);
  Rng rng(2);
  auto out = m.forward(Var<double>::constant(random_tensor({2, 16, 24, 3}, rng)));
  EXPECT_EQ(out.reconstruction.shape(), (Shape{2, 16, 24, 3}));
  EXPECT_EQ(out.pyramid[0].shape(), (Shape{2, 2, 3, 32}));
}

TEST(Network, BatchMatchesPerImage) {
  auto cfg = tiny_config();
  auto m = FunModel<double>::build(cfg, 3);
  Rng rng(3);
  auto a = random_tensor({16, 16, 4}, rng), b = random_tensor({16, 16, 4}, rng);
  Tensor<double> ab({2, 16, 16, 4});
  std::copy(a.data().begin(), a.data().end(), ab.data().begin());
  std::copy(b.data().begin(), b.data().end(), ab.data().begin() + static_cast<std::ptrdiff_t>(a.numel()));
  auto batched = m.forward(Var<double>::constant(ab)).reconstruction.value();
  auto ra = m.forward(Var<double>::constant(a)).reconstruction.value();
  auto rb = m.forward(Var<double>::constant(b)).reconstruction.value();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(batched[i], ra[i], 1e-12);
    EXPECT_NEAR(batched[a.numel() + i], rb[i], 1e-12);
  }
}

TEST(Network, NonDivisibleSizeRejected) {
  auto m = FunModel<double>::build(tiny_config(), 4);
  EXPECT_THROW(m.forward(Var<double>::constant(Tensor<double>({12, 16, 4}))), ContractError);
  EXPECT_THROW(m.forward(Var<double>::constant(Tensor<double>({16, 16, 5}))), ShapeError);
}

TEST(Network, ZeroProjectionGivesResidualIdentity) {
  auto m = FunModel<double>::build(FunConfig{}, 5);
  m.output_projection().kernel.node().value.fill(0.0);
  m.output_projection().bias.node().value.fill(0.0);
  Rng rng(5);
  auto h = random_tensor({16, 16, 8}, rng, 0, 1);
  auto out = m.forward(Var<double>::constant(h), false);
  for (double v : out.residual.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.reconstruction.value(), h);
}

TEST(Network, ReconstructFromMeasurement) {
  auto m = FunModel<double>::build(FunConfig{}, 6);
  m.output_projection().kernel.node().value.fill(0.0);
  m.output_projection().bias.node().value.fill(0.0);
  Rng rng(6);
  HsiCube<double> x(random_tensor({16, 16, 8}, rng, 0, 1));
  CodedAperture<double> mask(16, 16, 0.5);
  auto d = DispersionSpec::uniform(2, 8);
  auto y = cassi::forward(x, mask, d, 0.0, 0);
  auto rec = m.reconstruct(y, mask, d);
  auto h = cassi::shift_back(y, d, 8);
  for (auto& v : h.tensor().data()) v *= 0.25;  // 1 / (8 bands * 0.5)
  EXPECT_EQ(rec, h);
  CodedAperture<double> wrong(8, 16, 1.0);
  EXPECT_THROW(m.reconstruct(y, wrong, d), ShapeError);
}

TEST(Network, ChannelScheduleInvariant) {
  for (auto sched : {FunConfig::kDoublingSchedule, FunConfig::kCappedSchedule}) {
    FunConfig cfg;
    cfg.channel_mult = sched;
    EXPECT_NO_THROW(cfg.validate());
    for (std::size_t s = 1; s < 4; ++s) EXPECT_GE(cfg.stage_channels(s), cfg.stage_channels(s - 1));
    for (std::size_t s = 4; s < 6; ++s) EXPECT_LE(cfg.stage_channels(s), cfg.stage_channels(3));
  }
  FunConfig bad;
  bad.channel_mult = {1, 2, 4, 4, 8, 2};
  EXPECT_THROW(bad.validate(), ContractError);
  bad.channel_mult = {2, 1, 4, 8, 4, 2};
  EXPECT_THROW(bad.validate(), ContractError);
  FunConfig zero_depth;
  zero_depth.depths[2] = 0;
  EXPECT_THROW(zero_depth.validate(), ContractError);
}

TEST(Network, CappedScheduleBuilds) {
  FunConfig cfg;
  cfg.channel_mult = FunConfig::kCappedSchedule;
  auto m = FunModel<double>::build(cfg, 7);
  Rng rng(7);
  auto out = m.forward(Var<double>::constant(random_tensor({16, 16, 8}, rng)));
  EXPECT_EQ(out.pyramid[0].shape(), (Shape{2, 2, 64}));
  EXPECT_EQ(out.pyramid[1].shape(), (Shape{4, 4, 64}));
}

TEST(Network, DeterministicBuildAndParameterCount) {
  auto a = FunModel<float>::build(FunConfig{}, 11), b = FunModel<float>::build(FunConfig{}, 11);
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params().items()[i].first, b.params().items()[i].first);
    EXPECT_EQ(a.params().items()[i].second.value(), b.params().items()[i].second.value());
  }
  // Parameter count of the default toy config is a function of the config alone.
  EXPECT_EQ(a.parameter_count(), 759662u);
  auto c = FunModel<float>::build(FunConfig{}, 12);
  EXPECT_EQ(c.parameter_count(), a.parameter_count());
  EXPECT_NE(c.params().items()[0].second.value(), a.params().items()[0].second.value());
}

TEST(Network, EndToEndGradientCheck) {
  auto cfg = tiny_config();
  auto m = FunModel<double>::build(cfg, 8);
  Rng rng(8);
  auto h = Var<double>::constant(random_tensor({16, 16, 4}, rng, 0, 1));
  auto target = Var<double>::constant(random_tensor({16, 16, 4}, rng, 0, 1));
  std::vector<std::vector<Annotation>> ann{{{0, {2, 3, 9, 8}}, {1, {10, 9, 15, 15}}, {1, {1, 10, 6, 15}}}};
  const auto tg = assign_targets(ann, m.levels(16, 16));
  auto loss_fn = [&] {
    auto out = m.forward(h);
    auto dl = detection_loss(out.det, tg, cfg.detection);
    auto recon = mean(square(sub(out.reconstruction, target)));
    return add(add(add(dl.cls, dl.reg), dl.ctr), scale(recon, 5.0));
  };
  auto res = grad_check(m.params().items(), loss_fn, {.points_per_param = 2, .seed = 3});
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
  EXPECT_GT(res.checked, 200u);
}
