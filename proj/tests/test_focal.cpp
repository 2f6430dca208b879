#include <gtest/gtest.h>

#include <cmath>

#include "fun/focal.hpp"
#include "fun/gradcheck.hpp"

using namespace fun;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

void set_identity(Linear<double>& l) {
  auto& w = l.weight.mutable_value();
  w.fill(0.0);
  for (std::size_t i = 0; i < std::min(l.in(), l.out()); ++i) w[i * l.out() + i] = 1.0;
  l.bias.mutable_value().fill(0.0);
}

void zero_all(ParamStore<double>& store) {
  for (auto& [_, v] : store.items()) const_cast<Var<double>&>(v).mutable_value().fill(0.0);
}

// Side length of the bounding square of nonzero entries in channel 0.
std::size_t support_side(const Tensor<double>& z) {
  const std::size_t h = z.dim(0), w = z.dim(1), c = z.dim(2);
  std::size_t lo = h, hi = 0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      if (z[(i * w + j) * c] != 0.0) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
      }
  return lo > hi ? 0 : hi - lo + 1;
}

NamedVars as_named(const ParamStore<double>& store) { return store.items(); }

constexpr double kComposedTol = 1e-4;

}  // namespace

// ---------------------------------------------------------------------------
// FSM

TEST(Fsm, ReceptiveFieldFormula) {
  FsmConfig cfg;
  cfg.kernels = {3, 3, 3};
  EXPECT_EQ(cfg.receptive_fields(), (std::vector<std::size_t>{3, 5, 7}));
  cfg.kernels = {3, 5};
  EXPECT_EQ(cfg.receptive_fields(), (std::vector<std::size_t>{3, 7}));
}

TEST(Fsm, ConfigValidation) {
  FsmConfig cfg;
  cfg.kernels = {};
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg.kernels = {4};
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(Fsm, ImpulseSupportMatchesReceptiveField) {
  for (std::vector<std::size_t> kernels : {std::vector<std::size_t>{3, 3, 3}, std::vector<std::size_t>{3, 5}}) {
    FsmConfig cfg;
    cfg.channels = 2;
    cfg.kernels = kernels;
    cfg.bypass_gelu = true;
    ParamStore<double> store;
    Rng rng(3);
    auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
    set_identity(p.f_z);
    for (auto& k : p.dw) k.mutable_value().fill(1.0);

    const std::size_t n = 17, mid = n / 2;
    Tensor<double> x({n, n, 2});
    x.at(mid, mid, 0) = 1.0;
    const auto z = hierarchical_contextualize(Var<double>::constant(x), cfg, p);
    ASSERT_EQ(z.size(), cfg.levels() + 1);
    const auto r = cfg.receptive_fields();
    for (std::size_t l = 0; l < cfg.levels(); ++l) EXPECT_EQ(support_side(z[l].value()), r[l]) << "level " << l + 1;
  }
}

TEST(Fsm, ImpulseSupportWithGelu) {
  // GeLU keeps positives positive and zero at zero, so support is unchanged.
  FsmConfig cfg;
  cfg.channels = 1;
  cfg.kernels = {3, 3, 3};
  ParamStore<double> store;
  Rng rng(4);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  set_identity(p.f_z);
  for (auto& k : p.dw) k.mutable_value().fill(1.0);
  Tensor<double> x({15, 15, 1});
  x.at(7, 7, 0) = 1.0;
  const auto z = hierarchical_contextualize(Var<double>::constant(x), cfg, p);
  EXPECT_EQ(support_side(z[0].value()), 3u);
  EXPECT_EQ(support_side(z[1].value()), 5u);
  EXPECT_EQ(support_side(z[2].value()), 7u);
}

TEST(Fsm, ConstantInputUnitSumKernelsStaysConstant) {
  FsmConfig cfg;
  cfg.channels = 3;
  cfg.kernels = {3, 5};
  cfg.bypass_gelu = true;
  ParamStore<double> store;
  Rng rng(5);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  set_identity(p.f_z);
  for (std::size_t l = 0; l < p.dw.size(); ++l) {
    const double k = static_cast<double>(cfg.kernels[l]);
    p.dw[l].mutable_value().fill(1.0 / (k * k));
  }
  // Zero padding breaks constancy at the border, so only the interior is checked.
  const std::size_t n = 16;
  Tensor<double> x({n, n, 3}, 0.75);
  const auto z = hierarchical_contextualize(Var<double>::constant(x), cfg, p);
  const std::size_t margin = 1 + 2;  // half-widths of k=3 and k=5
  for (std::size_t l = 0; l < cfg.levels(); ++l)
    for (std::size_t i = margin; i < n - margin; ++i)
      for (std::size_t j = margin; j < n - margin; ++j)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(z[l].value().at(i, j, c), 0.75, 1e-14);
  EXPECT_EQ(z.back().shape(), (Shape{1, 1, 3}));
}

TEST(Fsm, GlobalContextIsMeanOfLastLevel) {
  FsmConfig cfg;
  cfg.channels = 4;
  ParamStore<double> store;
  Rng rng(6);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto x = Var<double>::constant(random_tensor({6, 5, 4}, rng));
  const auto z = hierarchical_contextualize(x, cfg, p);
  const auto& zl = z[cfg.levels() - 1].value();
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 30; ++i) s += zl[i * 4 + c];
    EXPECT_NEAR(z.back().value()[c], s / 30.0, 1e-14);
  }
}

TEST(Fsm, WrongChannelCountThrows) {
  FsmConfig cfg;
  cfg.channels = 4;
  ParamStore<double> store;
  Rng rng(7);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  EXPECT_THROW(hierarchical_contextualize(Var<double>::constant(Tensor<double>({4, 4, 3})), cfg, p), ShapeError);
}

TEST(Fsm, OneHotGatesSelectLevel) {
  FsmConfig cfg;
  cfg.channels = 8;
  ParamStore<double> store;
  Rng rng(8);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto x = Var<double>::constant(random_tensor({4, 4, 8}, rng));
  const auto z = hierarchical_contextualize(x, cfg, p);
  for (std::size_t j = 0; j < z.size(); ++j) {
    // Zero gate weights and a one-hot bias force G = e_j everywhere.
    p.f_g.weight.mutable_value().fill(0.0);
    p.f_g.bias.mutable_value().fill(0.0);
    p.f_g.bias.mutable_value()[j] = 1.0;
    const auto out = gated_aggregate(x, z, p).value();
    ASSERT_EQ(out.shape(), (Shape{4, 4, 8}));
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t c = 0; c < 8; ++c) {
        const double expect = z[j].shape()[0] == 1 ? z[j].value()[c] : z[j].value()[i * 8 + c];
        EXPECT_EQ(out[i * 8 + c], expect);
      }
  }
}

TEST(Fsm, ZeroGatesGiveZero) {
  FsmConfig cfg;
  cfg.channels = 8;
  ParamStore<double> store;
  Rng rng(9);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  p.f_g.weight.mutable_value().fill(0.0);
  p.f_g.bias.mutable_value().fill(0.0);
  auto x = Var<double>::constant(random_tensor({4, 4, 8}, rng));
  const auto out = gated_aggregate(x, hierarchical_contextualize(x, cfg, p), p).value();
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fsm, AggregationMatchesDirectSummation) {
  FsmConfig cfg;
  cfg.channels = 8;
  ParamStore<double> store;
  Rng rng(10);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto x = Var<double>::constant(random_tensor({4, 4, 8}, rng));
  const auto z = hierarchical_contextualize(x, cfg, p);
  const auto g = p.f_g(x).value();
  const auto out = gated_aggregate(x, z, p).value();
  const std::size_t levels = z.size();
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      double acc = 0.0;
      for (std::size_t l = 0; l < levels; ++l) {
        const double zv = z[l].shape()[0] == 1 ? z[l].value()[c] : z[l].value()[i * 8 + c];
        acc += g[i * levels + l] * zv;
      }
      EXPECT_EQ(out[i * 8 + c], acc);
    }
}

TEST(Fsm, ShapePreservedAndZeroInputZeroOutput) {
  FsmConfig cfg;
  cfg.channels = 6;
  cfg.kernels = {3, 5, 7};
  ParamStore<double> store;
  Rng rng(11);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto y = fsm_forward(Var<double>::constant(random_tensor({2, 5, 7, 6}, rng)), cfg, p);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 7, 6}));
  auto y0 = fsm_forward(Var<double>::constant(Tensor<double>({5, 7, 6})), cfg, p).value();
  for (double v : y0.data()) EXPECT_EQ(v, 0.0);
}

TEST(Fsm, GradientCheck) {
  FsmConfig cfg;
  cfg.channels = 4;
  ParamStore<double> store;
  Rng rng(12);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto x = Var<double>::parameter(random_tensor({5, 5, 4}, rng));
  NamedVars named = as_named(store);
  named.emplace_back("x", x);
  auto res = grad_check(named, [&] { return weighted_sum(fsm_forward(x, cfg, p), 99); }, {.points_per_param = 4});
  EXPECT_LT(res.max_rel_error, kComposedTol) << res.worst;
}

// ---------------------------------------------------------------------------
// LRSM

TEST(Lrsm, DefaultRank) {
  EXPECT_EQ(LrsmConfig::default_rank(16), 4u);
  EXPECT_EQ(LrsmConfig::default_rank(64), 16u);
  EXPECT_EQ(LrsmConfig::default_rank(3), 3u);
  LrsmConfig bad{.channels = 4, .rank = 5, .bank = 2};
  EXPECT_THROW(bad.validate(), ContractError);
}

TEST(Lrsm, CoefficientsSumToOne) {
  LrsmConfig cfg{.channels = 16, .rank = 4, .bank = 32};
  ParamStore<double> store;
  Rng rng(20);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = Var<double>::constant(random_tensor({2, 6, 6, 16}, rng, -3, 3));
    auto coeff = lrsm_aggregate(lrsm_project(x, mem), mem).coefficients.value();
    ASSERT_EQ(coeff.shape(), (Shape{2, 1, 1, 32}));
    for (std::size_t n = 0; n < 2; ++n) {
      double s = 0;
      for (std::size_t b = 0; b < 32; ++b) s += coeff[n * 32 + b];
      EXPECT_LT(std::abs(s - 1.0), 1e-6);
    }
  }
}

TEST(Lrsm, DegenerateBankReturnsCommonColumn) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 6};
  ParamStore<double> store;
  Rng rng(21);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  const double v[4] = {0.5, -1.25, 2.0, 0.125};
  auto& bank = mem.bank.mutable_value();
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t b = 0; b < 6; ++b) bank[k * 6 + b] = v[k];
  for (int trial = 0; trial < 5; ++trial) {
    auto zk = Var<double>::constant(random_tensor({1, 1, 4}, rng, -5, 5));
    auto zl = lrsm_aggregate(zk, mem).low_rank.value();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(zl[k], v[k], 1e-15);
  }
}

TEST(Lrsm, BankPermutationInvariance) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 6};
  ParamStore<double> store;
  Rng rng(22);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  auto zk = Var<double>::constant(random_tensor({1, 1, 4}, rng, -2, 2));
  const auto base = lrsm_aggregate(zk, mem).low_rank.value();

  // Reversal keeps the floating-point summation over B identical up to order;
  // a swap of two identical-magnitude positions checks exactness.
  const std::size_t perm[6] = {1, 0, 2, 3, 4, 5};
  Tensor<double> original = mem.bank.value();
  auto& bank = mem.bank.mutable_value();
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t b = 0; b < 6; ++b) bank[k * 6 + b] = original[k * 6 + perm[b]];
  const auto swapped = lrsm_aggregate(zk, mem).low_rank.value();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(swapped[k], base[k], 1e-15);

  Rng prng(23);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> p{0, 1, 2, 3, 4, 5};
    for (std::size_t i = 5; i > 0; --i) std::swap(p[i], p[static_cast<std::size_t>(prng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t b = 0; b < 6; ++b) bank[k * 6 + b] = original[k * 6 + p[b]];
    const auto permuted = lrsm_aggregate(zk, mem).low_rank.value();
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(permuted[k], base[k], 1e-14);
  }
}

TEST(Lrsm, MatchesDirectMatrixArithmetic) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 6};
  ParamStore<double> store;
  Rng rng(24);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  auto zk_t = random_tensor({4}, rng, -2, 2);
  const auto got = lrsm_aggregate(Var<double>::constant(zk_t), mem);
  const auto& m = mem.bank.value();
  double logits[6], mx = -1e300;
  for (std::size_t b = 0; b < 6; ++b) {
    logits[b] = 0;
    for (std::size_t k = 0; k < 4; ++k) logits[b] += zk_t[k] * m[k * 6 + b];
    mx = std::max(mx, logits[b]);
  }
  double z = 0, I[6];
  for (std::size_t b = 0; b < 6; ++b) z += (I[b] = std::exp(logits[b] - mx));
  for (std::size_t b = 0; b < 6; ++b) {
    I[b] /= z;
    EXPECT_NEAR(got.coefficients.value()[b], I[b], 1e-15);
  }
  for (std::size_t k = 0; k < 4; ++k) {
    double acc = 0;
    for (std::size_t b = 0; b < 6; ++b) acc += I[b] * m[k * 6 + b];
    EXPECT_NEAR(got.low_rank.value()[k], acc, 1e-15);
  }
}

TEST(Lrsm, ModulatorStrictlyInsideUnitInterval) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 12};
  ParamStore<double> store;
  Rng rng(25);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = lrsm_modulator(Var<double>::constant(random_tensor({5, 5, 8}, rng, -4, 4)), mem).value();
    ASSERT_EQ(s.shape(), (Shape{1, 1, 8}));
    for (double v : s.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Lrsm, ChannelwiseScaling) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 12};
  ParamStore<double> store;
  Rng rng(26);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  auto x = Var<double>::constant(random_tensor({3, 4, 8}, rng));
  const auto y = lrsm_forward(x, mem).value();
  const auto q = mem.q(x).value();
  const auto s = lrsm_modulator(x, mem).value();
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y[i * 8 + c], q[i * 8 + c] * s[c]);
}

TEST(Lrsm, GradientCheckThroughBank) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 6};
  ParamStore<double> store;
  Rng rng(27);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  auto x = Var<double>::parameter(random_tensor({4, 4, 8}, rng));
  NamedVars named = as_named(store);
  named.emplace_back("x", x);
  auto res = grad_check(named, [&] { return weighted_sum(lrsm_forward(x, mem), 5); }, {.points_per_param = 6});
  EXPECT_LT(res.max_rel_error, kComposedTol) << res.worst;
}

// ---------------------------------------------------------------------------
// SSMB

TEST(Ssmb, ShapePreserved) {
  auto cfg = SsmbConfig::with_channels(8);
  ParamStore<double> store;
  Rng rng(30);
  auto p = SsmbParams<double>::create(store, "blk", cfg, rng);
  auto y = ssmb_forward(Var<double>::constant(random_tensor({2, 4, 6, 8}, rng)), cfg, p);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 6, 8}));
}

TEST(Ssmb, ZeroWeightsGiveResidualIdentity) {
  auto cfg = SsmbConfig::with_channels(8);
  ParamStore<double> store;
  Rng rng(31);
  auto p = SsmbParams<double>::create(store, "blk", cfg, rng);
  zero_all(store);
  auto x = Var<double>::constant(random_tensor({4, 4, 8}, rng));
  EXPECT_EQ(ssmb_forward(x, cfg, p).value(), x.value());
}

TEST(Ssmb, MismatchedChannelsRejected) {
  auto cfg = SsmbConfig::with_channels(8);
  cfg.lrsm.channels = 4;
  EXPECT_THROW(cfg.validate(), ContractError);
}

TEST(Ssmb, GradientCheck) {
  auto cfg = SsmbConfig::with_channels(4, {3, 5}, 6);
  ParamStore<double> store;
  Rng rng(32);
  auto p = SsmbParams<double>::create(store, "blk", cfg, rng);
  // Nonzero affine norm parameters exercise every path.
  for (auto& [name, v] : store.items())
    if (name.find("norm") != std::string::npos)
      for (auto& e : const_cast<Var<double>&>(v).mutable_value().data()) e += rng.uniform(-0.3, 0.3);
  auto x = Var<double>::parameter(random_tensor({4, 4, 4}, rng));
  NamedVars named = as_named(store);
  named.emplace_back("x", x);
  auto res = grad_check(named, [&] { return weighted_sum(ssmb_forward(x, cfg, p), 17); }, {.points_per_param = 3});
  EXPECT_LT(res.max_rel_error, kComposedTol) << res.worst;
}

// ---------------------------------------------------------------------------
// Self-attention reference and operation counts

TEST(Attention, SingleTokenReturnsValue) {
  ParamStore<double> store;
  Rng rng(40);
  auto p = AttentionParams<double>::create(store, "att", 5, rng);
  auto x = random_tensor({1, 1, 5}, rng);
  auto y = naive_self_attention(x, p);
  auto v = p.v(Var<double>::constant(x)).value();
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(y[c], v[c], 1e-15);
}

TEST(Attention, UniformTokensReturnCommonValue) {
  ParamStore<double> store;
  Rng rng(41);
  auto p = AttentionParams<double>::create(store, "att", 4, rng);
  auto tok = random_tensor({4}, rng);
  Tensor<double> x({3, 3, 4});
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t c = 0; c < 4; ++c) x[i * 4 + c] = tok[c];
  auto y = naive_self_attention(x, p);
  auto v = p.v(Var<double>::constant(tok)).value();
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[i * 4 + c], v[c], 1e-14);
}

namespace {
template <class F>
std::uint64_t count_macs(F&& f) {
  MacCounter::reset();
  f();
  return MacCounter::value();
}
}  // namespace

TEST(Complexity, FsmLinearAttentionQuadratic) {
  const std::size_t c = 16;
  FsmConfig cfg;
  cfg.channels = c;
  ParamStore<double> store;
  Rng rng(42);
  auto fsm = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto att = AttentionParams<double>::create(store, "att", c, rng);
  auto small = random_tensor({16, 16, c}, rng), large = random_tensor({32, 32, c}, rng);

  const double fsm_ratio = static_cast<double>(count_macs([&] { fsm_forward(Var<double>::constant(large), cfg, fsm); })) /
                           static_cast<double>(count_macs([&] { fsm_forward(Var<double>::constant(small), cfg, fsm); }));
  const double att_ratio = static_cast<double>(count_macs([&] { naive_self_attention(large, att); })) /
                           static_cast<double>(count_macs([&] { naive_self_attention(small, att); }));
  EXPECT_NEAR(fsm_ratio, 4.0, 0.4);
  EXPECT_NEAR(att_ratio, 16.0, 1.6);
}
