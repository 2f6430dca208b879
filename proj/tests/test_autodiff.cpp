#include <gtest/gtest.h>

#include <cmath>

#include "fun/gradcheck.hpp"
#include "fun/ops.hpp"
#include "fun/random.hpp"

using namespace fun;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Var<double> param(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var<double>::parameter(random_tensor(std::move(s), rng, lo, hi));
}

// Fixed random weighting turns any output into a scalar loss with a generic cotangent.
Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

constexpr double kPointwiseTol = 1e-6;
constexpr double kPrimitiveTol = 1e-5;

}  // namespace

TEST(Tensor, ShapeInvariant) {
  Tensor<double> t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Ops, MulElementwise) {
  auto a = Var<double>::constant(Tensor<double>({2}, {1, 2}));
  auto b = Var<double>::constant(Tensor<double>({2}, {3, 4}));
  auto y = mul(a, b);
  EXPECT_EQ(y.value()[0], 3.0);
  EXPECT_EQ(y.value()[1], 8.0);
}

TEST(Ops, MulByOnesIsIdentity) {
  Rng rng(1);
  auto x = Var<double>::constant(random_tensor({3, 4, 2}, rng));
  auto y = mul(x, Var<double>::constant(Tensor<double>::ones({3, 4, 2})));
  EXPECT_EQ(y.value(), x.value());
}

TEST(Ops, IncompatibleShapesNameBoth) {
  auto a = Var<double>::constant(Tensor<double>({2, 3}));
  auto b = Var<double>::constant(Tensor<double>({4}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

TEST(Ops, MulGradientIsOtherOperand) {
  Rng rng(2);
  auto a = param({5}, rng);
  auto b = Var<double>::constant(random_tensor({5}, rng));
  {
    Tape<double> tape;
    tape.backward(sum(mul(a, b)));
  }
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(a.grad()[i], b.value()[i]);
  auto r = grad_check({{"a", a}}, [&] { return sum(mul(a, b)); });
  EXPECT_LT(r.max_rel_error, kPointwiseTol) << r.worst;
}

TEST(Ops, BroadcastGradientsSumReduce) {
  Rng rng(3);
  auto a = param({2, 3, 4}, rng);
  auto b = param({1, 4}, rng);
  auto c = param({2, 1, 1}, rng);
  auto loss = [&] { return weighted_sum(add(mul(a, b), c), 7); };
  auto r = grad_check({{"a", a}, {"b", b}, {"c", c}}, loss);
  EXPECT_LT(r.max_rel_error, kPointwiseTol) << r.worst;
}

TEST(Ops, LinearExamples) {
  auto x = Var<double>::constant(Tensor<double>({2}, {1, 0}));
  auto eye = Var<double>::constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto zero = Var<double>::constant(Tensor<double>({2}));
  auto y = linear(x, eye, zero);
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_EQ(y.value()[1], 0.0);

  auto x2 = Var<double>::constant(Tensor<double>({2}, {1, 2}));
  auto w2 = Var<double>::constant(Tensor<double>({2, 1}, {1, 1}));
  auto b2 = Var<double>::constant(Tensor<double>({1}, {1}));
  EXPECT_EQ(linear(x2, w2, b2).value()[0], 4.0);

  EXPECT_THROW(linear(x2, Var<double>::constant(Tensor<double>({3, 1})), b2), ShapeError);
}

TEST(Ops, LinearGradients) {
  Rng rng(4);
  auto x = param({3, 2, 5}, rng);
  auto w = param({5, 4}, rng);
  auto b = param({4}, rng);
  auto r = grad_check({{"x", x}, {"w", w}, {"b", b}}, [&] { return weighted_sum(linear(x, w, b), 11); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Ops, Conv2dIdentityKernel) {
  Rng rng(5);
  auto x = Var<double>::constant(random_tensor({5, 6, 3}, rng));
  Tensor<double> k({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k.at(1, 1, c, c) = 1.0;
  auto y = conv2d(x, Var<double>::constant(k), 1, 1);
  EXPECT_EQ(y.value(), x.value());
}

TEST(Ops, Conv2dHandSum) {
  auto x = Var<double>::constant(Tensor<double>({2, 2, 1}, {1, 2, 3, 4}));
  auto k = Var<double>::constant(Tensor<double>::ones({2, 2, 1, 1}));
  auto y = conv2d(x, k, 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y.value()[0], 10.0);
}

TEST(Ops, Conv2dOutputExtentAndErrors) {
  auto x = Var<double>::constant(Tensor<double>({7, 9, 2}));
  auto y = conv2d(x, Var<double>::constant(Tensor<double>({3, 3, 2, 4})), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{4, 5, 4}));  // floor((7+2-3)/2)+1, floor((9+2-3)/2)+1
  EXPECT_THROW(conv2d(x, Var<double>::constant(Tensor<double>({9, 3, 2, 1})), 1, 0), ShapeError);
}

TEST(Ops, Conv2dGradients) {
  Rng rng(6);
  auto x = param({2, 5, 5, 3}, rng);
  auto k = param({3, 3, 3, 2}, rng);
  auto r = grad_check({{"x", x}, {"k", k}}, [&] { return weighted_sum(conv2d(x, k, 2, 1), 12); });
  EXPECT_LT(r.max_rel_error, kPrimitiveTol) << r.worst;
}

TEST(Ops, DepthwiseDeltaKernelIsIdentity) {
  Rng rng(7);
  auto x = Var<double>::constant(random_tensor({4, 5, 3}, rng));
  Tensor<double> k({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k.at(1, 1, c) = 1.0;
  EXPECT_EQ(depthwise_conv2d(x, Var<double>::constant(k)).value(), x.value());
  EXPECT_THROW(depthwise_conv2d(x, Var<double>::constant(Tensor<double>({3, 3, 2}))), ShapeError);
}

TEST(Ops, DepthwiseChannelIndependence) {
  Rng rng(8);
  Tensor<double> base = random_tensor({6, 6, 4}, rng);
  auto k = Var<double>::constant(random_tensor({5, 5, 4}, rng));
  auto y0 = depthwise_conv2d(Var<double>::constant(base), k).value();
  Tensor<double> perturbed = base;
  for (std::size_t i = 0; i < perturbed.numel(); i += 4) perturbed[i] += 0.37;
  auto y1 = depthwise_conv2d(Var<double>::constant(perturbed), k).value();
  bool ch0_changed = false;
  for (std::size_t i = 0; i < y0.numel(); ++i) {
    if (i % 4 == 0) {
      ch0_changed = ch0_changed || y0[i] != y1[i];
    } else {
      EXPECT_EQ(y0[i], y1[i]);
    }
  }
  EXPECT_TRUE(ch0_changed);
}

TEST(Ops, DepthwiseGradients) {
  Rng rng(9);
  auto x = param({2, 5, 4, 3}, rng);
  auto k = param({3, 5, 3}, rng);
  auto r = grad_check({{"x", x}, {"k", k}}, [&] { return weighted_sum(depthwise_conv2d(x, k), 13); });
  EXPECT_LT(r.max_rel_error, kPrimitiveTol) << r.worst;
}

TEST(Ops, TransposedConvIsAdjointOfConv) {
  Rng rng(10);
  for (auto [stride, pad, kh, side] :
       {std::tuple{2u, 0u, 2u, 6u}, std::tuple{2u, 1u, 3u, 7u}, std::tuple{1u, 1u, 3u, 6u}}) {
    auto x = Var<double>::constant(random_tensor({2, side, side, 3}, rng));
    auto k = Var<double>::constant(random_tensor({kh, kh, 3, 4}, rng));
    auto cx = conv2d(x, k, stride, pad);
    auto y = Var<double>::constant(random_tensor(cx.shape(), rng));
    auto ty = transposed_conv2d(y, k, stride, pad);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_NEAR(dot(cx.value(), y.value()), dot(x.value(), ty.value()), 1e-10);
  }
}

TEST(Ops, TransposedConvHandExpansion) {
  auto y = Var<double>::constant(Tensor<double>({1, 1, 1}, {2.5}));
  auto k = Var<double>::constant(Tensor<double>::ones({2, 2, 1, 1}));
  auto up = transposed_conv2d(y, k, 2);
  ASSERT_EQ(up.shape(), (Shape{2, 2, 1}));
  for (double v : up.value().data()) EXPECT_EQ(v, 2.5);

  auto zero = Var<double>::constant(Tensor<double>({3, 3, 4}));
  Rng rng(11);
  auto halving = Var<double>::constant(random_tensor({2, 2, 2, 4}, rng));
  auto z = transposed_conv2d(zero, halving, 2);
  EXPECT_EQ(z.shape(), (Shape{6, 6, 2}));
  for (double v : z.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, TransposedConvGradients) {
  Rng rng(12);
  auto y = param({2, 3, 3, 4}, rng);
  auto k = param({2, 2, 2, 4}, rng);
  auto r = grad_check({{"y", y}, {"k", k}}, [&] { return weighted_sum(transposed_conv2d(y, k, 2), 14); });
  EXPECT_LT(r.max_rel_error, kPrimitiveTol) << r.worst;
}

TEST(Ops, ActivationValues) {
  auto z = Var<double>::constant(Tensor<double>({1}, {0.0}));
  EXPECT_EQ(gelu(z).value()[0], 0.0);
  auto s = softmax(Var<double>::constant(Tensor<double>({2}, {0.0, 0.0})));
  EXPECT_EQ(s.value()[0], 0.5);
  EXPECT_EQ(s.value()[1], 0.5);
  EXPECT_NEAR(gelu(Var<double>::constant(Tensor<double>({1}, {1.0}))).value()[0], 0.8413447460685429, 1e-15);
}

TEST(Ops, SoftmaxSumsToOneAlongAxis) {
  Rng rng(13);
  auto x = Var<double>::constant(random_tensor({3, 4, 5}, rng, -5, 5));
  auto s = softmax(x, 1);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 5; ++k) {
      double t = 0;
      for (std::size_t j = 0; j < 4; ++j) t += s.value().at(i, j, k);
      EXPECT_NEAR(t, 1.0, 1e-6);
    }
  EXPECT_THROW(softmax(x, 3), ShapeError);
}

TEST(Ops, LayerNormMoments) {
  Rng rng(14);
  auto x = Var<double>::constant(random_tensor({4, 6}, rng, -3, 3));
  auto g = Var<double>::constant(Tensor<double>::ones({6}));
  auto b = Var<double>::constant(Tensor<double>({6}));
  auto y = layer_norm(x, g, b, 1e-12);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 6; ++j) m += y.value().at(r, j);
    m /= 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y.value().at(r, j) - m) * (y.value().at(r, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 6, 1.0, 1e-9);
  }
  EXPECT_THROW(layer_norm(x, g, b, 0.0), ContractError);
}

TEST(Ops, PointwiseAndNormGradients) {
  Rng rng(15);
  auto x = param({2, 3, 4}, rng, -2, 2);
  auto gamma = param({4}, rng);
  auto beta = param({4}, rng);
  EXPECT_LT(grad_check({{"x", x}}, [&] { return weighted_sum(gelu(x), 1); }).max_rel_error, kPointwiseTol);
  EXPECT_LT(grad_check({{"x", x}}, [&] { return weighted_sum(sigmoid(x), 2); }).max_rel_error, kPointwiseTol);
  EXPECT_LT(grad_check({{"x", x}}, [&] { return weighted_sum(exp(x), 3); }).max_rel_error, kPointwiseTol);
  EXPECT_LT(grad_check({{"x", x}}, [&] { return weighted_sum(softmax(x, 1), 4); }).max_rel_error, kPrimitiveTol);
  auto ln = grad_check({{"x", x}, {"gamma", gamma}, {"beta", beta}},
                       [&] { return weighted_sum(layer_norm(x, gamma, beta), 5); });
  EXPECT_LT(ln.max_rel_error, kPrimitiveTol) << ln.worst;
  auto img = param({2, 3, 3, 4}, rng);
  EXPECT_LT(grad_check({{"img", img}}, [&] { return weighted_sum(global_avg_pool(img), 6); }).max_rel_error, kPrimitiveTol);
}

TEST(Ops, ShapeOpsGradients) {
  Rng rng(16);
  auto a = param({2, 3, 2}, rng);
  auto b = param({2, 3, 5}, rng);
  auto m = param({3, 4}, rng);
  auto r = grad_check({{"a", a}, {"b", b}}, [&] {
    auto c = concat_last(std::vector<Var<double>>{a, b});
    return weighted_sum(mul(slice_last(c, 1, 6), slice_last(c, 2, 7)), 8);
  });
  EXPECT_LT(r.max_rel_error, kPointwiseTol) << r.worst;
  auto r2 = grad_check({{"m", m}}, [&] { return weighted_sum(matmul(m, transpose2d(m)), 9); });
  EXPECT_LT(r2.max_rel_error, kPointwiseTol) << r2.worst;
}

TEST(Autodiff, BackwardRequiresScalar) {
  Rng rng(17);
  auto x = param({3}, rng);
  Tape<double> tape;
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Autodiff, OffPathGradientsStayAbsent) {
  Rng rng(18);
  auto x = param({3}, rng);
  auto unused = param({3}, rng);
  Tape<double> tape;
  auto side = mul(unused, unused);
  tape.backward(sum(square(x)));
  EXPECT_FALSE(unused.has_grad());
  (void)side;
}

TEST(Autodiff, NoTapeMeansNoRecording) {
  Rng rng(19);
  auto x = param({3}, rng);
  auto y = sum(square(x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, TapeIsTopologicalAndReplaysEachRecordOnce) {
  Rng rng(20);
  auto x = param({4}, rng);
  Tape<double> tape;
  auto y = sum(mul(gelu(x), x));
  ASSERT_EQ(tape.size(), 3u);
  const auto& recs = tape.records();
  for (std::size_t i = 0; i < recs.size(); ++i)
    for (auto* in : recs[i].inputs) {
      bool is_leaf_or_earlier = in == x.id();
      for (std::size_t j = 0; j < i; ++j) is_leaf_or_earlier = is_leaf_or_earlier || recs[j].output.get() == in;
      EXPECT_TRUE(is_leaf_or_earlier);
    }
  tape.backward(y);
  Tensor<double> once = x.grad();
  for (std::size_t i = 0; i < 4; ++i) {
    const double v = x.value()[i];
    EXPECT_NEAR(once[i], gelu_derivative(v) * v + gelu_value(v), 1e-14);
  }
}

TEST(Autodiff, BackwardIsLinearInTheLoss) {
  Rng rng(21);
  auto x = param({2, 3}, rng);
  auto w = param({3, 2}, rng);
  auto b = param({2}, rng);
  auto f1 = [&] { return sum(gelu(linear(x, w, b))); };
  auto f2 = [&] { return weighted_sum(sigmoid(linear(x, w, b)), 3); };
  auto grads = [&](auto fn) {
    x.zero_grad();
    w.zero_grad();
    Tape<double> tape;
    tape.backward(fn());
    return w.grad();
  };
  auto g1 = grads(f1);
  auto g2 = grads(f2);
  auto g12 = grads([&] { return add(f1(), f2()); });
  for (std::size_t i = 0; i < g12.numel(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-14);
}

TEST(Autodiff, DeterministicGradients) {
  auto run = [] {
    Rng rng(22);
    auto x = param({2, 6, 6, 3}, rng);
    auto k = param({3, 3, 3, 4}, rng);
    auto dk = param({3, 3, 4}, rng);
    Tape<double> tape;
    tape.backward(weighted_sum(depthwise_conv2d(gelu(conv2d(x, k, 1, 1)), dk), 5));
    return std::pair{x.grad(), k.grad()};
  };
  auto a = run();
  auto b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Autodiff, SinglePrecisionPathMatchesDouble) {
  Rng rng(23);
  Tensor<double> xd = random_tensor({2, 4, 4, 3}, rng);
  Tensor<double> kd = random_tensor({3, 3, 3, 2}, rng);
  auto yd = conv2d(Var<double>::constant(xd), Var<double>::constant(kd), 1, 1).value();
  auto yf = conv2d(Var<float>::constant(xd.cast<float>()), Var<float>::constant(kd.cast<float>()), 1, 1).value();
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}
