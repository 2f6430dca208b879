#pragma once

// Finite-difference gradient suites and operation-count benchmarks, shared by
// the command-line tool and the acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "fun/gradcheck.hpp"
#include "fun/metrics.hpp"
#include "fun/network.hpp"

namespace fun {

inline constexpr double kPointwiseTolerance = 1e-6;
inline constexpr double kPrimitiveTolerance = 1e-5;
inline constexpr double kComposedTolerance = 1e-4;

struct SuiteCheck {
  std::string name;
  double error = 0;
  double tolerance = 0;
  std::size_t points = 0;
  std::string worst;
  bool pass() const { return error <= tolerance; }
};

inline const std::vector<std::string>& gradient_modules() {
  static const std::vector<std::string> m{"primitives", "fsm", "lrsm", "ssmb", "charbonnier", "detection", "network"};
  return m;
}

namespace suite {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline Var<double> param(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var<double>::parameter(random_tensor(std::move(s), rng, lo, hi));
}

// A fixed random weighting turns any output into a scalar loss with a generic cotangent.
inline Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Var<double>::constant(random_tensor(y.shape(), rng))));
}

inline SuiteCheck run(const std::string& name, double tol, const NamedVars& vars, const std::function<Var<double>()>& f,
                      GradCheckOptions opt) {
  const auto r = grad_check(vars, f, opt);
  return {name, r.max_rel_error, tol, r.checked, r.worst};
}

inline NamedVars with_input(const ParamStore<double>& store, const Var<double>& x) {
  NamedVars v = store.items();
  v.emplace_back("x", x);
  return v;
}

inline std::vector<SuiteCheck> primitives(std::uint64_t seed) {
  std::vector<SuiteCheck> out;
  Rng rng(seed);
  GradCheckOptions o{.seed = seed};
  {
    auto a = param({2, 3, 4}, rng), b = param({1, 4}, rng), c = param({2, 1, 1}, rng);
    out.push_back(run("broadcast add/mul", kPointwiseTolerance, {{"a", a}, {"b", b}, {"c", c}},
                      [=] { return weighted_sum(add(mul(a, b), c), 7); }, o));
  }
  {
    auto x = param({3, 2, 5}, rng), w = param({5, 4}, rng), b = param({4}, rng);
    out.push_back(run("linear", kPointwiseTolerance, {{"x", x}, {"w", w}, {"b", b}}, [=] { return weighted_sum(linear(x, w, b), 11); }, o));
  }
  {
    auto m = param({3, 4}, rng);
    out.push_back(run("matmul/transpose", kPointwiseTolerance, {{"m", m}}, [=] { return weighted_sum(matmul(m, transpose2d(m)), 9); }, o));
  }
  {
    auto a = param({2, 3, 2}, rng), b = param({2, 3, 5}, rng);
    out.push_back(run("concat/slice", kPointwiseTolerance, {{"a", a}, {"b", b}}, [=] {
      auto c = concat_last(std::vector<Var<double>>{a, b});
      return weighted_sum(mul(slice_last(c, 1, 6), slice_last(c, 2, 7)), 8);
    }, o));
  }
  {
    auto x = param({2, 5, 5, 3}, rng), k = param({3, 3, 3, 2}, rng);
    out.push_back(run("conv2d", kPrimitiveTolerance, {{"x", x}, {"k", k}}, [=] { return weighted_sum(conv2d(x, k, 2, 1), 12); }, o));
  }
  {
    auto y = param({2, 3, 3, 4}, rng), k = param({2, 2, 2, 4}, rng);
    out.push_back(run("transposed_conv2d", kPrimitiveTolerance, {{"y", y}, {"k", k}},
                      [=] { return weighted_sum(transposed_conv2d(y, k, 2), 14); }, o));
  }
  {
    auto x = param({2, 5, 4, 3}, rng), k = param({3, 5, 3}, rng);
    out.push_back(run("depthwise_conv2d", kPrimitiveTolerance, {{"x", x}, {"k", k}},
                      [=] { return weighted_sum(depthwise_conv2d(x, k), 13); }, o));
  }
  auto x = param({2, 3, 4}, rng, -2, 2);
  out.push_back(run("gelu", kPointwiseTolerance, {{"x", x}}, [=] { return weighted_sum(gelu(x), 1); }, o));
  out.push_back(run("sigmoid", kPointwiseTolerance, {{"x", x}}, [=] { return weighted_sum(sigmoid(x), 2); }, o));
  out.push_back(run("exp", kPointwiseTolerance, {{"x", x}}, [=] { return weighted_sum(exp(x), 3); }, o));
  out.push_back(run("softmax", kPrimitiveTolerance, {{"x", x}}, [=] { return weighted_sum(softmax(x, 1), 4); }, o));
  {
    auto g = param({4}, rng), b = param({4}, rng);
    out.push_back(run("layer_norm", kPrimitiveTolerance, {{"x", x}, {"gamma", g}, {"beta", b}},
                      [=] { return weighted_sum(layer_norm(x, g, b), 5); }, o));
  }
  {
    auto img = param({2, 3, 3, 4}, rng);
    out.push_back(run("global_avg_pool", kPrimitiveTolerance, {{"img", img}}, [=] { return weighted_sum(global_avg_pool(img), 6); }, o));
  }
  return out;
}

inline SuiteCheck fsm(std::uint64_t seed) {
  FsmConfig cfg;
  cfg.channels = 4;
  ParamStore<double> store;
  Rng rng(seed + 12);
  auto p = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto x = param({5, 5, 4}, rng);
  return run("FSM", kComposedTolerance, with_input(store, x), [&] { return weighted_sum(fsm_forward(x, cfg, p), 99); },
             {.points_per_param = 4, .seed = seed});
}

inline SuiteCheck lrsm(std::uint64_t seed) {
  LrsmConfig cfg{.channels = 8, .rank = 4, .bank = 6};
  ParamStore<double> store;
  Rng rng(seed + 27);
  auto mem = LowRankMemory<double>::create(store, "lrsm", cfg, rng);
  auto x = param({4, 4, 8}, rng);
  return run("LRSM", kComposedTolerance, with_input(store, x), [&] { return weighted_sum(lrsm_forward(x, mem), 5); },
             {.points_per_param = 6, .seed = seed});
}

inline SuiteCheck ssmb(std::uint64_t seed) {
  auto cfg = SsmbConfig::with_channels(4, {3, 5}, 6);
  ParamStore<double> store;
  Rng rng(seed + 32);
  auto p = SsmbParams<double>::create(store, "blk", cfg, rng);
  for (auto& [name, v] : store.items())
    if (name.find("norm") != std::string::npos)
      for (auto& e : const_cast<Var<double>&>(v).mutable_value().data()) e += rng.uniform(-0.3, 0.3);
  auto x = param({4, 4, 4}, rng);
  return run("SSMB", kComposedTolerance, with_input(store, x), [&] { return weighted_sum(ssmb_forward(x, cfg, p), 17); },
             {.points_per_param = 3, .seed = seed});
}

inline SuiteCheck charbonnier_suite(std::uint64_t seed) {
  Rng rng(seed + 3);
  auto a = param({4, 4, 3}, rng), b = param({4, 4, 3}, rng);
  return run("Charbonnier", kPrimitiveTolerance, {{"pred", a}, {"target", b}}, [=] { return charbonnier(a, b, 1e-3); },
             {.points_per_param = 20, .seed = seed});
}

inline std::vector<SuiteCheck> detection(std::uint64_t seed) {
  std::vector<SuiteCheck> out;
  Rng rng(seed + 5);
  LevelTargets tg;
  for (int loc = 0; loc < 8; ++loc) {
    tg.labels.push_back(loc % 3 == 0 ? -1 : loc % 2);
    for (int q = 0; q < 4; ++q) tg.ltrb.push_back(rng.uniform(0.5, 5));
    const double* d = &tg.ltrb[tg.ltrb.size() - 4];
    tg.ctr.push_back(centerness_target(d[0], d[1], d[2], d[3]));
    tg.positives += tg.labels.back() >= 0;
  }
  auto cls = param({8, 2}, rng, -3, 3), reg = param({8, 4}, rng, 0.3, 6), ctr = param({8, 1}, rng, -3, 3);
  GradCheckOptions o{.points_per_param = 40, .seed = seed};
  out.push_back(run("focal loss", kPrimitiveTolerance, {{"cls", cls}}, [=] { return focal_loss(cls, tg.labels, 3.0); }, o));
  out.push_back(run("IoU loss", kPrimitiveTolerance, {{"reg", reg}}, [=] { return iou_loss(reg, tg, 3.0); }, o));
  out.push_back(run("centerness loss", kPrimitiveTolerance, {{"ctr", ctr}}, [=] { return centerness_loss(ctr, tg, 3.0); }, o));

  DetectionConfig cfg;
  cfg.num_classes = 2;
  cfg.head_channels = 4;
  ParamStore<double> store;
  auto head = DetectionHead<double>::create(store, "head", {6, 5, 3}, cfg, rng);
  std::vector<Level> levels{{8, 2, 2, 12, 1e9}, {4, 4, 4, 6, 12}, {2, 8, 8, 0, 6}};
  std::vector<Var<double>> feats{Var<double>::constant(random_tensor({2, 2, 6}, rng)), Var<double>::constant(random_tensor({4, 4, 5}, rng)),
                                 Var<double>::constant(random_tensor({8, 8, 3}, rng))};
  auto targets = assign_targets({{{0, {1, 1, 6, 5}}, {1, {8, 2, 15, 15}}}}, levels);
  out.push_back(run("detection head + losses", kComposedTolerance, store.items(), [&] {
    std::vector<LevelOutputs<double>> outs;
    for (std::size_t l = 0; l < 3; ++l) outs.push_back(head.forward_level(feats[l], l, levels[l].stride));
    auto dl = detection_loss(outs, targets, cfg);
    return add(add(dl.cls, dl.reg), dl.ctr);
  }, {.points_per_param = 3, .seed = seed}));
  return out;
}

/// Smallest configuration that still runs every stage, skip and head level.
inline FunConfig toy_network_config() {
  FunConfig cfg;
  cfg.bands = 4;
  cfg.base_channels = 4;
  cfg.depths = {1, 1, 1, 1, 1, 1};
  cfg.bank_size = 4;
  cfg.detection.num_classes = 2;
  cfg.detection.head_channels = 4;
  return cfg;
}

inline SuiteCheck network(std::uint64_t seed) {
  const FunConfig cfg = toy_network_config();
  auto m = FunModel<double>::build(cfg, seed + 8);
  Rng rng(seed + 8);
  auto h = Var<double>::constant(random_tensor({16, 16, 4}, rng, 0, 1));
  auto target = Var<double>::constant(random_tensor({16, 16, 4}, rng, 0, 1));
  const auto tg = assign_targets({{{0, {2, 3, 9, 8}}, {1, {10, 9, 15, 15}}, {1, {1, 10, 6, 15}}}}, m.levels(16, 16));
  return run("full toy FUN (joint loss)", kComposedTolerance, m.params().items(), [&] {
    auto out = m.forward(h);
    auto dl = detection_loss(out.det, tg, cfg.detection);
    return total_loss(dl.reg, dl.cls, dl.ctr, charbonnier(out.reconstruction, target), 5.0);
  }, {.points_per_param = 2, .seed = seed});
}

}  // namespace suite

/// Runs the finite-difference suite of one module ("all" runs every module).
inline std::vector<SuiteCheck> gradient_suite(const std::string& module, std::uint64_t seed = 0) {
  if (module == "all") {
    std::vector<SuiteCheck> out;
    for (const auto& m : gradient_modules()) {
      auto part = gradient_suite(m, seed);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (module == "primitives") return suite::primitives(seed);
  if (module == "fsm") return {suite::fsm(seed)};
  if (module == "lrsm") return {suite::lrsm(seed)};
  if (module == "ssmb") return {suite::ssmb(seed)};
  if (module == "charbonnier") return {suite::charbonnier_suite(seed)};
  if (module == "detection") return suite::detection(seed);
  if (module == "network") return {suite::network(seed)};
  throw ContractError("unknown gradient module '" + module + "'");
}

// ---------------------------------------------------------------------------
// Operation counts

struct BenchRow {
  std::size_t side = 0;  // square H = W
  std::uint64_t fsm_macs = 0, attention_macs = 0;
};

/// Multiply-accumulate counts of one FSM and one naive self-attention layer
/// on [side, side, channels] inputs.
inline std::vector<BenchRow> complexity_bench(const std::vector<std::size_t>& sides, std::size_t channels, std::uint64_t seed = 0) {
  FsmConfig cfg;
  cfg.channels = channels;
  ParamStore<double> store;
  Rng rng(seed);
  auto fsm = FsmParams<double>::create(store, "fsm", cfg, rng);
  auto att = AttentionParams<double>::create(store, "att", channels, rng);
  std::vector<BenchRow> rows;
  for (auto s : sides) {
    if (s == 0) throw ContractError("bench: sizes must be positive");
    const Tensor<double> x = suite::random_tensor({s, s, channels}, rng);
    BenchRow r{s, 0, 0};
    MacCounter::reset();
    fsm_forward(Var<double>::constant(x), cfg, fsm);
    r.fsm_macs = MacCounter::value();
    MacCounter::reset();
    naive_self_attention(x, att);
    r.attention_macs = MacCounter::value();
    rows.push_back(r);
  }
  return rows;
}

}  // namespace fun
