#pragma once

// Self-attention-free feature blocks.
//
//   FSM  (focal spatial modulation):  y = out( q(X) ⊙ h( Σ_l G^l ⊙ Z^l ) )
//        Z^0 = f_z(X), Z^l = GeLU(DWConv_{k^l}(Z^{l-1})), Z^{L+1} = AvgPool(Z^L), G = f_g(X)
//   LRSM (low-rank spectral modulation): y = q(X) ⊙ sigmoid(up(softmax(Z^k M) Mᵀ)),
//        Z^k = down(AvgPool(X)), M the K x B memory bank
//   SSMB: pre-norm residual chain FSM -> LRSM -> FFN.
//
// A naive scaled dot-product self-attention is included for operation-count
// comparisons only.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fun/layers.hpp"

namespace fun {

struct FsmConfig {
  std::size_t channels = 16;
  std::vector<std::size_t> kernels{3, 5};  // one odd kernel size per level
  bool bypass_gelu = false;                // test hook: identity in place of GeLU

  std::size_t levels() const noexcept { return kernels.size(); }

  void validate() const {
    if (kernels.empty()) throw ContractError("FsmConfig: at least one focal level required");
    if (channels == 0) throw ContractError("FsmConfig: channels must be positive");
    for (auto k : kernels)
      if (k == 0 || k % 2 == 0) throw ContractError("FsmConfig: kernel sizes must be odd and >= 1");
  }

  /// Effective receptive field after each level: r^l = 1 + Σ_{i<=l} (k^i - 1).
  std::vector<std::size_t> receptive_fields() const {
    std::vector<std::size_t> r;
    std::size_t acc = 1;
    for (auto k : kernels) r.push_back(acc += k - 1);
    return r;
  }
};

struct LrsmConfig {
  std::size_t channels = 16;
  std::size_t rank = 4;   // K
  std::size_t bank = 32;  // B

  /// Default rank C/4, floored at 4 and capped at C.
  static std::size_t default_rank(std::size_t c) { return std::min(c, std::max<std::size_t>(4, c / 4)); }

  void validate() const {
    if (rank < 1 || rank > channels) throw ContractError("LrsmConfig: rank must satisfy 1 <= K <= C");
    if (bank < 1) throw ContractError("LrsmConfig: bank size must be >= 1");
  }
};

struct SsmbConfig {
  FsmConfig fsm;
  LrsmConfig lrsm;
  std::size_t ffn_expansion = 4;

  std::size_t channels() const { return fsm.channels; }
  void validate() const {
    fsm.validate();
    lrsm.validate();
    if (fsm.channels != lrsm.channels) throw ContractError("SsmbConfig: FSM and LRSM channel counts differ");
    if (ffn_expansion == 0) throw ContractError("SsmbConfig: FFN expansion must be positive");
  }

  static SsmbConfig with_channels(std::size_t c, std::vector<std::size_t> kernels = {3, 5}, std::size_t bank = 32,
                                  std::size_t ffn_expansion = 4) {
    SsmbConfig s;
    s.fsm.channels = c;
    s.fsm.kernels = std::move(kernels);
    s.lrsm.channels = c;
    s.lrsm.rank = LrsmConfig::default_rank(c);
    s.lrsm.bank = bank;
    s.ffn_expansion = ffn_expansion;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Focal spatial modulation

template <class T>
struct FsmParams {
  Linear<T> f_z;                 // C -> C
  std::vector<Var<T>> dw;        // per level [k,k,C]
  Linear<T> f_g;                 // C -> L+1 gates
  Linear<T> q;                   // C -> C query
  Linear<T> h;                   // C -> C modulator projection
  Linear<T> out;                 // C -> C

  static FsmParams create(ParamStore<T>& store, const std::string& name, const FsmConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t c = cfg.channels;
    FsmParams p;
    p.f_z = Linear<T>::create(store, name + ".f_z", c, c, rng);
    for (std::size_t l = 0; l < cfg.levels(); ++l) {
      const std::size_t k = cfg.kernels[l];
      p.dw.push_back(store.add(name + ".dw" + std::to_string(l + 1), uniform_init<T>({k, k, c}, 1.0 / static_cast<double>(k), rng)));
    }
    p.f_g = Linear<T>::create(store, name + ".f_g", c, cfg.levels() + 1, rng);
    p.q = Linear<T>::create(store, name + ".q", c, c, rng);
    p.h = Linear<T>::create(store, name + ".h", c, c, rng);
    p.out = Linear<T>::create(store, name + ".out", c, c, rng);
    return p;
  }
};

/// Returns Z^1..Z^{L+1}. The last entry is the spatially pooled context with
/// unit spatial extent; it broadcasts over H x W wherever it is consumed.
template <class T>
std::vector<Var<T>> hierarchical_contextualize(const Var<T>& x, const FsmConfig& cfg, const FsmParams<T>& p) {
  if (x.shape().empty() || x.shape().back() != cfg.channels)
    throw ShapeError("hierarchical_contextualize: input " + to_string(x.shape()) + " has wrong channel count");
  if (p.dw.size() != cfg.levels()) throw ShapeError("hierarchical_contextualize: parameter levels do not match config");
  std::vector<Var<T>> z;
  Var<T> cur = p.f_z(x);
  for (std::size_t l = 0; l < cfg.levels(); ++l) {
    cur = depthwise_conv2d(cur, p.dw[l]);
    if (!cfg.bypass_gelu) cur = gelu(cur);
    z.push_back(cur);
  }
  z.push_back(global_avg_pool(cur));
  return z;
}

/// Z^out = Σ_l G^l ⊙ Z^l with G^l the l-th gate channel broadcast over C.
template <class T>
Var<T> aggregate_with_gates(const Var<T>& gates, const std::vector<Var<T>>& z) {
  if (gates.shape().empty() || gates.shape().back() != z.size())
    throw ShapeError("gated_aggregate: " + std::to_string(z.size()) + " context maps but gates " + to_string(gates.shape()));
  Var<T> acc = mul(slice_last(gates, 0, 1), z[0]);
  for (std::size_t l = 1; l < z.size(); ++l) acc = add(acc, mul(slice_last(gates, l, l + 1), z[l]));
  return acc;
}

template <class T>
Var<T> gated_aggregate(const Var<T>& x, const std::vector<Var<T>>& z, const FsmParams<T>& p) {
  return aggregate_with_gates(p.f_g(x), z);
}

template <class T>
Var<T> fsm_forward(const Var<T>& x, const FsmConfig& cfg, const FsmParams<T>& p) {
  const auto z = hierarchical_contextualize(x, cfg, p);
  const Var<T> modulator = p.h(gated_aggregate(x, z, p));
  return p.out(mul(p.q(x), modulator));
}

// ---------------------------------------------------------------------------
// Low-rank spectral modulation

template <class T>
struct LowRankMemory {
  Var<T> bank;     // [K, B]
  Linear<T> down;  // C -> K
  Linear<T> up;    // K -> C
  Linear<T> q;     // C -> C

  static LowRankMemory create(ParamStore<T>& store, const std::string& name, const LrsmConfig& cfg, Rng& rng) {
    cfg.validate();
    LowRankMemory m;
    m.bank = store.add(name + ".bank", normal_init<T>({cfg.rank, cfg.bank}, 1.0 / std::sqrt(static_cast<double>(cfg.rank)), rng));
    m.down = Linear<T>::create(store, name + ".down", cfg.channels, cfg.rank, rng);
    m.up = Linear<T>::create(store, name + ".up", cfg.rank, cfg.channels, rng);
    m.q = Linear<T>::create(store, name + ".q", cfg.channels, cfg.channels, rng);
    return m;
  }
};

/// Z^k = down(AvgPool(X)), shape [N?,1,1,K].
template <class T>
Var<T> lrsm_project(const Var<T>& x, const LowRankMemory<T>& mem) {
  return mem.down(global_avg_pool(x));
}

template <class T>
struct MemoryReadout {
  Var<T> coefficients;  // I = softmax(Z^k M), [..., B]
  Var<T> low_rank;      // Z^l = I Mᵀ, [..., K]
};

template <class T>
MemoryReadout<T> lrsm_aggregate(const Var<T>& zk, const LowRankMemory<T>& mem) {
  Var<T> coeff = softmax(matmul(zk, mem.bank), -1);
  return {coeff, matmul(coeff, transpose2d(mem.bank))};
}

/// Spectral modulator s = sigmoid(up(Z^l)) in (0,1)^C.
template <class T>
Var<T> lrsm_modulator(const Var<T>& x, const LowRankMemory<T>& mem) {
  return sigmoid(mem.up(lrsm_aggregate(lrsm_project(x, mem), mem).low_rank));
}

template <class T>
Var<T> lrsm_forward(const Var<T>& x, const LowRankMemory<T>& mem) {
  return mul(mem.q(x), lrsm_modulator(x, mem));
}

// ---------------------------------------------------------------------------
// Spatial-spectral modulation block

template <class T>
struct SsmbParams {
  LayerNorm<T> norm1, norm2, norm3;
  FsmParams<T> fsm;
  LowRankMemory<T> lrsm;
  Linear<T> fc1, fc2;

  static SsmbParams create(ParamStore<T>& store, const std::string& name, const SsmbConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t c = cfg.channels();
    SsmbParams p;
    p.norm1 = LayerNorm<T>::create(store, name + ".norm1", c);
    p.fsm = FsmParams<T>::create(store, name + ".fsm", cfg.fsm, rng);
    p.norm2 = LayerNorm<T>::create(store, name + ".norm2", c);
    p.lrsm = LowRankMemory<T>::create(store, name + ".lrsm", cfg.lrsm, rng);
    p.norm3 = LayerNorm<T>::create(store, name + ".norm3", c);
    p.fc1 = Linear<T>::create(store, name + ".ffn.fc1", c, c * cfg.ffn_expansion, rng);
    p.fc2 = Linear<T>::create(store, name + ".ffn.fc2", c * cfg.ffn_expansion, c, rng);
    return p;
  }
};

template <class T>
Var<T> ffn_forward(const Var<T>& x, const SsmbParams<T>& p) {
  return p.fc2(gelu(p.fc1(x)));
}

template <class T>
Var<T> ssmb_forward(const Var<T>& x, const SsmbConfig& cfg, const SsmbParams<T>& p) {
  Var<T> x1 = add(x, fsm_forward(p.norm1(x), cfg.fsm, p.fsm));
  Var<T> x2 = add(x1, lrsm_forward(p.norm2(x1), p.lrsm));
  return add(x2, ffn_forward(p.norm3(x2), p));
}

// ---------------------------------------------------------------------------
// Reference self-attention (benchmark only)

template <class T>
struct AttentionParams {
  Linear<T> q, k, v;

  static AttentionParams create(ParamStore<T>& store, const std::string& name, std::size_t c, Rng& rng) {
    return {Linear<T>::create(store, name + ".q", c, c, rng), Linear<T>::create(store, name + ".k", c, c, rng),
            Linear<T>::create(store, name + ".v", c, c, rng)};
  }
};

/// Single-head scaled dot-product attention over all H*W tokens of x: [H,W,C].
/// Cost is quadratic in the token count.
template <class T>
Tensor<T> naive_self_attention(const Tensor<T>& x, const AttentionParams<T>& p) {
  if (x.rank() != 3) throw ShapeError("naive_self_attention expects [H,W,C], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0) * x.dim(1), c = x.dim(2);
  const Var<T> xv = Var<T>::constant(x);
  const Tensor<T> q = p.q(xv).value(), k = p.k(xv).value(), v = p.v(xv).value();
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(c));
  Tensor<T> out(x.shape());
  std::vector<T> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* qi = q.ptr() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      const T* kj = k.ptr() + j * c;
      T s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) s += qi[ch] * kj[ch];
      scores[j] = s * inv_sqrt;
      mx = std::max(mx, scores[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (scores[j] = std::exp(scores[j] - mx));
    T* oi = out.ptr() + i * c;
    for (std::size_t j = 0; j < n; ++j) {
      const T a = scores[j] / z;
      const T* vj = v.ptr() + j * c;
      for (std::size_t ch = 0; ch < c; ++ch) oi[ch] += a * vj[ch];
    }
  }
  MacCounter::add(2 * static_cast<std::uint64_t>(n) * n * c);
  return out;
}

}  // namespace fun
