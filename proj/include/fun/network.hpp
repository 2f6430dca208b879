#pragma once

// Six-stage U-shaped backbone with a residual reconstruction output and a
// three-level feature pyramid (stages 4, 5, 6 at strides 8, 4, 2) for the
// detection head.
//
//   embed 3x3 -> S1 -> down -> S2 -> down -> S3 -> down -> S4
//   up(S4) ++ S3 -> fuse -> S5 ; up(S5) ++ S2 -> fuse -> S6
//   up(S6) ++ S1 -> fuse -> 3x3 -> R ;  X̂ = H + R

#include <array>
#include <string>
#include <vector>

#include "fun/cassi.hpp"
#include "fun/detection.hpp"
#include "fun/focal.hpp"

namespace fun {

struct FunConfig {
  std::size_t bands = 8;
  std::size_t base_channels = 16;
  std::array<std::size_t, 6> depths{1, 1, 1, 2, 1, 1};
  std::array<std::size_t, 6> channel_mult{1, 2, 4, 8, 4, 2};
  std::vector<std::size_t> fsm_kernels{3, 5};
  std::size_t bank_size = 32;
  std::size_t ffn_expansion = 4;
  DetectionConfig detection;

  static constexpr std::array<std::size_t, 6> kDoublingSchedule{1, 2, 4, 8, 4, 2};
  static constexpr std::array<std::size_t, 6> kCappedSchedule{1, 2, 4, 4, 4, 2};

  std::size_t stage_channels(std::size_t s) const { return base_channels * channel_mult.at(s); }

  void validate() const {
    if (bands == 0 || base_channels == 0) throw ContractError("FunConfig: bands and base channels must be positive");
    for (auto d : depths)
      if (d == 0) throw ContractError("FunConfig: every stage needs at least one SSMB");
    for (std::size_t s = 1; s < 4; ++s)
      if (channel_mult[s] < channel_mult[s - 1]) throw ContractError("FunConfig: channels must not decrease through stage 4");
    for (std::size_t s = 4; s < 6; ++s)
      if (channel_mult[s] > channel_mult[3]) throw ContractError("FunConfig: channels after stage 4 must not exceed stage 4");
    SsmbConfig::with_channels(base_channels, fsm_kernels, bank_size, ffn_expansion).validate();
  }

  SsmbConfig block(std::size_t stage) const {
    return SsmbConfig::with_channels(stage_channels(stage), fsm_kernels, bank_size, ffn_expansion);
  }
};

template <class T>
struct FunOutputs {
  Var<T> residual;                    // R
  Var<T> reconstruction;              // H + R
  std::vector<Var<T>> pyramid;        // stages 4, 5, 6
  std::vector<std::size_t> strides;   // 8, 4, 2
  std::vector<LevelOutputs<T>> det;   // empty unless the head ran
};

template <class T>
class FunModel {
 public:
  static FunModel build(const FunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    FunModel m;
    m.cfg_ = cfg;
    Rng rng(seed);
    auto& st = m.store_;
    const std::size_t c1 = cfg.stage_channels(0);
    m.embed_ = Conv<T>::create(st, "embed", 3, cfg.bands, c1, 1, 1, rng);
    for (std::size_t s = 0; s < 6; ++s) {
      const SsmbConfig bc = cfg.block(s);
      for (std::size_t d = 0; d < cfg.depths[s]; ++d)
        m.stages_[s].push_back(SsmbParams<T>::create(st, "stage" + std::to_string(s + 1) + ".blk" + std::to_string(d), bc, rng));
      if (s < 3) m.down_[s] = Conv<T>::create(st, "down" + std::to_string(s + 1), 2, bc.channels(), cfg.stage_channels(s + 1), 2, 0, rng);
    }
    // Decoder: up from stage 4 into stage 5, from 5 into 6, then from 6 to full resolution.
    const std::size_t up_in[3] = {cfg.stage_channels(3), cfg.stage_channels(4), cfg.stage_channels(5)};
    const std::size_t up_out[3] = {cfg.stage_channels(4), cfg.stage_channels(5), c1};
    const std::size_t skip[3] = {cfg.stage_channels(2), cfg.stage_channels(1), c1};
    for (std::size_t u = 0; u < 3; ++u) {
      m.up_[u] = Deconv<T>::create(st, "up" + std::to_string(u + 1), 2, up_in[u], up_out[u], 2, rng);
      m.fuse_[u] = Linear<T>::create(st, "fuse" + std::to_string(u + 1), up_out[u] + skip[u], up_out[u], rng);
    }
    m.project_ = Conv<T>::create(st, "project", 3, c1, cfg.bands, 1, 1, rng);
    m.head_ = DetectionHead<T>::create(st, "head", {cfg.stage_channels(3), cfg.stage_channels(4), cfg.stage_channels(5)},
                                       cfg.detection, rng);
    return m;
  }

  const FunConfig& config() const noexcept { return cfg_; }
  ParamStore<T>& params() noexcept { return store_; }
  const ParamStore<T>& params() const noexcept { return store_; }
  std::size_t parameter_count() const { return store_.scalar_count(); }
  const Conv<T>& output_projection() const { return project_; }

  static constexpr std::array<std::size_t, 3> kStrides{8, 4, 2};

  /// Grid geometry of the three pyramid levels for an input of size h x w.
  std::vector<Level> levels(std::size_t h, std::size_t w) const {
    const auto ranges = cfg_.detection.ranges(3);
    std::vector<Level> out;
    for (std::size_t l = 0; l < 3; ++l)
      out.push_back({kStrides[l], h / kStrides[l], w / kStrides[l], ranges[l].first, ranges[l].second});
    return out;
  }

  /// `h_input` is [H,W,bands] or [N,H,W,bands] with H and W divisible by 8.
  FunOutputs<T> forward(const Var<T>& h_input, bool with_head = true) const {
    const Shape& s = h_input.shape();
    if ((s.size() != 3 && s.size() != 4) || s.back() != cfg_.bands)
      throw ShapeError("FunModel::forward expects [N?,H,W," + std::to_string(cfg_.bands) + "], got " + to_string(s));
    const std::size_t h = s[s.size() - 3], w = s[s.size() - 2];
    if (h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0)
      throw ContractError("FunModel::forward: spatial size " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by 8");

    auto run_stage = [&](std::size_t st, Var<T> x) {
      const SsmbConfig bc = cfg_.block(st);
      for (const auto& blk : stages_[st]) x = ssmb_forward(x, bc, blk);
      return x;
    };
    Var<T> s1 = run_stage(0, embed_(h_input));
    Var<T> s2 = run_stage(1, down_[0](s1));
    Var<T> s3 = run_stage(2, down_[1](s2));
    Var<T> s4 = run_stage(3, down_[2](s3));
    Var<T> s5 = run_stage(4, fuse_[0](concat_last<T>({up_[0](s4), s3})));
    Var<T> s6 = run_stage(5, fuse_[1](concat_last<T>({up_[1](s5), s2})));
    Var<T> top = fuse_[2](concat_last<T>({up_[2](s6), s1}));

    FunOutputs<T> out;
    out.residual = project_(top);
    out.reconstruction = add(h_input, out.residual);
    out.pyramid = {s4, s5, s6};
    out.strides = {kStrides.begin(), kStrides.end()};
    if (with_head)
      for (std::size_t l = 0; l < 3; ++l) out.det.push_back(head_.forward_level(out.pyramid[l], l, kStrides[l]));
    return out;
  }

  /// Scaled shift-back initialization followed by the network: X̂ = H + R.
  HsiCube<T> reconstruct(const Measurement<T>& y, const CodedAperture<T>& mask, const DispersionSpec& d) const {
    const HsiCube<T> h = cassi::initialization(y, mask, d);
    return HsiCube<T>(forward(Var<T>::constant(h.tensor()), false).reconstruction.value());
  }

 private:
  FunConfig cfg_;
  ParamStore<T> store_;
  Conv<T> embed_, project_;
  std::array<std::vector<SsmbParams<T>>, 6> stages_;
  std::array<Conv<T>, 3> down_;
  std::array<Deconv<T>, 3> up_;
  std::array<Linear<T>, 3> fuse_;
  DetectionHead<T> head_;
};

}  // namespace fun
