#pragma once

// Reconstruction loss, the multi-task objective, and image-quality metrics.

#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "fun/autodiff.hpp"
#include "fun/hsi.hpp"
#include "fun/ops.hpp"

namespace fun {

/// mean(sqrt((x̂ - x)² + eps²)) over every entry.
template <class T>
Var<T> charbonnier(const Var<T>& pred, const Var<T>& target, T eps = T(1e-3)) {
  if (pred.shape() != target.shape())
    throw ShapeError("charbonnier: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  const auto& p = pred.value();
  const auto& t = target.value();
  const std::size_t n = p.numel();
  Tensor<T> grad(p.shape());
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    const double r = std::sqrt(d * d + static_cast<double>(eps) * static_cast<double>(eps));
    total += r;
    grad[i] = static_cast<T>(d / r / static_cast<double>(n));
  }
  return make_result<T>("charbonnier", Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n))), {&pred, &target},
                        [g = std::move(grad), ps = pred.grad_sink(), ts = target.grad_sink()](const Tensor<T>& up) {
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            if (ps) (*ps)[i] += up[0] * g[i];
                            if (ts) (*ts)[i] -= up[0] * g[i];
                          }
                        });
}

struct LossReport {
  double total = 0, recon = 0, reg = 0, cls = 0, ctr = 0, lambda = 0;
};

/// L_total = L_reg + L_cls + L_ctr + λ·L_recon. Any term may be an empty Var
/// (treated as absent, e.g. detection terms in reconstruction-only training).
template <class T>
Var<T> total_loss(const Var<T>& reg, const Var<T>& cls, const Var<T>& ctr, const Var<T>& recon, double lambda,
                  LossReport* report = nullptr) {
  Var<T> acc;
  bool any = false;
  auto accumulate = [&](const Var<T>& v) {
    if (v.numel() == 0) return;
    acc = any ? add(acc, v) : v;
    any = true;
  };
  accumulate(reg);
  accumulate(cls);
  accumulate(ctr);
  if (recon.numel() != 0 && lambda != 0.0) accumulate(scale(recon, static_cast<T>(lambda)));
  if (!any) throw ContractError("total_loss: no loss terms");
  if (report) {
    auto v = [](const Var<T>& x) { return x.numel() ? static_cast<double>(x.value()[0]) : 0.0; };
    *report = {v(acc), v(recon), v(reg), v(cls), v(ctr), lambda};
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Metrics on [H,W,bands] cubes

namespace detail {
inline void check_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b || a.size() != 3) throw ShapeError(std::string(what) + ": cubes " + to_string(a) + " and " + to_string(b) + " differ");
}
}  // namespace detail

inline constexpr double kPsnrCap = 100.0;

/// Per-band PSNR averaged over bands; identical bands score the 100 dB cap.
template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& ref, double peak = 1.0) {
  detail::check_same(pred.shape(), ref.shape(), "psnr");
  const std::size_t bands = ref.dim(2), pix = ref.dim(0) * ref.dim(1);
  double acc = 0;
  for (std::size_t b = 0; b < bands; ++b) {
    double se = 0;
    for (std::size_t i = 0; i < pix; ++i) {
      const double d = static_cast<double>(pred[i * bands + b]) - static_cast<double>(ref[i * bands + b]);
      se += d * d;
    }
    const double mse = se / static_cast<double>(pix);
    acc += mse == 0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
  }
  return acc / static_cast<double>(bands);
}

/// Band-averaged SSIM with an 11x11 Gaussian window (sigma 1.5) over the
/// valid region, data range `peak`.
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  detail::check_same(a.shape(), b.shape(), "ssim");
  constexpr int kWin = 11;
  const std::size_t h = a.dim(0), w = a.dim(1), bands = a.dim(2);
  if (h < kWin || w < kWin) throw ShapeError("ssim needs at least 11x11 pixels, got " + to_string(a.shape()));
  double win[kWin];
  double wsum = 0;
  for (int i = 0; i < kWin; ++i) wsum += (win[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5)));
  for (double& v : win) v /= wsum;
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);

  double total = 0;
  const std::size_t oh = h - kWin + 1, ow = w - kWin + 1;
  for (std::size_t band = 0; band < bands; ++band) {
    double acc = 0;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int u = 0; u < kWin; ++u)
          for (int v = 0; v < kWin; ++v) {
            const double g = win[u] * win[v];
            const std::size_t idx = ((i + u) * w + (j + v)) * bands + band;
            const double x = static_cast<double>(a[idx]), y = static_cast<double>(b[idx]);
            mx += g * x;
            my += g * y;
            xx += g * (x * x);
            yy += g * (y * y);
            xy += g * (x * y);  // grouped so that ssim(a,b) == ssim(b,a) bitwise
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
        acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    total += acc / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(bands);
}

struct SamResult {
  double degrees = 0;        // mean angle over valid pixels
  std::size_t excluded = 0;  // pixels with a zero-norm spectrum in either cube
};

/// Mean spectral angle, computed as 2·atan2(|â − b̂|, |â + b̂|) for stability near 0.
template <class T>
SamResult sam(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same(a.shape(), b.shape(), "sam");
  const std::size_t bands = a.dim(2), pix = a.dim(0) * a.dim(1);
  SamResult r;
  double acc = 0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < pix; ++i) {
    double na = 0, nb = 0;
    for (std::size_t k = 0; k < bands; ++k) {
      na += static_cast<double>(a[i * bands + k]) * static_cast<double>(a[i * bands + k]);
      nb += static_cast<double>(b[i * bands + k]) * static_cast<double>(b[i * bands + k]);
    }
    if (na == 0 || nb == 0) {
      ++r.excluded;
      continue;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    double dm = 0, dp = 0;
    for (std::size_t k = 0; k < bands; ++k) {
      const double u = static_cast<double>(a[i * bands + k]) / na, v = static_cast<double>(b[i * bands + k]) / nb;
      dm += (u - v) * (u - v);
      dp += (u + v) * (u + v);
    }
    acc += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
    ++valid;
  }
  r.degrees = valid ? acc / static_cast<double>(valid) * 180.0 / std::numbers::pi : 0.0;
  return r;
}

struct QualityRow {
  std::string scene;
  double psnr = 0, ssim = 0, sam = 0;
};

template <class T>
QualityRow quality(const std::string& scene, const Tensor<T>& pred, const Tensor<T>& ref) {
  return {scene, psnr(pred, ref), ssim(pred, ref), sam(pred, ref).degrees};
}

inline void write_quality_rows(std::ostream& os, const std::vector<QualityRow>& rows) {
  os << "scene psnr ssim sam\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s %.6f %.6f %.6f\n", r.scene.c_str(), r.psnr, r.ssim, r.sam);
    os << buf;
  }
}

}  // namespace fun
