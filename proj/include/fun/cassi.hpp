#pragma once

// CASSI optical forward model: coded-aperture modulation, prism dispersion
// along columns, detector integration with additive Gaussian noise, and the
// shift-back initialization that undoes the dispersion.

#include <cstdint>

#include "fun/hsi.hpp"
#include "fun/random.hpp"

namespace fun::cassi {

/// X'[:,:,b] = M ⊙ X[:,:,b] for every band.
template <class T>
HsiCube<T> modulate(const HsiCube<T>& x, const CodedAperture<T>& mask) {
  if (mask.height() != x.height() || mask.width() != x.width())
    throw ShapeError("modulate: mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                     " does not match scene " + std::to_string(x.height()) + "x" + std::to_string(x.width()));
  HsiCube<T> out = x;
  const std::size_t nb = x.bands();
  for (std::size_t h = 0; h < x.height(); ++h)
    for (std::size_t w = 0; w < x.width(); ++w) {
      const T m = mask.at(h, w);
      for (std::size_t b = 0; b < nb; ++b) out.at(h, w, b) *= m;
    }
  return out;
}

/// X''(h, w + d[b], b) = X'(h, w, b); output is H x (W + d_max) x bands, vacated columns zero.
template <class T>
HsiCube<T> disperse(const HsiCube<T>& xm, const DispersionSpec& d) {
  d.validate();
  if (d.bands() != xm.bands())
    throw ShapeError("disperse: " + std::to_string(d.bands()) + " shifts for " + std::to_string(xm.bands()) + " bands");
  const std::size_t wout = xm.width() + d.max_shift();
  HsiCube<T> out(xm.height(), wout, xm.bands());
  for (std::size_t h = 0; h < xm.height(); ++h)
    for (std::size_t w = 0; w < xm.width(); ++w)
      for (std::size_t b = 0; b < xm.bands(); ++b) out.at(h, w + d.shifts[b], b) = xm.at(h, w, b);
  return out;
}

/// Y = Σ_b X''[:,:,b] + N with N i.i.d. zero-mean Gaussian of std sigma.
template <class T>
Measurement<T> integrate(const HsiCube<T>& xd, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ContractError("integrate: sigma must be >= 0");
  Measurement<T> y{Tensor<T>({xd.height(), xd.width()}), sigma};
  for (std::size_t h = 0; h < xd.height(); ++h)
    for (std::size_t w = 0; w < xd.width(); ++w) {
      T s = 0;
      for (std::size_t b = 0; b < xd.bands(); ++b) s += xd.at(h, w, b);
      y.values[h * xd.width() + w] = s;
    }
  if (sigma > 0.0) {
    Rng rng(seed);
    for (auto& v : y.values.data()) v += static_cast<T>(sigma * rng.normal());
  }
  return y;
}

template <class T>
Measurement<T> forward(const HsiCube<T>& x, const CodedAperture<T>& mask, const DispersionSpec& d, double sigma,
                       std::uint64_t seed) {
  return integrate(disperse(modulate(x, mask), d), sigma, seed);
}

/// H(h, w, b) = Y(h, w + d[b]): undoes the dispersion to give the network input.
template <class T>
HsiCube<T> shift_back(const Measurement<T>& y, const DispersionSpec& d, std::size_t bands) {
  d.validate();
  if (d.bands() != bands)
    throw ShapeError("shift_back: " + std::to_string(d.bands()) + " shifts for " + std::to_string(bands) + " bands");
  if (y.width() < d.max_shift() + 1)
    throw ShapeError("shift_back: measurement width " + std::to_string(y.width()) + " too small for max shift " +
                     std::to_string(d.max_shift()));
  const std::size_t w = y.width() - d.max_shift();
  HsiCube<T> out(y.height(), w, bands);
  for (std::size_t h = 0; h < y.height(); ++h)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t b = 0; b < bands; ++b) out.at(h, c, b) = y.values[h * y.width() + c + d.shifts[b]];
  return out;
}

/// Adjoint of the noiseless forward operator: M ⊙ shift_back(Y).
template <class T>
HsiCube<T> adjoint(const Measurement<T>& y, const CodedAperture<T>& mask, const DispersionSpec& d, std::size_t bands) {
  return modulate(shift_back(y, d, bands), mask);
}

/// Network input: shift_back(Y) / (bands * mean(M)). Each detector pixel sums
/// about bands * mean(M) modulated values, so the scaled cube is on the scale
/// of X. With a unit mask and a single band this is exactly shift_back.
template <class T>
HsiCube<T> initialization(const Measurement<T>& y, const CodedAperture<T>& mask, const DispersionSpec& d) {
  HsiCube<T> h = shift_back(y, d, d.bands());
  if (h.height() != mask.height() || h.width() != mask.width())
    throw ShapeError("initialization: measurement does not match the coded aperture size");
  double mean = 0;
  for (T v : mask.tensor().data()) mean += static_cast<double>(v);
  mean /= static_cast<double>(mask.tensor().numel());
  if (mean <= 0) throw ContractError("initialization: coded aperture is fully opaque");
  const T s = static_cast<T>(1.0 / (static_cast<double>(d.bands()) * mean));
  for (T& v : h.tensor().data()) v *= s;
  return h;
}

}  // namespace fun::cassi
