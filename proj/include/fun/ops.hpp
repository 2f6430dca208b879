#pragma once

// Differentiable primitives. Image tensors are channels-last: [H,W,C] or
// [N,H,W,C]. Every primitive accepts an optional leading batch axis.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "fun/autodiff.hpp"
#include "fun/tensor.hpp"

namespace fun {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> sa, sb;  // strides in output index space, 0 on broadcast axes
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.resize(r);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto ast = row_major_strides(a);
  const auto bst = row_major_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t oa = r - a.size(), ob = r - b.size();
    const std::size_t da = i >= oa ? a[i - oa] : 1;
    const std::size_t db = i >= ob ? b[i - ob] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("incompatible shapes " + to_string(a) + " and " + to_string(b));
    p.out[i] = std::max(da, db);
    if (da == 0 || db == 0) p.out[i] = 0;
    if (i >= oa && da != 1) p.sa[i] = ast[i - oa];
    if (i >= ob && db != 1) p.sb[i] = bst[i - ob];
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = numel_of(p.out);
  if (total == 0) return;
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = p.out[r - 1];
  const std::size_t sai = p.sa[r - 1], sbi = p.sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t io = 0; io < total; io += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(io + k, ia + k * sai, ib + k * sbi);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class T>
void accumulate(Tensor<T>* sink, const Tensor<T>& g) {
  if (!sink) return;
  T* s = sink->ptr();
  const T* src = g.ptr();
  for (std::size_t i = 0; i < g.numel(); ++i) s[i] += src[i];
}

/// Splits an image tensor into (batch, H, W, C), accepting rank 3 or 4.
inline std::array<std::size_t, 4> image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected [H,W,C] or [N,H,W,C], got " + to_string(s));
}

inline Shape image_shape(bool batched, std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
  return batched ? Shape{n, h, w, c} : Shape{h, w, c};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] + pb[ib]; });
  return make_result<T>("add", std::move(out), {&a, &b}, [a, b, plan](const Tensor<T>& g) {
    Tensor<T>* ga = a.grad_sink();
    Tensor<T>* gb = b.grad_sink();
    const T* pg = g.ptr();
    detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += pg[io];
      if (gb) (*gb)[ib] += pg[io];
    });
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] - pb[ib]; });
  return make_result<T>("sub", std::move(out), {&a, &b}, [a, b, plan](const Tensor<T>& g) {
    Tensor<T>* ga = a.grad_sink();
    Tensor<T>* gb = b.grad_sink();
    const T* pg = g.ptr();
    detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += pg[io];
      if (gb) (*gb)[ib] -= pg[io];
    });
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { po[io] = pa[ia] * pb[ib]; });
  return make_result<T>("mul", std::move(out), {&a, &b}, [a, b, plan](const Tensor<T>& g) {
    Tensor<T>* ga = a.grad_sink();
    Tensor<T>* gb = b.grad_sink();
    const T* pa = a.value().ptr();
    const T* pb = b.value().ptr();
    const T* pg = g.ptr();
    detail::for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += pg[io] * pb[ib];
      if (gb) (*gb)[ib] += pg[io] * pa[ia];
    });
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  return make_result<T>("scale", std::move(out), {&x}, [x, s](const Tensor<T>& g) {
    if (auto* gx = x.grad_sink())
      for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += s * g[i];
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v += s;
  return make_result<T>("add_scalar", std::move(out), {&x}, [x](const Tensor<T>& g) { detail::accumulate(x.grad_sink(), g); });
}

/// Pointwise map y = f(x); df gives dy/dx at x.
template <class T, class F, class DF>
Var<T> pointwise(std::string_view op, const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(px[i]);
  return make_result<T>(op, std::move(out), {&x}, [x, df](const Tensor<T>& g) {
    Tensor<T>* gx = x.grad_sink();
    if (!gx) return;
    const T* px = x.value().ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i] * df(px[i]);
  });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Exact erf-form GeLU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  return pointwise<T>("gelu", x, [](T v) { return gelu_value(v); }, [](T v) { return gelu_derivative(v); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return pointwise<T>("sigmoid", x, [](T v) { return sigmoid_value(v); }, [](T v) {
    const T s = sigmoid_value(v);
    return s * (T(1) - s);
  });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return pointwise<T>("exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return pointwise<T>("square", x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <class T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  return make_result<T>("sum", Tensor<T>::scalar(s), {&x}, [x](const Tensor<T>& g) {
    if (auto* gx = x.grad_sink())
      for (auto& v : gx->data()) v += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return make_result<T>("reshape", std::move(out), {&x}, [x](const Tensor<T>& g) { detail::accumulate(x.grad_sink(), g); });
}

/// Concatenates along the last axis; all leading extents must agree.
template <class T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ShapeError("concat_last: scalar input");
  lead.pop_back();
  std::size_t total_c = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    if (l.empty()) throw ShapeError("concat_last: scalar input");
    widths.push_back(l.back());
    total_c += l.back();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_last: leading shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(p.shape()));
  }
  const std::size_t rows = numel_of(lead);
  Shape os = lead;
  os.push_back(total_c);
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().ptr();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[k], widths[k], out.ptr() + r * total_c + off);
    off += widths[k];
  }
  Tape<T>* tape = Tape<T>::active();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  Var<T> result(std::move(out), tape && any);
  if (tape && any) {
    std::vector<const Node<T>*> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    tape->record("concat_last", std::move(ids), result.shared(), [parts, widths, rows, total_c](const Tensor<T>& g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (auto* gp = parts[k].grad_sink())
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) (*gp)[r * widths[k] + c] += g[r * total_c + off + c];
        off += widths[k];
      }
    });
  }
  return result;
}

/// Channels [begin, end) of the last axis.
template <class T>
Var<T> slice_last(const Var<T>& x, std::size_t begin, std::size_t end) {
  Shape s = x.shape();
  if (s.empty() || begin >= end || end > s.back())
    throw ShapeError("slice_last: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + to_string(s));
  const std::size_t c = s.back(), w = end - begin, rows = x.numel() / c;
  s.back() = w;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().ptr() + r * c + begin, w, out.ptr() + r * w);
  return make_result<T>("slice_last", std::move(out), {&x}, [x, begin, w, c, rows](const Tensor<T>& g) {
    if (auto* gx = x.grad_sink())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < w; ++k) (*gx)[r * c + begin + k] += g[r * w + k];
  });
}

// ---------------------------------------------------------------------------
// Dense linear algebra

/// x[..., K] @ w[K, N] (no bias).
template <class T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  if (w.shape().size() != 2) throw ShapeError("matmul: weight must be 2-D, got " + to_string(w.shape()));
  if (x.shape().empty() || x.shape().back() != w.shape()[0])
    throw ShapeError("matmul: extent mismatch " + to_string(x.shape()) + " @ " + to_string(w.shape()));
  const std::size_t k = w.shape()[0], n = w.shape()[1], m = x.numel() / k;
  Shape os = x.shape();
  os.back() = n;
  Tensor<T> out(os);
  detail::MapRM<T>(out.ptr(), m, n).noalias() = detail::CMapRM<T>(x.value().ptr(), m, k) * detail::CMapRM<T>(w.value().ptr(), k, n);
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  return make_result<T>("matmul", std::move(out), {&x, &w}, [x, w, m, k, n](const Tensor<T>& g) {
    detail::CMapRM<T> G(g.ptr(), m, n);
    if (auto* gx = x.grad_sink())
      detail::MapRM<T>(gx->ptr(), m, k).noalias() += G * detail::CMapRM<T>(w.value().ptr(), k, n).transpose();
    if (auto* gw = w.grad_sink())
      detail::MapRM<T>(gw->ptr(), k, n).noalias() += detail::CMapRM<T>(x.value().ptr(), m, k).transpose() * G;
  });
}

/// Affine map over the last axis: x[..., Cin] @ w[Cin, Cout] + b[Cout].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (w.shape().size() != 2 || x.shape().empty() || x.shape().back() != w.shape()[0])
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  if (b.shape() != Shape{w.shape()[1]})
    throw ShapeError("linear: bias " + to_string(b.shape()) + " does not match weight " + to_string(w.shape()));
  const std::size_t k = w.shape()[0], n = w.shape()[1], m = x.numel() / k;
  Shape os = x.shape();
  os.back() = n;
  Tensor<T> out(os);
  detail::MapRM<T> O(out.ptr(), m, n);
  O.noalias() = detail::CMapRM<T>(x.value().ptr(), m, k) * detail::CMapRM<T>(w.value().ptr(), k, n);
  O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr(), n);
  MacCounter::add(static_cast<std::uint64_t>(m) * k * n);
  return make_result<T>("linear", std::move(out), {&x, &w, &b}, [x, w, b, m, k, n](const Tensor<T>& g) {
    detail::CMapRM<T> G(g.ptr(), m, n);
    if (auto* gx = x.grad_sink())
      detail::MapRM<T>(gx->ptr(), m, k).noalias() += G * detail::CMapRM<T>(w.value().ptr(), k, n).transpose();
    if (auto* gw = w.grad_sink())
      detail::MapRM<T>(gw->ptr(), k, n).noalias() += detail::CMapRM<T>(x.value().ptr(), m, k).transpose() * G;
    if (auto* gb = b.grad_sink()) {
      // Plain row-order loop: Eigen's vectorized reduction order depends on buffer alignment.
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
    }
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& m) {
  if (m.shape().size() != 2) throw ShapeError("transpose2d: expected 2-D, got " + to_string(m.shape()));
  const std::size_t r = m.shape()[0], c = m.shape()[1];
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = m.value()[i * c + j];
  return make_result<T>("transpose2d", std::move(out), {&m}, [m, r, c](const Tensor<T>& g) {
    if (auto* gm = m.grad_sink())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*gm)[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation, explicit zero padding)

namespace detail {

struct ConvGeom {
  std::size_t n, h, w, c;     // input
  std::size_t kh, kw;         // kernel window
  std::size_t stride, pad;
  std::size_t ho, wo;         // output grid
  std::size_t patch() const { return kh * kw * c; }
  std::size_t rows() const { return n * ho * wo; }
};

inline ConvGeom conv_geometry(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::size_t kh, std::size_t kw,
                              std::size_t stride, std::size_t pad, const char* op) {
  if (kh == 0 || kw == 0) throw ShapeError(std::string(op) + ": kernel extents must be >= 1");
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (h + 2 * pad < kh || w + 2 * pad < kw)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(h + 2 * pad) + "x" + std::to_string(w + 2 * pad));
  return {n, h, w, c, kh, kw, stride, pad, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
}

/// Gathers sliding windows of an NHWC image into rows of length kh*kw*c.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox, ++row) {
        T* dst = cols + row * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t kx = 0; kx < g.kw; ++kx, dst += g.c) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
              std::fill_n(dst, g.c, T(0));
            } else {
              std::copy_n(x + ((b * g.h + iy) * g.w + ix) * g.c, g.c, dst);
            }
          }
        }
      }
}

/// Adjoint of im2col: scatters window rows back onto the image, accumulating.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oy = 0; oy < g.ho; ++oy)
      for (std::size_t ox = 0; ox < g.wo; ++ox, ++row) {
        const T* src = cols + row * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t kx = 0; kx < g.kw; ++kx, src += g.c) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) continue;
            T* d = x + ((b * g.h + iy) * g.w + ix) * g.c;
            for (std::size_t ch = 0; ch < g.c; ++ch) d[ch] += src[ch];
          }
        }
      }
}

}  // namespace detail

/// x: [N?,H,W,Cin], k: [kh,kw,Cin,Cout] -> [N?,H',W',Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, std::size_t stride = 1, std::size_t pad = 0) {
  const auto [n, h, w, c] = detail::image_dims(x.shape(), "conv2d");
  if (k.shape().size() != 4 || k.shape()[2] != c)
    throw ShapeError("conv2d: kernel " + to_string(k.shape()) + " incompatible with input " + to_string(x.shape()));
  const auto geom = detail::conv_geometry(n, h, w, c, k.shape()[0], k.shape()[1], stride, pad, "conv2d");
  const std::size_t cout = k.shape()[3], patch = geom.patch(), rows = geom.rows();
  std::vector<T> cols(rows * patch);
  detail::im2col(x.value().ptr(), geom, cols.data());
  Tensor<T> out(detail::image_shape(x.shape().size() == 4, n, geom.ho, geom.wo, cout));
  detail::MapRM<T>(out.ptr(), rows, cout).noalias() =
      detail::CMapRM<T>(cols.data(), rows, patch) * detail::CMapRM<T>(k.value().ptr(), patch, cout);
  MacCounter::add(static_cast<std::uint64_t>(rows) * patch * cout);
  return make_result<T>("conv2d", std::move(out), {&x, &k},
                        [x, k, geom, cols = std::move(cols), cout, patch, rows](const Tensor<T>& g) {
    detail::CMapRM<T> G(g.ptr(), rows, cout);
    if (auto* gk = k.grad_sink())
      detail::MapRM<T>(gk->ptr(), patch, cout).noalias() += detail::CMapRM<T>(cols.data(), rows, patch).transpose() * G;
    if (auto* gx = x.grad_sink()) {
      std::vector<T> dcols(rows * patch);
      detail::MapRM<T>(dcols.data(), rows, patch).noalias() = G * detail::CMapRM<T>(k.value().ptr(), patch, cout).transpose();
      detail::col2im(dcols.data(), geom, gx->ptr());
    }
  });
}

/// Adjoint of conv2d with the same kernel: y: [N?,H,W,Cout], k: [kh,kw,Cin,Cout] -> [N?,H',W',Cin]
/// with H' = (H-1)*stride + kh - 2*pad.
template <class T>
Var<T> transposed_conv2d(const Var<T>& y, const Var<T>& k, std::size_t stride = 2, std::size_t pad = 0) {
  const auto [n, h, w, cout] = detail::image_dims(y.shape(), "transposed_conv2d");
  if (k.shape().size() != 4 || k.shape()[3] != cout)
    throw ShapeError("transposed_conv2d: kernel " + to_string(k.shape()) + " incompatible with input " + to_string(y.shape()));
  if (stride == 0) throw ShapeError("transposed_conv2d: stride must be >= 1");
  const std::size_t kh = k.shape()[0], kw = k.shape()[1], cin = k.shape()[2];
  const long ho = static_cast<long>((h - 1) * stride + kh) - 2 * static_cast<long>(pad);
  const long wo = static_cast<long>((w - 1) * stride + kw) - 2 * static_cast<long>(pad);
  if (ho <= 0 || wo <= 0) throw ShapeError("transposed_conv2d: padding exceeds output extent");
  // Geometry of the forward convolution whose adjoint this is.
  const auto geom = detail::conv_geometry(n, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo), cin, kh, kw, stride, pad,
                                          "transposed_conv2d");
  if (geom.ho != h || geom.wo != w) throw ShapeError("transposed_conv2d: inconsistent geometry");
  const std::size_t patch = geom.patch(), rows = geom.rows();
  std::vector<T> cols(rows * patch);
  detail::MapRM<T>(cols.data(), rows, patch).noalias() =
      detail::CMapRM<T>(y.value().ptr(), rows, cout) * detail::CMapRM<T>(k.value().ptr(), patch, cout).transpose();
  MacCounter::add(static_cast<std::uint64_t>(rows) * patch * cout);
  Tensor<T> out(detail::image_shape(y.shape().size() == 4, n, geom.h, geom.w, cin));
  detail::col2im(cols.data(), geom, out.ptr());
  return make_result<T>("transposed_conv2d", std::move(out), {&y, &k}, [y, k, geom, cout, patch, rows](const Tensor<T>& g) {
    std::vector<T> gcols(rows * patch);
    detail::im2col(g.ptr(), geom, gcols.data());
    detail::CMapRM<T> GC(gcols.data(), rows, patch);
    if (auto* gy = y.grad_sink())
      detail::MapRM<T>(gy->ptr(), rows, cout).noalias() += GC * detail::CMapRM<T>(k.value().ptr(), patch, cout);
    if (auto* gk = k.grad_sink())
      detail::MapRM<T>(gk->ptr(), patch, cout).noalias() += GC.transpose() * detail::CMapRM<T>(y.value().ptr(), rows, cout);
  });
}

/// Per-channel "same" convolution: x: [N?,H,W,C], k: [kh,kw,C] with odd kh, kw.
template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& k) {
  const auto [n, h, w, c] = detail::image_dims(x.shape(), "depthwise_conv2d");
  if (k.shape().size() != 3 || k.shape()[2] != c)
    throw ShapeError("depthwise_conv2d: kernel " + to_string(k.shape()) + " incompatible with input " + to_string(x.shape()));
  const std::size_t kh = k.shape()[0], kw = k.shape()[1];
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("depthwise_conv2d: same padding needs odd kernel extents");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor<T> out(x.shape());
  const T* px = x.value().ptr();
  const T* pk = k.value().ptr();
  T* po = out.ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (long oy = 0; oy < static_cast<long>(h); ++oy)
      for (long ox = 0; ox < static_cast<long>(w); ++ox) {
        T* o = po + ((b * h + oy) * w + ox) * c;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = oy + static_cast<long>(ky) - ph;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = ox + static_cast<long>(kx) - pw;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const T* in = px + ((b * h + iy) * w + ix) * c;
            const T* kk = pk + (ky * kw + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += in[ch] * kk[ch];
          }
        }
      }
  MacCounter::add(static_cast<std::uint64_t>(n) * h * w * c * kh * kw);
  return make_result<T>("depthwise_conv2d", std::move(out), {&x, &k}, [x, k, n, h, w, c, kh, kw, ph, pw](const Tensor<T>& g) {
    Tensor<T>* gx = x.grad_sink();
    Tensor<T>* gk = k.grad_sink();
    const T* px = x.value().ptr();
    const T* pk = k.value().ptr();
    for (std::size_t b = 0; b < n; ++b)
      for (long oy = 0; oy < static_cast<long>(h); ++oy)
        for (long ox = 0; ox < static_cast<long>(w); ++ox) {
          const T* go = g.ptr() + ((b * h + oy) * w + ox) * c;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = oy + static_cast<long>(ky) - ph;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = ox + static_cast<long>(kx) - pw;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t xo = ((b * h + iy) * w + ix) * c, ko = (ky * kw + kx) * c;
              if (gx)
                for (std::size_t ch = 0; ch < c; ++ch) (*gx)[xo + ch] += go[ch] * pk[ko + ch];
              if (gk)
                for (std::size_t ch = 0; ch < c; ++ch) (*gk)[ko + ch] += go[ch] * px[xo + ch];
            }
          }
        }
  });
}

// ---------------------------------------------------------------------------
// Normalization, pooling, softmax

/// Softmax along `axis` (negative counts from the end).
template <class T>
Var<T> softmax(const Var<T>& x, int axis = -1) {
  const long r = static_cast<long>(x.shape().size());
  const long ax = axis < 0 ? r + axis : axis;
  if (ax < 0 || ax >= r) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (long i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (long i = ax + 1; i < r; ++i) inner *= x.shape()[i];
  Tensor<T> out(x.shape());
  const T* px = x.value().ptr();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = px[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < len; ++j) s += (out[base + j * inner] = std::exp(px[base + j * inner] - mx));
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  Tensor<T> y = out;
  return make_result<T>("softmax", std::move(out), {&x}, [x, y = std::move(y), outer, inner, len](const Tensor<T>& g) {
    Tensor<T>* gx = x.grad_sink();
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dotp = 0;
        for (std::size_t j = 0; j < len; ++j) dotp += g[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) (*gx)[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dotp);
      }
  });
}

/// Normalizes over the last axis, then applies the per-channel affine gamma*xhat + beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  if (x.shape().empty()) throw ShapeError("layer_norm: scalar input");
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(rows);
  const T* px = x.value().ptr();
  const T* pg = gamma.value().ptr();
  const T* pb = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mu) * is;
      xhat[r * c + j] = xh;
      out[r * c + j] = pg[j] * xh + pb[j];
    }
  }
  return make_result<T>("layer_norm", std::move(out), {&x, &gamma, &beta},
                        [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), c, rows](const Tensor<T>& g) {
    Tensor<T>* gx = x.grad_sink();
    Tensor<T>* gg = gamma.grad_sink();
    Tensor<T>* gb = beta.grad_sink();
    const T* pg = gamma.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* go = g.ptr() + r * c;
      const T* xh = xhat.ptr() + r * c;
      if (gg)
        for (std::size_t j = 0; j < c; ++j) (*gg)[j] += go[j] * xh[j];
      if (gb)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += go[j];
      if (gx) {
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const T d = go[j] * pg[j];
          m1 += d;
          m2 += d * xh[j];
        }
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += inv_std[r] * (go[j] * pg[j] - m1 - xh[j] * m2);
      }
    }
  });
}

/// Spatial mean: [N?,H,W,C] -> [N?,1,1,C].
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto [n, h, w, c] = detail::image_dims(x.shape(), "global_avg_pool");
  const bool batched = x.shape().size() == 4;
  Tensor<T> out(detail::image_shape(batched, n, 1, 1, c));
  const T inv = T(1) / static_cast<T>(h * w);
  const T* px = x.value().ptr();
  for (std::size_t b = 0; b < n; ++b) {
    T* o = out.ptr() + b * c;
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += px[(b * h * w + p) * c + ch];
    for (std::size_t ch = 0; ch < c; ++ch) o[ch] *= inv;
  }
  MacCounter::add(static_cast<std::uint64_t>(n) * h * w * c);
  return make_result<T>("global_avg_pool", std::move(out), {&x}, [x, n, h, w, c, inv](const Tensor<T>& g) {
    if (auto* gx = x.grad_sink())
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < h * w; ++p)
          for (std::size_t ch = 0; ch < c; ++ch) (*gx)[(b * h * w + p) * c + ch] += g[b * c + ch] * inv;
  });
}

}  // namespace fun
