#pragma once

// Anchor-free detection: shared head over pyramid levels, per-location target
// assignment, the three detection losses, decoding with class-wise NMS, and
// all-point mAP@0.5.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "fun/layers.hpp"

namespace fun {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

struct Annotation {
  int class_id = 0;
  Box box;

  void validate(std::size_t num_classes, double width, double height) const {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= num_classes)
      throw ContractError("annotation class " + std::to_string(class_id) + " out of range");
    if (!(box.x0 < box.x1 && box.y0 < box.y1)) throw ContractError("annotation box has non-positive extent");
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > width || box.y1 > height) throw ContractError("annotation box outside image");
  }
};

struct Detection {
  int class_id = 0;
  double score = 0;
  Box box;
};

struct Level {
  std::size_t stride = 8;
  std::size_t height = 0, width = 0;  // grid size
  double range_lo = 0, range_hi = std::numeric_limits<double>::infinity();

  double cx(std::size_t j) const { return (static_cast<double>(j) + 0.5) * static_cast<double>(stride); }
  double cy(std::size_t i) const { return (static_cast<double>(i) + 0.5) * static_cast<double>(stride); }
};

struct DetectionConfig {
  std::size_t num_classes = 5;
  std::size_t head_channels = 32;
  // Assignment ranges on the maximum regression distance, one per pyramid
  // level in the order the backbone emits them (coarsest first).
  std::vector<double> range_bounds{12.0, 6.0};  // level0 (12,inf), level1 (6,12], level2 (0,6]
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  std::size_t max_detections = 100;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  /// Ranges for `n` levels ordered coarsest first. Boundaries are listed
  /// coarsest first as well, so level l gets (bounds[l], bounds[l-1]].
  std::vector<std::pair<double, double>> ranges(std::size_t n) const {
    if (range_bounds.size() + 1 != n)
      throw ContractError("DetectionConfig: " + std::to_string(n) + " levels need " + std::to_string(n - 1) + " range bounds");
    for (std::size_t i = 1; i < range_bounds.size(); ++i)
      if (!(range_bounds[i] < range_bounds[i - 1])) throw ContractError("DetectionConfig: range bounds must decrease");
    std::vector<std::pair<double, double>> r;
    for (std::size_t l = 0; l < n; ++l) {
      const double hi = l == 0 ? std::numeric_limits<double>::infinity() : range_bounds[l - 1];
      const double lo = l + 1 == n ? 0.0 : range_bounds[l];
      r.emplace_back(lo, hi);
    }
    return r;
  }
};

// ---------------------------------------------------------------------------
// Head

template <class T>
struct LevelOutputs {
  Var<T> cls;  // [N,Hl,Wl,K] logits
  Var<T> reg;  // [N,Hl,Wl,4] l,t,r,b in pixels (positive)
  Var<T> ctr;  // [N,Hl,Wl,1] logit
};

template <class T>
struct DetectionHead {
  std::vector<Linear<T>> proj;  // per-level input projection to the shared width
  std::vector<Var<T>> scales;   // per-level scalar before exp
  Conv<T> cls1, cls2, reg1, reg2, cls_pred, reg_pred, ctr_pred;

  static DetectionHead create(ParamStore<T>& store, const std::string& name, const std::vector<std::size_t>& level_channels,
                              const DetectionConfig& cfg, Rng& rng) {
    const std::size_t w = cfg.head_channels;
    DetectionHead h;
    for (std::size_t l = 0; l < level_channels.size(); ++l) {
      h.proj.push_back(Linear<T>::create(store, name + ".proj" + std::to_string(l), level_channels[l], w, rng));
      h.scales.push_back(store.add(name + ".scale" + std::to_string(l), Tensor<T>::ones({1})));
    }
    h.cls1 = Conv<T>::create(store, name + ".cls1", 3, w, w, 1, 1, rng);
    h.cls2 = Conv<T>::create(store, name + ".cls2", 3, w, w, 1, 1, rng);
    h.reg1 = Conv<T>::create(store, name + ".reg1", 3, w, w, 1, 1, rng);
    h.reg2 = Conv<T>::create(store, name + ".reg2", 3, w, w, 1, 1, rng);
    h.cls_pred = Conv<T>::create(store, name + ".cls_pred", 3, w, cfg.num_classes, 1, 1, rng);
    h.reg_pred = Conv<T>::create(store, name + ".reg_pred", 3, w, 4, 1, 1, rng);
    h.ctr_pred = Conv<T>::create(store, name + ".ctr_pred", 3, w, 1, 1, 1, rng);
    // Rare-foreground prior keeps the focal loss from swamping early training.
    h.cls_pred.bias.mutable_value().fill(static_cast<T>(-std::log(99.0)));
    return h;
  }

  LevelOutputs<T> forward_level(const Var<T>& feat, std::size_t level, std::size_t stride) const {
    Var<T> x = proj.at(level)(feat);
    Var<T> c = gelu(cls2(gelu(cls1(x))));
    Var<T> r = gelu(reg2(gelu(reg1(x))));
    Var<T> dist = scale(exp(mul(reg_pred(r), scales[level])), static_cast<T>(stride));
    return {cls_pred(c), dist, ctr_pred(r)};
  }
};

// ---------------------------------------------------------------------------
// Targets

struct LevelTargets {
  std::vector<int> labels;     // per location, -1 = background
  std::vector<double> ltrb;    // per location x 4
  std::vector<double> ctr;     // per location
  std::size_t positives = 0;
};

inline double centerness_target(double l, double t, double r, double b) {
  return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

/// FCOS assignment for a batch: `images[n]` holds the annotations of image n.
/// Each location takes the smallest-area box that contains it and whose max
/// regression distance falls into the level's range.
inline std::vector<LevelTargets> assign_targets(const std::vector<std::vector<Annotation>>& images, const std::vector<Level>& levels) {
  std::vector<LevelTargets> out(levels.size());
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const Level& lv = levels[li];
    const std::size_t per_image = lv.height * lv.width;
    LevelTargets& tg = out[li];
    tg.labels.assign(images.size() * per_image, -1);
    tg.ltrb.assign(images.size() * per_image * 4, 0.0);
    tg.ctr.assign(images.size() * per_image, 0.0);
    for (std::size_t n = 0; n < images.size(); ++n)
      for (std::size_t i = 0; i < lv.height; ++i)
        for (std::size_t j = 0; j < lv.width; ++j) {
          const double x = lv.cx(j), y = lv.cy(i);
          const Annotation* best = nullptr;
          double best_area = std::numeric_limits<double>::infinity();
          for (const auto& a : images[n]) {
            const double l = x - a.box.x0, t = y - a.box.y0, r = a.box.x1 - x, b = a.box.y1 - y;
            if (std::min({l, t, r, b}) <= 0) continue;
            const double m = std::max({l, t, r, b});
            if (!(m > lv.range_lo && m <= lv.range_hi)) continue;
            if (a.box.area() < best_area) {
              best_area = a.box.area();
              best = &a;
            }
          }
          if (!best) continue;
          const std::size_t loc = n * per_image + i * lv.width + j;
          const double l = x - best->box.x0, t = y - best->box.y0, r = best->box.x1 - x, b = best->box.y1 - y;
          tg.labels[loc] = best->class_id;
          tg.ltrb[loc * 4 + 0] = l;
          tg.ltrb[loc * 4 + 1] = t;
          tg.ltrb[loc * 4 + 2] = r;
          tg.ltrb[loc * 4 + 3] = b;
          tg.ctr[loc] = centerness_target(l, t, r, b);
          ++tg.positives;
        }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses. Each returns a sum over locations divided by `norm`.

namespace detail {
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
}  // namespace detail

/// Focal loss value and d/dx for one logit x with binary target.
inline std::pair<double, double> focal_term(double x, bool positive, double alpha, double gamma) {
  const double p = detail::sigmoid(x);
  const double log_p = -detail::softplus(-x), log_1mp = -detail::softplus(x);
  if (positive) {
    const double w = alpha * std::pow(1 - p, gamma);
    return {-w * log_p, alpha * std::pow(1 - p, gamma) * (gamma * p * log_p - (1 - p))};
  }
  const double w = (1 - alpha) * std::pow(p, gamma);
  return {-w * log_1mp, (1 - alpha) * std::pow(p, gamma) * (p - gamma * (1 - p) * log_1mp)};
}

/// Sigmoid focal loss summed over every location and class, divided by `norm`.
/// `labels` holds one entry per location (-1 background).
template <class T>
Var<T> focal_loss(const Var<T>& logits, const std::vector<int>& labels, double norm, double alpha = 0.25, double gamma = 2.0) {
  const std::size_t k = logits.shape().back();
  if (labels.size() * k != logits.numel()) throw ShapeError("focal_loss: labels do not match logits " + to_string(logits.shape()));
  const auto& x = logits.value();
  Tensor<T> grad(x.shape());
  double total = 0;
  for (std::size_t loc = 0; loc < labels.size(); ++loc)
    for (std::size_t c = 0; c < k; ++c) {
      const auto [v, g] = focal_term(static_cast<double>(x[loc * k + c]), labels[loc] == static_cast<int>(c), alpha, gamma);
      total += v;
      grad[loc * k + c] = static_cast<T>(g / norm);
    }
  return make_result<T>("focal_loss", Tensor<T>::scalar(static_cast<T>(total / norm)), {&logits},
                        [g = std::move(grad), lp = logits.grad_sink()](const Tensor<T>& up) {
                          if (!lp) return;
                          for (std::size_t i = 0; i < g.numel(); ++i) (*lp)[i] += up[0] * g[i];
                        });
}

/// IoU of two boxes that share an anchor point, given as l,t,r,b distances.
inline double ltrb_iou(const double* p, const double* g, double grad[4] = nullptr) {
  const double ap = (p[0] + p[2]) * (p[1] + p[3]), ag = (g[0] + g[2]) * (g[1] + g[3]);
  const double wi = std::min(p[0], g[0]) + std::min(p[2], g[2]);
  const double hi = std::min(p[1], g[1]) + std::min(p[3], g[3]);
  const double inter = wi * hi, uni = ap + ag - inter;
  if (grad) {
    // d area_p / d(l,t,r,b) and d inter / d(l,t,r,b)
    const double dap[4] = {p[1] + p[3], p[0] + p[2], p[1] + p[3], p[0] + p[2]};
    const double di[4] = {p[0] < g[0] ? hi : 0.0, p[1] < g[1] ? wi : 0.0, p[2] < g[2] ? hi : 0.0, p[3] < g[3] ? wi : 0.0};
    for (int q = 0; q < 4; ++q) grad[q] = (di[q] * uni - inter * (dap[q] - di[q])) / (uni * uni);
  }
  return inter / uni;
}

/// Σ over positive locations of (1 − IoU), divided by `norm`.
template <class T>
Var<T> iou_loss(const Var<T>& pred_ltrb, const LevelTargets& tg, double norm) {
  if (pred_ltrb.numel() != tg.labels.size() * 4) throw ShapeError("iou_loss: prediction " + to_string(pred_ltrb.shape()) + " vs targets");
  const auto& p = pred_ltrb.value();
  Tensor<T> grad(p.shape());
  double total = 0;
  for (std::size_t loc = 0; loc < tg.labels.size(); ++loc) {
    if (tg.labels[loc] < 0) continue;
    double pv[4], d[4];
    for (int q = 0; q < 4; ++q) pv[q] = static_cast<double>(p[loc * 4 + q]);
    total += 1.0 - ltrb_iou(pv, &tg.ltrb[loc * 4], d);
    for (int q = 0; q < 4; ++q) grad[loc * 4 + q] = static_cast<T>(-d[q] / norm);
  }
  return make_result<T>("iou_loss", Tensor<T>::scalar(static_cast<T>(total / norm)), {&pred_ltrb},
                        [g = std::move(grad), sink = pred_ltrb.grad_sink()](const Tensor<T>& up) {
                          if (!sink) return;
                          for (std::size_t i = 0; i < g.numel(); ++i) (*sink)[i] += up[0] * g[i];
                        });
}

/// Centerness BCE over positive locations, offset by the target entropy so
/// that an exact prediction scores zero. The gradient equals that of plain BCE.
template <class T>
Var<T> centerness_loss(const Var<T>& logits, const LevelTargets& tg, double norm) {
  if (logits.numel() != tg.labels.size()) throw ShapeError("centerness_loss: logits " + to_string(logits.shape()) + " vs targets");
  const auto& x = logits.value();
  Tensor<T> grad(x.shape());
  double total = 0;
  auto xlogx = [](double v) { return v > 0 ? v * std::log(v) : 0.0; };
  for (std::size_t loc = 0; loc < tg.labels.size(); ++loc) {
    if (tg.labels[loc] < 0) continue;
    const double z = static_cast<double>(x[loc]), c = tg.ctr[loc];
    const double bce = c * detail::softplus(-z) + (1 - c) * detail::softplus(z);
    total += bce + xlogx(c) + xlogx(1 - c);
    grad[loc] = static_cast<T>((detail::sigmoid(z) - c) / norm);
  }
  return make_result<T>("centerness_loss", Tensor<T>::scalar(static_cast<T>(total / norm)), {&logits},
                        [g = std::move(grad), sink = logits.grad_sink()](const Tensor<T>& up) {
                          if (!sink) return;
                          for (std::size_t i = 0; i < g.numel(); ++i) (*sink)[i] += up[0] * g[i];
                        });
}

template <class T>
struct DetectionLoss {
  Var<T> reg, cls, ctr;
  std::size_t positives = 0;
};

/// Losses over all levels, normalized by the total positive count (at least 1).
template <class T>
DetectionLoss<T> detection_loss(const std::vector<LevelOutputs<T>>& outputs, const std::vector<LevelTargets>& targets,
                                const DetectionConfig& cfg) {
  if (outputs.size() != targets.size()) throw ContractError("detection_loss: level count mismatch");
  std::size_t pos = 0;
  for (const auto& t : targets) pos += t.positives;
  const double norm = std::max<double>(1.0, static_cast<double>(pos));
  DetectionLoss<T> out;
  out.positives = pos;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    auto c = focal_loss(outputs[l].cls, targets[l].labels, norm, cfg.focal_alpha, cfg.focal_gamma);
    auto r = iou_loss(outputs[l].reg, targets[l], norm);
    auto z = centerness_loss(outputs[l].ctr, targets[l], norm);
    out.cls = l == 0 ? c : add(out.cls, c);
    out.reg = l == 0 ? r : add(out.reg, r);
    out.ctr = l == 0 ? z : add(out.ctr, z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoding and NMS

inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  return std::tie(a.box.y0, a.box.x0, a.box.y1, a.box.x1) < std::tie(b.box.y0, b.box.x0, b.box.y1, b.box.x1);
}

/// Class-wise greedy NMS; output sorted by score (ties by class, then coordinates).
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> keep;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : keep)
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) keep.push_back(d);
  }
  return keep;
}

/// Decodes image `n` of a batch. Boxes are clipped to the image extent.
template <class T>
std::vector<Detection> decode(const std::vector<LevelOutputs<T>>& outputs, const std::vector<Level>& levels, std::size_t n,
                              double image_w, double image_h, const DetectionConfig& cfg) {
  std::vector<Detection> cand;
  for (std::size_t li = 0; li < outputs.size(); ++li) {
    const Level& lv = levels[li];
    const auto& cls = outputs[li].cls.value();
    const auto& reg = outputs[li].reg.value();
    const auto& ctr = outputs[li].ctr.value();
    const std::size_t k = cls.shape().back(), per_image = lv.height * lv.width;
    for (std::size_t i = 0; i < lv.height; ++i)
      for (std::size_t j = 0; j < lv.width; ++j) {
        const std::size_t loc = n * per_image + i * lv.width + j;
        const double centered = detail::sigmoid(static_cast<double>(ctr[loc]));
        for (std::size_t c = 0; c < k; ++c) {
          const double s = detail::sigmoid(static_cast<double>(cls[loc * k + c])) * centered;
          if (s <= cfg.score_threshold) continue;
          const double x = lv.cx(j), y = lv.cy(i);
          Box b{x - reg[loc * 4 + 0], y - reg[loc * 4 + 1], x + reg[loc * 4 + 2], y + reg[loc * 4 + 3]};
          b.x0 = std::clamp(b.x0, 0.0, image_w);
          b.x1 = std::clamp(b.x1, 0.0, image_w);
          b.y0 = std::clamp(b.y0, 0.0, image_h);
          b.y1 = std::clamp(b.y1, 0.0, image_h);
          if (b.width() <= 0 || b.height() <= 0) continue;
          cand.push_back({static_cast<int>(c), s, b});
        }
      }
  }
  auto kept = nms(std::move(cand), cfg.nms_iou);
  if (kept.size() > cfg.max_detections) kept.resize(cfg.max_detections);
  return kept;
}

/// One text record per detection: image class score x0 y0 x1 y1.
inline void write_detections(std::ostream& os, std::size_t image_id, const std::vector<Detection>& dets) {
  char buf[256];
  for (const auto& d : dets) {
    std::snprintf(buf, sizeof buf, "%zu %d %.9g %.6g %.6g %.6g %.6g\n", image_id, d.class_id, d.score, d.box.x0, d.box.y0, d.box.x1,
                  d.box.y1);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// mAP@0.5

/// All-point interpolated AP from a ranked TP/FP sequence.
inline double average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    tp += ranked_tp[i];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

struct MapResult {
  double map = 0;
  std::vector<double> per_class;  // NaN for classes with no ground truth
};

/// Detections of each class are ranked across all images; each one claims the
/// unmatched same-class ground truth with highest IoU if that IoU >= threshold.
inline MapResult map_at(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts,
                        std::size_t num_classes, double threshold = 0.5) {
  if (dets.size() != gts.size()) throw ContractError("map_at_50: detection and annotation image counts differ");
  MapResult res;
  res.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double acc = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t num_gt = 0;
    for (const auto& g : gts)
      for (const auto& a : g) num_gt += a.class_id == static_cast<int>(c);
    if (num_gt == 0) continue;
    struct Ranked {
      std::size_t image;
      const Detection* det;
    };
    std::vector<Ranked> ranked;
    for (std::size_t im = 0; im < dets.size(); ++im)
      for (const auto& d : dets[im])
        if (d.class_id == static_cast<int>(c)) ranked.push_back({im, &d});
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.det->score > b.det->score; });
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), false);
    std::vector<bool> tp;
    for (const auto& r : ranked) {
      double best = -1;
      std::size_t best_g = 0;
      const auto& g = gts[r.image];
      for (std::size_t gi = 0; gi < g.size(); ++gi) {
        if (g[gi].class_id != static_cast<int>(c) || used[r.image][gi]) continue;
        const double o = iou(r.det->box, g[gi].box);
        if (o > best) {
          best = o;
          best_g = gi;
        }
      }
      const bool hit = best >= threshold;
      if (hit) used[r.image][best_g] = true;
      tp.push_back(hit);
    }
    res.per_class[c] = average_precision(tp, num_gt);
    acc += res.per_class[c];
    ++counted;
  }
  res.map = counted ? acc / static_cast<double>(counted) : 0.0;
  return res;
}

inline double map_at_50(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Annotation>>& gts,
                        std::size_t num_classes) {
  return map_at(dets, gts, num_classes, 0.5).map;
}

}  // namespace fun
