#pragma once

// AdamW with decoupled weight decay, the warmup + multi-step learning-rate
// schedule, and global-norm gradient clipping.

#include <cmath>
#include <vector>

#include "fun/layers.hpp"

namespace fun {

struct ScheduleConfig {
  double base_lr = 1e-3;
  std::size_t warmup = 500;
  std::vector<std::size_t> milestones{2000, 2600};
  double factor = 0.1;

  void validate(std::size_t total_steps) const {
    if (!(base_lr > 0)) throw ContractError("schedule: base lr must be positive");
    if (!(factor > 0 && factor < 1)) throw ContractError("schedule: decay factor must lie in (0,1)");
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1]) throw ContractError("schedule: milestones must increase");
    if (!milestones.empty() && !(warmup < milestones.front())) throw ContractError("schedule: warmup must end before the first milestone");
    if (!milestones.empty() && !(milestones.back() < total_steps)) throw ContractError("schedule: milestones must precede the last step");
  }
};

/// Linear warmup base·(step+1)/warmup, then base·factor^(milestones passed).
inline double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step < s.warmup) return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(s.warmup);
  double lr = s.base_lr;
  for (auto m : s.milestones)
    if (step >= m) lr *= s.factor;
  return lr;
}

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-4;
};

/// Moments are kept per parameter in registration order.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore<T>& params, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& [_, p] : params.items()) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  /// w ← w(1 − lr·wd), then the bias-corrected Adam update. Parameters without
  /// a gradient are treated as having a zero gradient.
  void step(ParamStore<T>& params, double lr) {
    if (params.size() != m_.size()) throw ContractError("AdamW: parameter set changed since construction");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - lr * cfg_.weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Var<T>& p = const_cast<Var<T>&>(params.items()[k].second);
      Tensor<T>& w = p.mutable_value();
      const bool has = p.has_grad();
      const T* g = has ? p.grad().ptr() : nullptr;
      T* m = m_[k].ptr();
      T* v = v_[k].ptr();
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double gi = has ? static_cast<double>(g[i]) : 0.0;
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) * decay - lr * update);
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }
  void set_steps_taken(std::size_t t) noexcept { t_ = t; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }
  const AdamWConfig& config() const noexcept { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

template <class T>
double global_grad_norm(const ParamStore<T>& params) {
  double s = 0;
  for (const auto& [_, p] : params.items())
    if (p.has_grad())
      for (T g : p.grad().data()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& [_, p] : params.items())
      if (p.has_grad())
        for (T& g : const_cast<Tensor<T>&>(p.grad()).data()) g *= s;
  }
  return norm;
}

}  // namespace fun
