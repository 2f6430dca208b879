#pragma once

// Central finite-difference gradient checker. It only evaluates the forward
// computation (with no tape active), so it is independent of every backward
// closure it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fun/autodiff.hpp"
#include "fun/random.hpp"

namespace fun {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[index]" of the largest error
  std::size_t checked = 0;
};

struct GradCheckOptions {
  std::size_t points_per_param = 5;
  double step = 1e-5;
  double denom_floor = 1e-4;  // relative error uses max(|a|, |n|, floor)
  std::uint64_t seed = 0;
};

using NamedVars = std::vector<std::pair<std::string, Var<double>>>;

/// Compares reverse-mode gradients of `loss_fn` with central differences at
/// randomly chosen coordinates of each parameter.
inline GradCheckResult grad_check(const NamedVars& params, const std::function<Var<double>()>& loss_fn,
                                  const GradCheckOptions& opt = {}) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter " + name + " does not require grad");
    const_cast<Var<double>&>(p).zero_grad();
  }
  {
    Tape<double> tape;
    Var<double> loss = loss_fn();
    tape.backward(loss);
  }
  GradCheckResult res;
  Rng rng(opt.seed);
  for (const auto& [name, p] : params) {
    const Tensor<double> analytic = p.grad();
    std::vector<std::size_t> idx;
    if (p.numel() <= opt.points_per_param) {
      for (std::size_t i = 0; i < p.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t k = 0; k < opt.points_per_param; ++k)
        idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.numel()) - 1)));
    }
    Tensor<double>& v = const_cast<Var<double>&>(p).mutable_value();
    for (std::size_t i : idx) {
      const double orig = v[i];
      v[i] = orig + opt.step;
      const double fp = loss_fn().value()[0];
      v[i] = orig - opt.step;
      const double fm = loss_fn().value()[0];
      v[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++res.checked;
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace fun
