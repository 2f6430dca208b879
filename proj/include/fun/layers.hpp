#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fun/ops.hpp"
#include "fun/random.hpp"

namespace fun {

/// Ordered collection of named trainable tensors. Registration order is the
/// iteration order, which keeps optimizer state and checkpoints stable.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, Var<T>::parameter(std::move(init)));
    return items_.back().second;
  }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return items_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Var<T>>>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : items_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
Tensor<T> uniform_init(Shape s, double bound, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> normal_init(Shape s, double stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

/// Affine layer over the last axis.
template <class T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out]

  static Linear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {store.add(name + ".weight", uniform_init<T>({in, out}, bound, rng)), store.add(name + ".bias", Tensor<T>({out}))};
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
  std::size_t in() const { return weight.shape()[0]; }
  std::size_t out() const { return weight.shape()[1]; }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, std::size_t c) {
    return {store.add(name + ".gamma", Tensor<T>::ones({c})), store.add(name + ".beta", Tensor<T>({c}))};
  }
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta, T(1e-5)); }
};

/// Full convolution with explicit zero padding; kernel [k,k,in,out].
template <class T>
struct Conv {
  Var<T> kernel;
  Var<T> bias;
  std::size_t stride = 1, pad = 0;

  static Conv create(ParamStore<T>& store, const std::string& name, std::size_t k, std::size_t in, std::size_t out,
                     std::size_t stride, std::size_t pad, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(k * k * in));
    return {store.add(name + ".kernel", uniform_init<T>({k, k, in, out}, bound, rng)), store.add(name + ".bias", Tensor<T>({out})),
            stride, pad};
  }
  Var<T> operator()(const Var<T>& x) const { return add(conv2d(x, kernel, stride, pad), bias); }
};

/// Strided transposed convolution; kernel [k,k,out,in] in the adjoint layout.
template <class T>
struct Deconv {
  Var<T> kernel;
  Var<T> bias;
  std::size_t stride = 2;

  static Deconv create(ParamStore<T>& store, const std::string& name, std::size_t k, std::size_t in, std::size_t out,
                       std::size_t stride, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {store.add(name + ".kernel", uniform_init<T>({k, k, out, in}, bound, rng)), store.add(name + ".bias", Tensor<T>({out})),
            stride};
  }
  Var<T> operator()(const Var<T>& x) const { return add(transposed_conv2d(x, kernel, stride, 0), bias); }
};

}  // namespace fun
