#pragma once

// Reverse-mode differentiation over a per-thread recording tape.
//
// A Tape installs itself as the active recorder for its thread while it is
// alive. Operations whose inputs require gradients append a Record holding
// the closure that propagates the output gradient to the inputs. Without an
// active tape nothing is recorded and every result is a constant, which is
// how inference runs.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fun/tensor.hpp"

namespace fun {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;

  Tensor<T>& ensure_grad() {
    if (grad.shape() != value.shape() || grad.numel() != value.numel()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a tensor participating in a recorded computation.
template <class T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var constant(Tensor<T> v) { return Var(std::move(v), false); }
  static Var parameter(Tensor<T> v) { return Var(std::move(v), true); }

  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& mutable_value() noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t numel() const noexcept { return node_->value.numel(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }

  /// Gradient buffer; zero-filled if nothing has been accumulated yet.
  const Tensor<T>& grad() const { return node_->ensure_grad(); }
  bool has_grad() const noexcept { return node_->grad.numel() == node_->value.numel() && node_->grad.numel() > 0; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>& node() const noexcept { return *node_; }
  const Node<T>* id() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

  /// Gradient buffer to accumulate into, or nullptr if this input is not differentiable.
  Tensor<T>* grad_sink() const { return node_->requires_grad ? &node_->ensure_grad() : nullptr; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::vector<const Node<T>*> inputs;
    std::shared_ptr<Node<T>> output;
    std::function<void(const Tensor<T>&)> backward;
  };

  Tape() : previous_(active()) { active() = this; }
  ~Tape() { active() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  void record(std::string_view op, std::vector<const Node<T>*> inputs, std::shared_ptr<Node<T>> output,
              std::function<void(const Tensor<T>&)> fn) {
    records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(fn)});
  }

  std::size_t size() const noexcept { return records_.size(); }
  const std::vector<Record>& records() const noexcept { return records_; }

  /// Seeds d(loss)/d(loss) = 1 and replays every record once, newest first.
  void backward(const Var<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward: loss is not reachable from any differentiable input");
    loss.node().ensure_grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      Node<T>& out = *it->output;
      if (out.grad.numel() != out.value.numel() || out.grad.numel() == 0) continue;
      it->backward(out.grad);
    }
  }

  void clear() { records_.clear(); }

 private:
  Tape* previous_;
  std::vector<Record> records_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Var<T>*> in) {
  for (auto* v : in)
    if (v->requires_grad()) return true;
  return false;
}

}  // namespace detail

/// Wraps a freshly computed value as an op result and, when recording is
/// active and some input is differentiable, appends its backward closure.
template <class T, class F>
Var<T> make_result(std::string_view op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs, F&& backward) {
  Tape<T>* tape = Tape<T>::active();
  const bool track = tape != nullptr && detail::any_requires_grad<T>(inputs);
  Var<T> out(std::move(value), track);
  if (track) {
    std::vector<const Node<T>*> ids;
    ids.reserve(inputs.size());
    for (auto* v : inputs) ids.push_back(v->id());
    tape->record(op, std::move(ids), out.shared(), std::forward<F>(backward));
  }
  return out;
}

template <class T>
void backward(const Var<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

/// Running count of multiply-accumulates issued by the dense kernels on this thread.
struct MacCounter {
  static std::uint64_t& value() {
    thread_local std::uint64_t count = 0;
    return count;
  }
  static void add(std::uint64_t n) { value() += n; }
  static void reset() { value() = 0; }
};

}  // namespace fun
