#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "plvl/numerics/tensor.hpp"

namespace plvl {

// Ordered record of differentiable ops. Entries are appended in execution
// order, so replaying them in reverse is a valid topological traversal.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { ops_.push_back(std::move(fn)); }
  std::size_t size() const { return ops_.size(); }
  bool empty() const { return ops_.empty(); }
  void clear() { ops_.clear(); }

  void replay_reverse() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<Backward> ops_;
};

namespace detail {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

// Routes ops executed on this thread to `tape` for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::active_tape<T>()) { detail::active_tape<T>() = &tape; }
  ~TapeScope() { detail::active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Returns the active tape when any input participates in differentiation.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = detail::active_tape<T>();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return tape;
  return nullptr;
}

// Seeds d(loss)/d(loss) = 1, replays the tape in reverse, then clears it.
// Gradients accumulate (+=) into every requires_grad tensor reached.
template <typename T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  if (loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (loss.requires_grad()) {
    loss.grad()[0] += T(1);
    tape.replay_reverse();
  }
  tape.clear();
}

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace plvl
