#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "bonetrack/autodiff/tensor.hpp"

namespace bonetrack::ad {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted; backward() walks it once in reverse.
/// A tape built with `record = false` keeps values only (inference).
template <typename T>
class Tape {
 public:
  // Called with the node's own handle so it can read its gradient.
  using BackwardFn = std::function<void(Tape&, Var self)>;

  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor<T> value);
  /// Aliases param.value, which must not change until backward() returns.
  Var parameter(Parameter<T>& param);

  /// Constant that aliases `value` instead of copying it. The caller keeps
  /// it alive and unchanged for the lifetime of the tape.
  Var reference(const Tensor<T>& value);

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref != nullptr ? *n.ref : n.value;
  }
  const Shape& shape(Var v) const { return value(v).shape; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first use.
  std::vector<T>& grad(Var v);
  /// Empty when nothing has flowed into the node.
  const std::vector<T>& grad_view(Var v) const { return nodes_.at(v.id).grad; }

  /// Appends an op result. `needs_grad` is whether any input requires a
  /// gradient; the closure is dropped when it does not or when not recording.
  Var record(Tensor<T> value, bool needs_grad, BackwardFn backward);

  /// Frees the value of a node no later op reads. Inference only: a no-op on
  /// a recording tape, where backward still needs it.
  void release(Var v);

  /// Seeds d(out)/d(out) = 1 for a single-element output.
  void backward(Var out);
  void backward(Var out, const std::vector<T>& seed);

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bonetrack::ad
