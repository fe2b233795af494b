#include "bonetrack/autodiff/tape.hpp"

#include <sstream>

namespace bonetrack::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::reference(const Tensor<T>& value) {
  Node n;
  n.ref = &value;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& param) {
  Node n;
  n.ref = &param.value;
  n.requires_grad = record_;
  n.param = &param;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::release(Var v) {
  if (record_) return;
  nodes_.at(v.id).ref = nullptr;
  Tensor<T>& t = nodes_.at(v.id).value;
  t.shape.clear();
  std::vector<T>().swap(t.data);
}

template <typename T>
std::vector<T>& Tape<T>::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad.assign(value(v).size(), T(0));
  return n.grad;
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, bool needs_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && needs_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::backward(Var out) {
  if (value(out).size() != 1)
    fail(ErrorKind::Shape, "backward() without a seed needs a scalar output");
  backward(out, std::vector<T>{T(1)});
}

template <typename T>
void Tape<T>::backward(Var out, const std::vector<T>& seed) {
  if (!record_) fail(ErrorKind::Config, "backward() on a tape that does not record");
  auto& g = grad(out);
  if (seed.size() != g.size()) fail(ErrorKind::Shape, "backward seed size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) {
      n.backward(*this, Var{static_cast<std::uint32_t>(i)});
    } else if (n.param != nullptr) {
      auto& pg = n.param->grad;
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace bonetrack::ad
