#include "bonetrack/autodiff/rmsprop.hpp"

#include <cmath>

namespace bonetrack::ad {

template <typename T>
RmsProp<T>::RmsProp(RmsPropConfig cfg, std::vector<Parameter<T>*> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (!(cfg_.lr > 0.0) || !(cfg_.alpha >= 0.0 && cfg_.alpha < 1.0) || !(cfg_.eps > 0.0))
    fail(ErrorKind::Config, "rmsprop: need lr > 0, 0 <= alpha < 1, eps > 0");
  acc_.reserve(params_.size());
  for (const auto* p : params_) acc_.emplace_back(p->value.size(), 0.0);
}

template <typename T>
void RmsProp<T>::step() {
  for (const auto* p : params_) {
    if (p->grad.size() != p->value.size())
      fail(ErrorKind::Shape, "rmsprop: gradient of '" + p->name + "' has the wrong size");
    for (T g : p->grad)
      if (!std::isfinite(static_cast<double>(g)))
        fail(ErrorKind::Training, "non-finite gradient in parameter '" + p->name + "'");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& acc = acc_[k];
    for (std::size_t i = 0; i < acc.size(); ++i) {
      const double g = p.grad[i];
      acc[i] = cfg_.alpha * acc[i] + (1.0 - cfg_.alpha) * g * g;
      p.value.data[i] -= static_cast<T>(cfg_.lr * g / (std::sqrt(acc[i]) + cfg_.eps));
    }
  }
}

template class RmsProp<float>;
template class RmsProp<double>;

}  // namespace bonetrack::ad
