#pragma once

#include <span>
#include <vector>

#include "bonetrack/autodiff/tensor.hpp"

namespace bonetrack::ad {

struct RmsPropConfig {
  double lr = 1e-5;
  double alpha = 0.99;
  double eps = 1e-8;
};

/// acc <- alpha acc + (1 - alpha) g^2;  p <- p - lr g / (sqrt(acc) + eps).
/// No momentum, no bias correction.
template <typename T>
class RmsProp {
 public:
  RmsProp(RmsPropConfig cfg, std::vector<Parameter<T>*> params);

  /// Applies one update from the parameters' accumulated gradients. Throws
  /// Error{Training} naming the parameter if any gradient is non-finite; no
  /// parameter is modified in that case.
  void step();

  const RmsPropConfig& config() const noexcept { return cfg_; }
  std::span<const std::vector<double>> accumulators() const noexcept { return acc_; }

 private:
  RmsPropConfig cfg_;
  std::vector<Parameter<T>*> params_;
  std::vector<std::vector<double>> acc_;
};

extern template class RmsProp<float>;
extern template class RmsProp<double>;

}  // namespace bonetrack::ad
