#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "odenet/autodiff.hpp"

namespace odenet {

template <typename T>
struct NamedParam {
  std::string name;
  Parameter<T>* param;
};

class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 2e-4;
};

/// Classical momentum with weight decay folded into the gradient:
///   v <- momentum * v + g + weight_decay * w
///   w <- w - lr * v
/// Non-trainable parameters are skipped.
template <typename T>
void sgd_step(std::span<const NamedParam<T>> params, double lr, const SgdConfig& cfg) {
  for (const auto& np : params) {
    const Parameter<T>& p = *np.param;
    if (!p.trainable) continue;
    if (p.grad.shape() != p.value.shape())
      throw ShapeError("gradient of " + np.name + " has shape " + p.grad.shape().str() + ", expected " +
                       p.value.shape().str());
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (std::isnan(p.grad[i])) throw NumericError("NaN gradient in parameter " + np.name);
  }
  const T mu = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay), eta = static_cast<T>(lr);
  for (const auto& np : params) {
    Parameter<T>& p = *np.param;
    if (!p.trainable) continue;
    if (p.momentum.shape() != p.value.shape()) p.reset_momentum();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      T& v = p.momentum[i];
      v = mu * v + p.grad[i] + wd * p.value[i];
      p.value[i] -= eta * v;
    }
  }
}

template <typename T>
void sgd_step(const std::vector<NamedParam<T>>& params, double lr, const SgdConfig& cfg) {
  sgd_step(std::span<const NamedParam<T>>(params), lr, cfg);
}

}  // namespace odenet
