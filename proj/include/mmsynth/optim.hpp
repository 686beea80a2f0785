#pragma once

#include <cmath>

#include "mmsynth/autodiff.hpp"

namespace mmsynth {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Updates only the parameters touched by the step's gradients. Untouched
// parameters (inactive streams) keep their values and moment state bit-frozen,
// so adding streams that never run cannot drift existing behavior.
template <typename T>
void adam_step(ParamStore<T>& store, const GradBuffer<T>& grads, double lr, const AdamConfig& cfg) {
  for (size_t id = 0; id < store.size(); ++id) {
    if (!grads.touched(static_cast<int>(id))) continue;
    auto& p = store.at(static_cast<int>(id));
    const auto& g = grads.grad(static_cast<int>(id));
    if (p.adam.m.empty()) {
      p.adam.m = Tensor<T>::zeros(p.value.shape());
      p.adam.v = Tensor<T>::zeros(p.value.shape());
    }
    p.adam.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.adam.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.adam.t));
    T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      T gi = g[i];
      p.adam.m[i] = b1 * p.adam.m[i] + (T(1) - b1) * gi;
      p.adam.v[i] = b2 * p.adam.v[i] + (T(1) - b2) * gi * gi;
      double mhat = static_cast<double>(p.adam.m[i]) / bc1;
      double vhat = static_cast<double>(p.adam.v[i]) / bc2;
      p.value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace mmsynth
