#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "groundling/tensor.hpp"

namespace groundling {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled: applied to the parameter directly
};

// Standard Adam with bias correction.  Weight decay never enters the moment
// estimates.  Frozen parameters are skipped entirely, which keeps their bytes
// and their optimizer state untouched.
template <typename S>
struct AdamState {
  using Array = typename Tensor<S>::Array;
  AdamConfig cfg;
  int64_t t = 0;
  std::map<std::string, Array> m, v;

  explicit AdamState(AdamConfig c = {}) : cfg(c) {}

  void step(std::map<std::string, Tensor<S>>& params,
            const std::map<std::string, Tensor<S>>& grads,
            const std::set<std::string>& trainable) {
    ++t;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
    for (const auto& [name, g] : grads) {
      if (!trainable.count(name)) continue;
      auto pit = params.find(name);
      if (pit == params.end())
        throw IndexError("adam: gradient for unknown parameter '" + name + "'");
      Tensor<S>& p = pit->second;
      if (p.shape != g.shape)
        throw_shape_mismatch(p.shape, g.shape, "adam('" + name + "')");
      Array& mm = m.try_emplace(name, Array::Zero(p.numel())).first->second;
      Array& vv = v.try_emplace(name, Array::Zero(p.numel())).first->second;
      mm = S(cfg.beta1) * mm + S(1.0 - cfg.beta1) * g.data;
      vv = S(cfg.beta2) * vv + S(1.0 - cfg.beta2) * g.data.square();
      Array mhat = mm / S(bc1);
      Array vhat = vv / S(bc2);
      if (cfg.weight_decay != 0.0)
        p.data -= S(cfg.lr * cfg.weight_decay) * p.data;
      p.data -= S(cfg.lr) * mhat / (vhat.sqrt() + S(cfg.eps));
      if (!p.all_finite())
        throw NonFiniteValue("non-finite parameter after adam step: '" + name + "'");
    }
  }
};

}  // namespace groundling
