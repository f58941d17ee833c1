#pragma once

#include <functional>

#include "groundling/graph.hpp"

namespace groundling {

// Central-difference gradient check for a scalar-valued build function.
// `build` gets a fresh graph and the probe tensor bound as leaf "x"
// (requires_grad); it returns the scalar loss var.  Result is the worst
// relative error max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
template <typename S>
double finite_difference_check(
    const std::function<Var<S>(Graph<S>&, Var<S>)>& build, const Tensor<S>& x,
    double eps = 1e-4) {
  Tensor<S> x0 = x;
  x0.requires_grad = true;
  Graph<S> g;
  Var<S> xv = g.param("x", x0);
  Var<S> loss = build(g, xv);
  auto grads = g.backpropagate(loss);
  const auto& analytic = grads.at("x").data;

  auto eval_at = [&](const Tensor<S>& probe) -> double {
    Graph<S> h;
    Tensor<S> p = probe;
    p.requires_grad = false;
    Var<S> pv = h.param("x", p, false);
    Var<S> l = build(h, pv);
    return double(l.val().item());
  };

  double worst = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor<S> xp = x;
    Tensor<S> xm = x;
    xp.data[i] += S(eps);
    xm.data[i] -= S(eps);
    double numeric = (eval_at(xp) - eval_at(xm)) / (2.0 * eps);
    double a = double(analytic[i]);
    double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace groundling
