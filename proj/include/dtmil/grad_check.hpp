#pragma once

// Central-difference gradient checker. The analytic gradient comes from one
// backward pass; the numeric one perturbs each leaf element in place and
// re-evaluates the function on a fresh graph. Returns
//   max over elements of |analytic - central| / max(1, |analytic|).

#include <cmath>
#include <vector>

#include "dtmil/tensor.hpp"

namespace dtmil {

template <typename S, typename F>
S grad_check(F&& f, std::vector<Tensor<S>>& xs, S eps = S(1e-5)) {
  for (auto& x : xs) x.zero_grad();
  Tensor<S> root = f(xs);
  if (root.rows() != 1 || root.cols() != 1)
    throw ShapeError("grad_check: function must be scalar-valued");
  zero_grad_graph(root);
  backward(root);

  std::vector<std::vector<S>> analytic;
  analytic.reserve(xs.size());
  for (auto& x : xs) {
    std::vector<S> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) g[i] = x.node()->grad.empty() ? S(0) : x.node()->grad[i];
    analytic.push_back(std::move(g));
  }

  S worst = S(0);
  for (size_t t = 0; t < xs.size(); ++t) {
    auto vals = xs[t].values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const S keep = vals[i];
      vals[i] = keep + eps;
      const S up = f(xs).item();
      vals[i] = keep - eps;
      const S dn = f(xs).item();
      vals[i] = keep;
      const S numeric = (up - dn) / (S(2) * eps);
      const S a = analytic[t][i];
      const S rel = std::abs(a - numeric) / std::max(S(1), std::abs(a));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace dtmil
