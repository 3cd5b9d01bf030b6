#pragma once

// Bias-corrected Adam with L2 regularization folded into the gradient.
// Parameters are updated in place from their accumulated gradients; the
// update is deterministic given parameters, gradients and state.

#include <cmath>
#include <vector>

#include "dtmil/tensor.hpp"

namespace dtmil {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename S>
struct AdamState {
  std::vector<std::vector<S>> m;  // first moments, one buffer per parameter
  std::vector<std::vector<S>> v;  // second moments
  long long t = 0;

  static AdamState init(const std::vector<Tensor<S>>& params) {
    AdamState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
      st.m.emplace_back(p.size(), S(0));
      st.v.emplace_back(p.size(), S(0));
    }
    return st;
  }
};

template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state, const AdamHyper& hp) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                     " buffers for " + std::to_string(params.size()) + " parameters");
  state.t += 1;
  const S b1 = S(hp.beta1), b2 = S(hp.beta2);
  const S corr1 = S(1) - std::pow(b1, S(state.t));
  const S corr2 = S(1) - std::pow(b2, S(state.t));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (state.m[pi].size() != p.size())
      throw ShapeError("adam_step: accumulator size " + std::to_string(state.m[pi].size()) +
                       " does not match parameter size " + std::to_string(p.size()));
    auto vals = p.values();
    auto* node = p.node();
    for (size_t i = 0; i < vals.size(); ++i) {
      const S g0 = node->grad.empty() ? S(0) : node->grad[i];
      const S g = g0 + S(hp.weight_decay) * vals[i];
      auto& m = state.m[pi][i];
      auto& v = state.v[pi][i];
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g * g;
      const S mhat = m / corr1;
      const S vhat = v / corr2;
      vals[i] -= S(hp.lr) * mhat / (std::sqrt(vhat) + S(hp.eps));
    }
  }
}

}  // namespace dtmil
