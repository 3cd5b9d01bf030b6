#pragma once

#include <vector>

#include "dtmil/rng.hpp"
#include "dtmil/tensor.hpp"

namespace testutil {

template <typename S>
dtmil::Tensor<S> random_tensor(int rows, int cols, dtmil::Rng& rng, bool requires_grad = true,
                               double lo = -1.0, double hi = 1.0) {
  std::vector<S> vals(size_t(rows) * cols);
  for (auto& v : vals) v = S(rng.uniform(lo, hi));
  return dtmil::Tensor<S>::leaf(rows, cols, std::move(vals), requires_grad);
}

template <typename S>
dtmil::Tensor<S> random_normal_tensor(int rows, int cols, dtmil::Rng& rng,
                                      bool requires_grad = true) {
  std::vector<S> vals(size_t(rows) * cols);
  for (auto& v : vals) v = S(rng.normal());
  return dtmil::Tensor<S>::leaf(rows, cols, std::move(vals), requires_grad);
}

}  // namespace testutil
