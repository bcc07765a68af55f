#pragma once

#include <cstdint>
#include <vector>

#include "meg/params.hpp"

namespace meg {

template <class Real>
struct AdamState {
  std::vector<Tensor<Real>> m;
  std::vector<Tensor<Real>> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam update. grads is aligned with params; an empty gradient
// tensor (frozen parameter) leaves that parameter and its moments untouched.
template <class Real>
void adam_step(ParamSet<Real>& params, const std::vector<Tensor<Real>>& grads, AdamState<Real>& state, double lr);

// Rescales grads in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <class Real>
double clip_global_norm(std::vector<Tensor<Real>>& grads, double max_norm);

}  // namespace meg
