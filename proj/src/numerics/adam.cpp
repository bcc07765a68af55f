#include "meg/adam.hpp"

#include <cmath>

namespace meg {

template <class Real>
void adam_step(ParamSet<Real>& params, const std::vector<Tensor<Real>>& grads, AdamState<Real>& state, double lr) {
  if (!(lr > 0)) throw ParameterError("adam_step: learning rate must be positive");
  if (grads.size() != params.size())
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
  if (state.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m.emplace_back(params.at(i).shape);
      state.v.emplace_back(params.at(i).shape);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].values.empty()) continue;
    if (grads[i].shape != params.at(i).shape || state.m[i].shape != params.at(i).shape)
      throw DimensionError("adam_step: gradient " + shape_str(grads[i].shape) + " for parameter '" + params.name(i) +
                           "' " + shape_str(params.at(i).shape));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].values.empty()) continue;
    auto& p = params.at(i).values;
    auto& m = state.m[i].values;
    auto& v = state.v[i].values;
    const auto& g = grads[i].values;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      p[j] = static_cast<Real>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps));
    }
  }
}

template <class Real>
double clip_global_norm(std::vector<Tensor<Real>>& grads, double max_norm) {
  double total = 0;
  for (const auto& g : grads)
    for (auto v : g.values) total += static_cast<double>(v) * v;
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0) {
    const auto s = static_cast<Real>(max_norm / norm);
    for (auto& g : grads)
      for (auto& v : g.values) v *= s;
  }
  return norm;
}

template void adam_step(ParamSet<float>&, const std::vector<Tensor<float>>&, AdamState<float>&, double);
template void adam_step(ParamSet<double>&, const std::vector<Tensor<double>>&, AdamState<double>&, double);
template double clip_global_norm(std::vector<Tensor<float>>&, double);
template double clip_global_norm(std::vector<Tensor<double>>&, double);

}  // namespace meg
