#pragma once

#include <functional>

#include "meg/params.hpp"

namespace meg {

struct GradCheckResult {
  double max_error = 0;   // worst component error
  std::size_t worst = 0;  // flat index of the worst component
  double analytic = 0;
  double numeric = 0;
  std::size_t checked = 0;
};

// Component error is |a - n| / max(|a|, |n|), or the absolute difference
// when both magnitudes are below this floor.
inline constexpr double kGradCheckFloor = 1e-3;

double grad_error(double analytic, double numeric);

// Compares the tape gradient of a scalar function to central differences.
GradCheckResult grad_check(const std::function<Var(Tape<double>&, Var)>& fn, const Tensor<double>& point,
                           double eps = 1e-6);

// Same, over every trainable tensor in a ParamSet. stride > 1 checks every
// stride-th component of each tensor (always including the first).
GradCheckResult grad_check_params(const std::function<Var(Tape<double>&, const Bound<double>&)>& fn,
                                  ParamSet<double>& params, double eps = 1e-6, std::size_t stride = 1);

}  // namespace meg
