#include "meg/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace meg {

double grad_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  const double mag = std::max(std::abs(analytic), std::abs(numeric));
  return mag < kGradCheckFloor ? diff : diff / mag;
}

namespace {

double eval_scalar(const std::function<double()>& f) {
  const double v = f();
  if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
  return v;
}

void note(GradCheckResult& res, std::size_t index, double analytic, double numeric) {
  const double e = grad_error(analytic, numeric);
  ++res.checked;
  if (res.checked == 1 || e > res.max_error) {
    res.max_error = e;
    res.worst = index;
    res.analytic = analytic;
    res.numeric = numeric;
  }
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape<double>&, Var)>& fn, const Tensor<double>& point, double eps) {
  Tape<double> tape;
  Var x = tape.variable(point);
  Var y = fn(tape, x);
  if (tape.value(y).size() != 1) throw DimensionError("grad_check: function must return a scalar");
  eval_scalar([&] { return tape.value(y).values[0]; });
  tape.backward(y);
  const auto* g = tape.grad(x);
  Tensor<double> analytic = g ? *g : Tensor<double>(point.shape);

  auto value_at = [&](const Tensor<double>& p) {
    Tape<double> t;
    Var v = fn(t, t.constant(p));
    return eval_scalar([&] { return t.value(v).values[0]; });
  };
  GradCheckResult res;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe.values[i] = point.values[i] + eps;
    const double up = value_at(probe);
    probe.values[i] = point.values[i] - eps;
    const double down = value_at(probe);
    probe.values[i] = point.values[i];
    note(res, i, analytic.values[i], (up - down) / (2 * eps));
  }
  return res;
}

GradCheckResult grad_check_params(const std::function<Var(Tape<double>&, const Bound<double>&)>& fn,
                                  ParamSet<double>& params, double eps, std::size_t stride) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    Bound<double> bound(tape, params);
    Var y = fn(tape, bound);
    if (tape.value(y).size() != 1) throw DimensionError("grad_check: function must return a scalar");
    eval_scalar([&] { return tape.value(y).values[0]; });
    tape.backward(y);
    analytic = bound.gradients(tape);
  }
  auto value = [&] {
    Tape<double> tape;
    Bound<double> bound(tape, params);
    Var y = fn(tape, bound);
    return eval_scalar([&] { return tape.value(y).values[0]; });
  };
  GradCheckResult res;
  std::size_t flat = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = params.at(p);
    if (!t.requires_grad) {
      flat += t.size();
      continue;
    }
    for (std::size_t i = 0; i < t.size(); i += std::max<std::size_t>(stride, 1)) {
      const double orig = t.values[i];
      t.values[i] = orig + eps;
      const double up = value();
      t.values[i] = orig - eps;
      const double down = value();
      t.values[i] = orig;
      note(res, flat + i, analytic[p].values[i], (up - down) / (2 * eps));
    }
    flat += t.size();
  }
  return res;
}

}  // namespace meg
