#include "meg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "meg/kernels.hpp"

namespace meg::ops {

namespace {

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  if (out.empty()) out.push_back(last);
  else out.back() = last;
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <class Real>
inline Real sigmoid(Real x) {
  return Real(1) / (Real(1) + std::exp(-x));
}

}  // namespace

template <class Real>
Var matmul(Tape<Real>& tape, Var x, Var w) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  require(wv.rank() == 2, "matmul: weight must be rank 2, got " + shape_str(wv.shape));
  require(xv.rank() >= 1 && xv.last() == wv.dim(0),
          "matmul: input " + shape_str(xv.shape) + " incompatible with weight " + shape_str(wv.shape));
  const std::size_t rows = xv.rows(), in = wv.dim(0), out = wv.dim(1);
  Tensor<Real> y(with_last(xv.shape, out));
  kernels::matmul(xv.data(), wv.data(), y.data(), rows, in, out, false);
  return tape.record(std::move(y), {x, w}, [x, w, rows, in, out](Tape<Real>& t, const Tensor<Real>& g) {
    if (t.needs_grad(x)) kernels::matmul_nt(g.data(), t.value(w).data(), t.grad_accumulator(x).data(), rows, out, in);
    if (t.needs_grad(w)) kernels::matmul_tn(t.value(x).data(), g.data(), t.grad_accumulator(w).data(), rows, in, out);
  });
}

template <class Real>
Var dense(Tape<Real>& tape, Var x, Var w, Var b) {
  const auto& wv = tape.value(w);
  const auto& bv = tape.value(b);
  require(wv.rank() == 2 && bv.rank() == 1 && bv.dim(0) == wv.dim(1),
          "dense: bias " + shape_str(bv.shape) + " does not match weight " + shape_str(wv.shape));
  return add(tape, matmul(tape, x, w), b);
}

template <class Real>
Var add(Tape<Real>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require(is_suffix(av.shape, bv.shape), "add: " + shape_str(bv.shape) + " does not broadcast to " + shape_str(av.shape));
  Tensor<Real> y = av;
  y.requires_grad = false;
  const std::size_t inner = bv.size();
  const std::size_t outer = inner ? av.size() / inner : 0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) y.values[o * inner + i] += bv.values[i];
  return tape.record(std::move(y), {a, b}, [a, b, inner, outer](Tape<Real>& t, const Tensor<Real>& g) {
    if (t.needs_grad(a)) {
      auto& ga = t.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_accumulator(b);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gb.values[i] += g.values[o * inner + i];
    }
  });
}

template <class Real>
Var sub(Tape<Real>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require(av.shape == bv.shape, "sub: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<Real> y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av.values[i] - bv.values[i];
  return tape.record(std::move(y), {a, b}, [a, b](Tape<Real>& t, const Tensor<Real>& g) {
    if (t.needs_grad(a)) {
      auto& ga = t.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.values[i] -= g.values[i];
    }
  });
}

template <class Real>
Var mul(Tape<Real>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require(av.shape == bv.shape, "mul: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<Real> y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.values[i] = av.values[i] * bv.values[i];
  return tape.record(std::move(y), {a, b}, [a, b](Tape<Real>& t, const Tensor<Real>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (t.needs_grad(a)) {
      auto& ga = t.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i] * bv.values[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad_accumulator(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb.values[i] += g.values[i] * av.values[i];
    }
  });
}

template <class Real>
Var scale(Tape<Real>& tape, Var a, Real s) {
  Tensor<Real> y = tape.value(a);
  y.requires_grad = false;
  for (auto& v : y.values) v *= s;
  return tape.record(std::move(y), {a}, [a, s](Tape<Real>& t, const Tensor<Real>& g) {
    auto& ga = t.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += s * g.values[i];
  });
}

template <class Real>
Var layer_norm(Tape<Real>& tape, Var x, Var gain, Var bias, Real eps) {
  const auto& xv = tape.value(x);
  const std::size_t d = xv.rank() ? xv.last() : 0;
  if (d == 0) throw DimensionError("layer_norm: feature axis is empty");
  require(tape.value(gain).shape == Shape{d} && tape.value(bias).shape == Shape{d},
          "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  const std::size_t rows = xv.rows();
  const auto& gv = tape.value(gain);
  const auto& bv = tape.value(bias);
  auto xhat = std::make_shared<std::vector<Real>>(xv.size());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  Tensor<Real> y(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<Real>(d);
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      y.values[r * d + j] = gv.values[j] * h + bv.values[j];
    }
  }
  return tape.record(std::move(y), {x, gain, bias},
                     [x, gain, bias, xhat, inv_std, rows, d](Tape<Real>& t, const Tensor<Real>& g) {
                       const auto& gv = t.value(gain);
                       if (t.needs_grad(gain) || t.needs_grad(bias)) {
                         auto* gg = t.needs_grad(gain) ? &t.grad_accumulator(gain) : nullptr;
                         auto* gb = t.needs_grad(bias) ? &t.grad_accumulator(bias) : nullptr;
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) {
                             if (gg) gg->values[j] += g.values[r * d + j] * (*xhat)[r * d + j];
                             if (gb) gb->values[j] += g.values[r * d + j];
                           }
                       }
                       if (!t.needs_grad(x)) return;
                       auto& gx = t.grad_accumulator(x);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real m1 = 0, m2 = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const Real dh = g.values[r * d + j] * gv.values[j];
                           m1 += dh;
                           m2 += dh * (*xhat)[r * d + j];
                         }
                         m1 /= static_cast<Real>(d);
                         m2 /= static_cast<Real>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const Real dh = g.values[r * d + j] * gv.values[j];
                           gx.values[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                         }
                       }
                     });
}

template <class Real>
Var softmax_t(Tape<Real>& tape, Var logits, Real temperature) {
  if (!(temperature > 0)) throw ParameterError("softmax_t: temperature must be positive");
  const auto& xv = tape.value(logits);
  const std::size_t k = xv.last(), rows = xv.rows();
  Tensor<Real> y(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * k;
    Real* yr = y.data() + r * k;
    const Real best = *std::max_element(xr, xr + k);
    Real total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      yr[j] = std::exp((xr[j] - best) / temperature);
      total += yr[j];
    }
    for (std::size_t j = 0; j < k; ++j) yr[j] /= total;
  }
  auto probs = std::make_shared<std::vector<Real>>(y.values);
  return tape.record(std::move(y), {logits}, [logits, probs, k, rows, temperature](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(logits);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* p = probs->data() + r * k;
      const Real* gr = g.data() + r * k;
      Real dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += gr[j] * p[j];
      for (std::size_t j = 0; j < k; ++j) gx.values[r * k + j] += p[j] * (gr[j] - dot) / temperature;
    }
  });
}

template <class Real>
Var leaky_relu(Tape<Real>& tape, Var x, Real slope) {
  Tensor<Real> y = tape.value(x);
  y.requires_grad = false;
  for (auto& v : y.values)
    if (v < 0) v *= slope;
  return tape.record(std::move(y), {x}, [x, slope](Tape<Real>& t, const Tensor<Real>& g) {
    const auto& xv = t.value(x);
    auto& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += xv.values[i] < 0 ? slope * g.values[i] : g.values[i];
  });
}

template <class Real>
Var dropout(Tape<Real>& tape, Var x, Real rate, bool training, std::mt19937_64& rng) {
  if (rate < 0 || rate >= 1) throw ParameterError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0) return x;
  const auto& xv = tape.value(x);
  auto keep = std::make_shared<std::vector<Real>>(xv.size());
  const Real inv = Real(1) / (Real(1) - rate);
  Tensor<Real> y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*keep)[i] = uniform01(rng) >= static_cast<double>(rate) ? inv : Real(0);
    y.values[i] = xv.values[i] * (*keep)[i];
  }
  return tape.record(std::move(y), {x}, [x, keep](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i] * (*keep)[i];
  });
}

template <class Real>
Var reshape(Tape<Real>& tape, Var x, Shape shape) {
  const auto& xv = tape.value(x);
  require(shape_size(shape) == xv.size(), "reshape: " + shape_str(xv.shape) + " -> " + shape_str(shape));
  Tensor<Real> y(std::move(shape), xv.values);
  return tape.record(std::move(y), {x}, [x](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i];
  });
}

template <class Real>
Var embedding(Tape<Real>& tape, Var table, std::span<const int> ids, Shape prefix) {
  const auto& tv = tape.value(table);
  require(tv.rank() == 2, "embedding: table must be rank 2");
  require(shape_size(prefix) == ids.size(), "embedding: id count does not match output prefix");
  const std::size_t rows = tv.dim(0), d = tv.dim(1);
  Shape shape = prefix;
  shape.push_back(d);
  Tensor<Real> y(shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw IndexError("embedding: index " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return tape.record(std::move(y), {table}, [table, idx, d](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gt = t.grad_accumulator(table);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      Real* row = gt.data() + static_cast<std::size_t>((*idx)[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g.values[i * d + j];
    }
  });
}

template <class Real>
Var concat_axis1(Tape<Real>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
          "concat_axis1: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  const std::size_t n = av.dim(0), la = av.dim(1), lb = bv.dim(1), d = av.dim(2);
  Tensor<Real> y({n, la + lb, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.data() + i * la * d, la * d, y.data() + i * (la + lb) * d);
    std::copy_n(bv.data() + i * lb * d, lb * d, y.data() + i * (la + lb) * d + la * d);
  }
  return tape.record(std::move(y), {a, b}, [a, b, n, la, lb, d](Tape<Real>& t, const Tensor<Real>& g) {
    for (std::size_t i = 0; i < n; ++i) {
      const Real* gi = g.data() + i * (la + lb) * d;
      if (t.needs_grad(a)) {
        Real* ga = t.grad_accumulator(a).data() + i * la * d;
        for (std::size_t j = 0; j < la * d; ++j) ga[j] += gi[j];
      }
      if (t.needs_grad(b)) {
        Real* gb = t.grad_accumulator(b).data() + i * lb * d;
        for (std::size_t j = 0; j < lb * d; ++j) gb[j] += gi[la * d + j];
      }
    }
  });
}

template <class Real>
Var slice_axis1(Tape<Real>& tape, Var x, std::size_t start, std::size_t len) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 3 && start + len <= xv.dim(1), "slice_axis1: range outside " + shape_str(xv.shape));
  const std::size_t n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  Tensor<Real> y({n, len, d});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data() + (i * l + start) * d, len * d, y.data() + i * len * d);
  return tape.record(std::move(y), {x}, [x, n, l, d, start, len](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < len * d; ++j) gx.values[(i * l + start) * d + j] += g.values[i * len * d + j];
  });
}

template <class Real>
Var mean_axis1(Tape<Real>& tape, Var x) {
  const auto& xv = tape.value(x);
  require(xv.rank() == 3 && xv.dim(1) > 0, "mean_axis1: expected non-empty rank-3 input");
  const std::size_t n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
  Tensor<Real> y({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < l; ++s)
      for (std::size_t j = 0; j < d; ++j) y.values[i * d + j] += xv.values[(i * l + s) * d + j];
  for (auto& v : y.values) v /= static_cast<Real>(l);
  return tape.record(std::move(y), {x}, [x, n, l, d](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(x);
    const Real inv = Real(1) / static_cast<Real>(l);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < l; ++s)
        for (std::size_t j = 0; j < d; ++j) gx.values[(i * l + s) * d + j] += g.values[i * d + j] * inv;
  });
}

template <class Real>
Var attention(Tape<Real>& tape, Var q, Var k, Var v, std::vector<std::uint8_t> mask, std::size_t heads) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  const auto& vv = tape.value(v);
  require(qv.rank() == 3 && kv.rank() == 3 && kv.shape == vv.shape && qv.dim(0) == kv.dim(0) && qv.dim(2) == kv.dim(2),
          "attention: q " + shape_str(qv.shape) + " k " + shape_str(kv.shape) + " v " + shape_str(vv.shape));
  if (heads == 0 || qv.dim(2) % heads != 0)
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(qv.dim(2)));
  kernels::AttentionDims dims{qv.dim(0), qv.dim(1), kv.dim(1), qv.dim(2), heads};
  require(mask.size() == dims.lq * dims.lk, "attention: mask must be lq x lk");
  Tensor<Real> y(qv.shape);
  auto probs = std::make_shared<std::vector<Real>>(dims.batch * heads * dims.lq * dims.lk);
  kernels::attention_forward(qv.data(), kv.data(), vv.data(), mask.data(), y.data(), probs->data(), dims);
  return tape.record(std::move(y), {q, k, v}, [q, k, v, probs, dims](Tape<Real>& t, const Tensor<Real>& g) {
    // The kernel accumulates into all three; inputs without a gradient get scratch.
    std::vector<Real> sq, sk, sv;
    Real* dq = t.needs_grad(q) ? t.grad_accumulator(q).data() : (sq.assign(t.value(q).size(), 0), sq.data());
    Real* dk = t.needs_grad(k) ? t.grad_accumulator(k).data() : (sk.assign(t.value(k).size(), 0), sk.data());
    Real* dv = t.needs_grad(v) ? t.grad_accumulator(v).data() : (sv.assign(t.value(v).size(), 0), sv.data());
    kernels::attention_backward(t.value(q).data(), t.value(k).data(), t.value(v).data(), probs->data(), g.data(), dq,
                                dk, dv, dims);
  });
}

template <class Real>
Var sum(Tape<Real>& tape, Var x) {
  const auto& xv = tape.value(x);
  Real s = 0;
  for (auto v : xv.values) s += v;
  return tape.record(Tensor<Real>::scalar(s), {x}, [x](Tape<Real>& t, const Tensor<Real>& g) {
    auto& gx = t.grad_accumulator(x);
    for (auto& v : gx.values) v += g.values[0];
  });
}

template <class Real>
Var mean(Tape<Real>& tape, Var x) {
  const std::size_t n = tape.value(x).size();
  require(n > 0, "mean: empty tensor");
  return scale(tape, sum(tape, x), Real(1) / static_cast<Real>(n));
}

template <class Real>
Var mse(Tape<Real>& tape, Var prediction, Var target) {
  const auto& pv = tape.value(prediction);
  const auto& tv = tape.value(target);
  require(pv.shape == tv.shape && pv.size() > 0,
          "mse: shape mismatch " + shape_str(pv.shape) + " vs " + shape_str(tv.shape));
  Real s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv.values[i] - tv.values[i]) * (pv.values[i] - tv.values[i]);
  const Real n = static_cast<Real>(pv.size());
  return tape.record(Tensor<Real>::scalar(s / n), {prediction, target},
                     [prediction, target, n](Tape<Real>& t, const Tensor<Real>& g) {
                       const auto& pv = t.value(prediction);
                       const auto& tv = t.value(target);
                       const Real c = Real(2) * g.values[0] / n;
                       if (t.needs_grad(prediction)) {
                         auto& gp = t.grad_accumulator(prediction);
                         for (std::size_t i = 0; i < pv.size(); ++i) gp.values[i] += c * (pv.values[i] - tv.values[i]);
                       }
                       if (t.needs_grad(target)) {
                         auto& gt = t.grad_accumulator(target);
                         for (std::size_t i = 0; i < pv.size(); ++i) gt.values[i] -= c * (pv.values[i] - tv.values[i]);
                       }
                     });
}

template <class Real>
Var cross_entropy(Tape<Real>& tape, Var logits, std::span<const int> targets) {
  const auto& lv = tape.value(logits);
  const std::size_t k = lv.last(), rows = lv.rows();
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(rows) + " rows");
  auto probs = std::make_shared<std::vector<Real>>(lv.size());
  Real loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k)
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(k) +
                       " classes");
    const Real* x = lv.data() + r * k;
    Real* p = probs->data() + r * k;
    const Real best = *std::max_element(x, x + k);
    Real total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(x[j] - best);
      total += p[j];
    }
    for (std::size_t j = 0; j < k; ++j) p[j] /= total;
    loss += -(x[targets[r]] - best - std::log(total));
  }
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return tape.record(Tensor<Real>::scalar(loss / static_cast<Real>(rows)), {logits},
                     [logits, probs, tgt, k, rows](Tape<Real>& t, const Tensor<Real>& g) {
                       auto& gl = t.grad_accumulator(logits);
                       const Real c = g.values[0] / static_cast<Real>(rows);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < k; ++j) {
                           const Real onehot = static_cast<std::size_t>((*tgt)[r]) == j ? Real(1) : Real(0);
                           gl.values[r * k + j] += c * ((*probs)[r * k + j] - onehot);
                         }
                     });
}

template <class Real>
Var gru_sequence(Tape<Real>& tape, Var x, Var wx, Var wh, Var bias, Var h0) {
  const auto& xv = tape.value(x);
  const auto& wxv = tape.value(wx);
  const auto& whv = tape.value(wh);
  const auto& bv = tape.value(bias);
  const auto& h0v = tape.value(h0);
  require(xv.rank() == 3, "gru_sequence: input must be [batch, time, features], got " + shape_str(xv.shape));
  const std::size_t nb = xv.dim(0), nt = xv.dim(1), in = xv.dim(2);
  if (nt == 0) throw DimensionError("gru_sequence: empty sequence");
  require(wxv.rank() == 2 && wxv.dim(0) == in && wxv.dim(1) % 3 == 0, "gru_sequence: bad input weight shape");
  const std::size_t u = wxv.dim(1) / 3;
  require(whv.shape == Shape{u, 3 * u}, "gru_sequence: recurrent weight must be [units, 3*units]");
  require(bv.shape == Shape{3 * u}, "gru_sequence: bias must be [3*units]");
  require(h0v.shape == Shape{nb, u}, "gru_sequence: h0 must be [batch, units]");
  if (!all_finite(xv)) throw NumericError("gru_sequence: non-finite input");

  // Split the recurrent weight into the (update, reset) block and the
  // candidate block so each step is two contiguous matmuls.
  auto wzr = std::make_shared<std::vector<Real>>(u * 2 * u);
  auto wn = std::make_shared<std::vector<Real>>(u * u);
  for (std::size_t i = 0; i < u; ++i) {
    std::copy_n(whv.data() + i * 3 * u, 2 * u, wzr->data() + i * 2 * u);
    std::copy_n(whv.data() + i * 3 * u + 2 * u, u, wn->data() + i * u);
  }
  const std::size_t rows = nb * nt;
  std::vector<Real> xp(rows * 3 * u);
  kernels::matmul(xv.data(), wxv.data(), xp.data(), rows, in, 3 * u, false);

  const bool keep = tape.any_needs_grad({x, wx, wh, bias, h0});
  const std::size_t cells = rows * u;
  auto zs = std::make_shared<std::vector<Real>>(keep ? cells : 0);
  auto rs = std::make_shared<std::vector<Real>>(keep ? cells : 0);
  auto ns = std::make_shared<std::vector<Real>>(keep ? cells : 0);
  auto rhs = std::make_shared<std::vector<Real>>(keep ? cells : 0);
  auto hprev = std::make_shared<std::vector<Real>>(keep ? cells : 0);

  Tensor<Real> out({nb, nt, u});
  std::vector<Real> h(h0v.values), hzr(nb * 2 * u), rh(nb * u), hn(nb * u);
  for (std::size_t t = 0; t < nt; ++t) {
    kernels::matmul(h.data(), wzr->data(), hzr.data(), nb, u, 2 * u, false);
    std::vector<Real> z(nb * u), r(nb * u);
    for (std::size_t b = 0; b < nb; ++b) {
      const Real* xpb = xp.data() + (b * nt + t) * 3 * u;
      for (std::size_t j = 0; j < u; ++j) {
        z[b * u + j] = sigmoid(xpb[j] + hzr[b * 2 * u + j] + bv.values[j]);
        r[b * u + j] = sigmoid(xpb[u + j] + hzr[b * 2 * u + u + j] + bv.values[u + j]);
        rh[b * u + j] = r[b * u + j] * h[b * u + j];
      }
    }
    kernels::matmul(rh.data(), wn->data(), hn.data(), nb, u, u, false);
    for (std::size_t b = 0; b < nb; ++b) {
      const Real* xpb = xp.data() + (b * nt + t) * 3 * u;
      const std::size_t cell = (b * nt + t) * u;
      for (std::size_t j = 0; j < u; ++j) {
        const Real n = std::tanh(xpb[2 * u + j] + hn[b * u + j] + bv.values[2 * u + j]);
        const Real zz = z[b * u + j];
        const Real hp = h[b * u + j];
        if (keep) {
          (*zs)[cell + j] = zz;
          (*rs)[cell + j] = r[b * u + j];
          (*ns)[cell + j] = n;
          (*rhs)[cell + j] = rh[b * u + j];
          (*hprev)[cell + j] = hp;
        }
        h[b * u + j] = (Real(1) - zz) * n + zz * hp;
        out.values[cell + j] = h[b * u + j];
      }
    }
  }

  return tape.record(std::move(out), {x, wx, wh, bias, h0},
                     [=](Tape<Real>& tp, const Tensor<Real>& g) {
                       std::vector<Real> dxp(rows * 3 * u), dh(nb * u), dnext(nb * u, Real(0));
                       std::vector<Real> dan(nb * u), dazr(nb * 2 * u), drh(nb * u), hp(nb * u), rhb(nb * u);
                       std::vector<Real> dwzr(u * 2 * u, Real(0)), dwn(u * u, Real(0));
                       for (std::size_t t = nt; t-- > 0;) {
                         for (std::size_t b = 0; b < nb; ++b) {
                           const std::size_t cell = (b * nt + t) * u;
                           for (std::size_t j = 0; j < u; ++j) {
                             const Real d = g.values[cell + j] + dnext[b * u + j];
                             const Real zz = (*zs)[cell + j], n = (*ns)[cell + j], p = (*hprev)[cell + j];
                             const Real dz = d * (p - n);
                             const Real dn = d * (Real(1) - zz);
                             dh[b * u + j] = d * zz;
                             dan[b * u + j] = dn * (Real(1) - n * n);
                             dazr[b * 2 * u + j] = dz * zz * (Real(1) - zz);
                             hp[b * u + j] = p;
                             rhb[b * u + j] = (*rhs)[cell + j];
                           }
                         }
                         std::fill(drh.begin(), drh.end(), Real(0));
                         kernels::matmul_nt(dan.data(), wn->data(), drh.data(), nb, u, u);
                         kernels::matmul_tn(rhb.data(), dan.data(), dwn.data(), nb, u, u);
                         for (std::size_t b = 0; b < nb; ++b) {
                           const std::size_t cell = (b * nt + t) * u;
                           for (std::size_t j = 0; j < u; ++j) {
                             const Real rr = (*rs)[cell + j];
                             const Real dr = drh[b * u + j] * hp[b * u + j];
                             dh[b * u + j] += drh[b * u + j] * rr;
                             dazr[b * 2 * u + u + j] = dr * rr * (Real(1) - rr);
                           }
                         }
                         kernels::matmul_nt(dazr.data(), wzr->data(), dh.data(), nb, 2 * u, u);
                         kernels::matmul_tn(hp.data(), dazr.data(), dwzr.data(), nb, u, 2 * u);
                         for (std::size_t b = 0; b < nb; ++b) {
                           Real* row = dxp.data() + (b * nt + t) * 3 * u;
                           std::copy_n(dazr.data() + b * 2 * u, 2 * u, row);
                           std::copy_n(dan.data() + b * u, u, row + 2 * u);
                         }
                         dnext.swap(dh);
                       }
                       if (tp.needs_grad(x))
                         kernels::matmul_nt(dxp.data(), tp.value(wx).data(), tp.grad_accumulator(x).data(), rows,
                                            3 * u, in);
                       if (tp.needs_grad(wx))
                         kernels::matmul_tn(tp.value(x).data(), dxp.data(), tp.grad_accumulator(wx).data(), rows, in,
                                            3 * u);
                       if (tp.needs_grad(bias)) {
                         auto& gb = tp.grad_accumulator(bias);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < 3 * u; ++j) gb.values[j] += dxp[r * 3 * u + j];
                       }
                       if (tp.needs_grad(wh)) {
                         auto& gw = tp.grad_accumulator(wh);
                         for (std::size_t i = 0; i < u; ++i) {
                           for (std::size_t j = 0; j < 2 * u; ++j) gw.values[i * 3 * u + j] += dwzr[i * 2 * u + j];
                           for (std::size_t j = 0; j < u; ++j) gw.values[i * 3 * u + 2 * u + j] += dwn[i * u + j];
                         }
                       }
                       if (tp.needs_grad(h0)) {
                         auto& gh = tp.grad_accumulator(h0);
                         for (std::size_t i = 0; i < nb * u; ++i) gh.values[i] += dnext[i];
                       }
                     });
}

template <class Real>
Var tap_sum(Tape<Real>& tape, Var m, Var w) {
  const auto& mv = tape.value(m);
  const auto& wv = tape.value(w);
  require(mv.rank() == 3 && wv.rank() == 1 && mv.dim(2) == wv.dim(0),
          "tap_sum: taps " + shape_str(mv.shape) + " vs weights " + shape_str(wv.shape));
  const std::size_t nb = mv.dim(0), len = mv.dim(1), taps = mv.dim(2);
  Tensor<Real> y({nb, len});
  kernels::tap_sum(mv.data(), wv.data(), y.data(), nb, len, taps);
  return tape.record(std::move(y), {m, w}, [m, w, nb, len, taps](Tape<Real>& t, const Tensor<Real>& g) {
    const auto half = static_cast<std::ptrdiff_t>(taps / 2);
    const auto& mv = t.value(m);
    const auto& wv = t.value(w);
    Real* gm = t.needs_grad(m) ? t.grad_accumulator(m).data() : nullptr;
    Real* gw = t.needs_grad(w) ? t.grad_accumulator(w).data() : nullptr;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::ptrdiff_t s = 0; s < static_cast<std::ptrdiff_t>(len); ++s)
        for (std::size_t j = 0; j < taps; ++j) {
          const std::ptrdiff_t src = s + static_cast<std::ptrdiff_t>(j) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
          const Real gs = g.values[b * len + static_cast<std::size_t>(s)];
          const std::size_t mi = (b * len + static_cast<std::size_t>(src)) * taps + j;
          if (gm) gm[mi] += wv.values[j] * gs;
          if (gw) gw[j] += mv.values[mi] * gs;
        }
  });
}

#define MEG_INSTANTIATE_OPS(Real)                                                                         \
  template Var matmul<Real>(Tape<Real>&, Var, Var);                                                       \
  template Var dense<Real>(Tape<Real>&, Var, Var, Var);                                                   \
  template Var add<Real>(Tape<Real>&, Var, Var);                                                          \
  template Var sub<Real>(Tape<Real>&, Var, Var);                                                          \
  template Var mul<Real>(Tape<Real>&, Var, Var);                                                          \
  template Var scale<Real>(Tape<Real>&, Var, Real);                                                       \
  template Var layer_norm<Real>(Tape<Real>&, Var, Var, Var, Real);                                        \
  template Var softmax_t<Real>(Tape<Real>&, Var, Real);                                                   \
  template Var leaky_relu<Real>(Tape<Real>&, Var, Real);                                                  \
  template Var dropout<Real>(Tape<Real>&, Var, Real, bool, std::mt19937_64&);                             \
  template Var reshape<Real>(Tape<Real>&, Var, Shape);                                                    \
  template Var embedding<Real>(Tape<Real>&, Var, std::span<const int>, Shape);                            \
  template Var concat_axis1<Real>(Tape<Real>&, Var, Var);                                                 \
  template Var slice_axis1<Real>(Tape<Real>&, Var, std::size_t, std::size_t);                             \
  template Var mean_axis1<Real>(Tape<Real>&, Var);                                                        \
  template Var attention<Real>(Tape<Real>&, Var, Var, Var, std::vector<std::uint8_t>, std::size_t);       \
  template Var sum<Real>(Tape<Real>&, Var);                                                               \
  template Var mean<Real>(Tape<Real>&, Var);                                                              \
  template Var mse<Real>(Tape<Real>&, Var, Var);                                                          \
  template Var cross_entropy<Real>(Tape<Real>&, Var, std::span<const int>);                               \
  template Var gru_sequence<Real>(Tape<Real>&, Var, Var, Var, Var, Var);                                  \
  template Var tap_sum<Real>(Tape<Real>&, Var, Var);

MEG_INSTANTIATE_OPS(float)
MEG_INSTANTIATE_OPS(double)

}  // namespace meg::ops
