#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "meg/kernels.hpp"

namespace meg::kernels::reference {

template <class Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      Real s = accumulate ? c[i * n + j] : Real(0);
      for (std::size_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
}

template <class Real>
void matmul_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t i = 0; i < m; ++i) s += a[i * k + kk] * b[i * n + j];
      c[kk * n + j] += s;
    }
}

template <class Real>
void matmul_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t kk = 0; kk < k; ++kk) {
      Real s = 0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[kk * n + j];
      c[i * k + kk] += s;
    }
}

template <class Real>
void attention_forward(const Real* q, const Real* k, const Real* v, const std::uint8_t* mask, Real* out, Real* probs,
                       const AttentionDims& dims) {
  const std::size_t dh = dims.width / dims.heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  for (std::size_t b = 0; b < dims.batch; ++b)
    for (std::size_t h = 0; h < dims.heads; ++h)
      for (std::size_t i = 0; i < dims.lq; ++i) {
        Real* p = probs + ((b * dims.heads + h) * dims.lq + i) * dims.lk;
        Real best = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < dims.lk; ++j) {
          p[j] = 0;
          if (!mask[i * dims.lk + j]) continue;
          Real s = 0;
          for (std::size_t e = 0; e < dh; ++e)
            s += q[(b * dims.lq + i) * dims.width + h * dh + e] * k[(b * dims.lk + j) * dims.width + h * dh + e];
          p[j] = s * scale;
          best = std::max(best, p[j]);
        }
        Real total = 0;
        for (std::size_t j = 0; j < dims.lk; ++j) {
          if (!mask[i * dims.lk + j]) continue;
          p[j] = std::exp(p[j] - best);
          total += p[j];
        }
        for (std::size_t j = 0; j < dims.lk; ++j)
          if (mask[i * dims.lk + j]) p[j] /= total;
        for (std::size_t e = 0; e < dh; ++e) {
          Real s = 0;
          for (std::size_t j = 0; j < dims.lk; ++j) s += p[j] * v[(b * dims.lk + j) * dims.width + h * dh + e];
          out[(b * dims.lq + i) * dims.width + h * dh + e] = s;
        }
      }
}

template <class Real>
void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, const AttentionDims& dims) {
  const std::size_t dh = dims.width / dims.heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  std::vector<Real> dp(dims.lk);
  for (std::size_t b = 0; b < dims.batch; ++b)
    for (std::size_t h = 0; h < dims.heads; ++h)
      for (std::size_t i = 0; i < dims.lq; ++i) {
        const Real* p = probs + ((b * dims.heads + h) * dims.lq + i) * dims.lk;
        auto qi = [&](std::size_t e) { return (b * dims.lq + i) * dims.width + h * dh + e; };
        auto kj = [&](std::size_t j, std::size_t e) { return (b * dims.lk + j) * dims.width + h * dh + e; };
        Real dot = 0;
        for (std::size_t j = 0; j < dims.lk; ++j) {
          Real s = 0;
          for (std::size_t e = 0; e < dh; ++e) {
            s += dout[qi(e)] * v[kj(j, e)];
            dv[kj(j, e)] += p[j] * dout[qi(e)];
          }
          dp[j] = s;
          dot += p[j] * s;
        }
        for (std::size_t j = 0; j < dims.lk; ++j) {
          const Real ds = p[j] * (dp[j] - dot) * scale;
          for (std::size_t e = 0; e < dh; ++e) {
            dq[qi(e)] += ds * k[kj(j, e)];
            dk[kj(j, e)] += ds * q[qi(e)];
          }
        }
      }
}

template <class Real>
void tap_sum(const Real* m, const Real* w, Real* out, std::size_t batch, std::size_t len, std::size_t taps) {
  const auto half = static_cast<long>(taps / 2);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t) {
      Real s = 0;
      for (std::size_t j = 0; j < taps; ++j) {
        const long src = static_cast<long>(t) + static_cast<long>(j) - half;
        if (src < 0 || src >= static_cast<long>(len)) continue;
        s += w[j] * m[(b * len + static_cast<std::size_t>(src)) * taps + j];
      }
      out[b * len + t] = s;
    }
}

#define MEG_INSTANTIATE_REFERENCE(Real)                                                                             \
  template void matmul<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t, bool);         \
  template void matmul_tn<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);            \
  template void matmul_nt<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);            \
  template void attention_forward<Real>(const Real*, const Real*, const Real*, const std::uint8_t*, Real*, Real*,   \
                                        const AttentionDims&);                                                      \
  template void attention_backward<Real>(const Real*, const Real*, const Real*, const Real*, const Real*, Real*,    \
                                         Real*, Real*, const AttentionDims&);                                       \
  template void tap_sum<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);

MEG_INSTANTIATE_REFERENCE(float)
MEG_INSTANTIATE_REFERENCE(double)

}  // namespace meg::kernels::reference
