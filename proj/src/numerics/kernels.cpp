#include "meg/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace meg::kernels {

namespace {

template <class Real>
inline void axpy(Real alpha, const Real* x, Real* y, std::size_t n) {
#pragma omp simd
  for (std::size_t j = 0; j < n; ++j) y[j] += alpha * x[j];
}

constexpr std::size_t kRowBlock = 64;

}  // namespace

template <class Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    Real* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, Real(0));
    const Real* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real s = ai[kk];
      if (s != Real(0)) axpy(s, b + kk * n, ci, n);
    }
  }
}

template <class Real>
void matmul_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  // Output rows are split across threads; each thread streams the input in
  // row blocks so b stays cache resident across its output rows.
  constexpr std::size_t kOutBlock = 8;
  const std::size_t out_blocks = (k + kOutBlock - 1) / kOutBlock;
#pragma omp parallel for schedule(static) if (m * k * n > 32768)
  for (std::ptrdiff_t ob = 0; ob < static_cast<std::ptrdiff_t>(out_blocks); ++ob) {
    const std::size_t k0 = static_cast<std::size_t>(ob) * kOutBlock;
    const std::size_t k1 = std::min(k, k0 + kOutBlock);
    for (std::size_t i0 = 0; i0 < m; i0 += kRowBlock) {
      const std::size_t i1 = std::min(m, i0 + kRowBlock);
      for (std::size_t kk = k0; kk < k1; ++kk) {
        Real* ck = c + kk * n;
        for (std::size_t i = i0; i < i1; ++i) {
          const Real s = a[i * k + kk];
          if (s != Real(0)) axpy(s, b + i * n, ck, n);
        }
      }
    }
  }
}

template <class Real>
void matmul_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k) {
  // Transpose b once so the inner loop is a contiguous axpy.
  std::vector<Real> bt(n * k);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = b[kk * n + j];
  matmul(a, bt.data(), c, m, n, k, true);
}

template <class Real>
void attention_forward(const Real* q, const Real* k, const Real* v, const std::uint8_t* mask, Real* out, Real* probs,
                       const AttentionDims& dims) {
  const std::size_t dh = dims.width / dims.heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto jobs = static_cast<std::ptrdiff_t>(dims.batch * dims.heads);
#pragma omp parallel for schedule(static) if (jobs > 1)
  for (std::ptrdiff_t job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / dims.heads;
    const std::size_t h = static_cast<std::size_t>(job) % dims.heads;
    const Real* qb = q + b * dims.lq * dims.width + h * dh;
    const Real* kb = k + b * dims.lk * dims.width + h * dh;
    const Real* vb = v + b * dims.lk * dims.width + h * dh;
    Real* ob = out + b * dims.lq * dims.width + h * dh;
    Real* pb = probs + (b * dims.heads + h) * dims.lq * dims.lk;
    for (std::size_t i = 0; i < dims.lq; ++i) {
      Real* p = pb + i * dims.lk;
      const std::uint8_t* mi = mask + i * dims.lk;
      Real best = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < dims.lk; ++j) {
        if (!mi[j]) {
          p[j] = Real(0);
          continue;
        }
        Real s = 0;
        const Real* qi = qb + i * dims.width;
        const Real* kj = kb + j * dims.width;
        for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
        p[j] = s * scale;
        best = std::max(best, p[j]);
      }
      Real* oi = ob + i * dims.width;
      std::fill(oi, oi + dh, Real(0));
      if (best == -std::numeric_limits<Real>::infinity()) continue;
      Real total = 0;
      for (std::size_t j = 0; j < dims.lk; ++j) {
        if (!mi[j]) continue;
        p[j] = std::exp(p[j] - best);
        total += p[j];
      }
      for (std::size_t j = 0; j < dims.lk; ++j) {
        if (!mi[j]) continue;
        p[j] /= total;
        axpy(p[j], vb + j * dims.width, oi, dh);
      }
    }
  }
}

template <class Real>
void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, const AttentionDims& dims) {
  const std::size_t dh = dims.width / dims.heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto jobs = static_cast<std::ptrdiff_t>(dims.batch * dims.heads);
#pragma omp parallel for schedule(static) if (jobs > 1)
  for (std::ptrdiff_t job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / dims.heads;
    const std::size_t h = static_cast<std::size_t>(job) % dims.heads;
    const std::size_t qoff = b * dims.lq * dims.width + h * dh;
    const std::size_t koff = b * dims.lk * dims.width + h * dh;
    const Real* pb = probs + (b * dims.heads + h) * dims.lq * dims.lk;
    std::vector<Real> dp(dims.lk);
    for (std::size_t i = 0; i < dims.lq; ++i) {
      const Real* p = pb + i * dims.lk;
      const Real* doi = dout + qoff + i * dims.width;
      Real dot = 0;
      for (std::size_t j = 0; j < dims.lk; ++j) {
        if (p[j] == Real(0)) {
          dp[j] = 0;
          continue;
        }
        const Real* vj = v + koff + j * dims.width;
        Real s = 0;
        for (std::size_t e = 0; e < dh; ++e) s += doi[e] * vj[e];
        dp[j] = s;
        dot += p[j] * s;
        axpy(p[j], doi, dv + koff + j * dims.width, dh);
      }
      const Real* qi = q + qoff + i * dims.width;
      Real* dqi = dq + qoff + i * dims.width;
      for (std::size_t j = 0; j < dims.lk; ++j) {
        if (p[j] == Real(0)) continue;
        const Real ds = p[j] * (dp[j] - dot) * scale;
        axpy(ds, k + koff + j * dims.width, dqi, dh);
        axpy(ds, qi, dk + koff + j * dims.width, dh);
      }
    }
  }
}

template <class Real>
void tap_sum(const Real* m, const Real* w, Real* out, std::size_t batch, std::size_t len, std::size_t taps) {
  const auto half = static_cast<std::ptrdiff_t>(taps / 2);
#pragma omp parallel for schedule(static) if (batch > 1)
  for (std::ptrdiff_t bb = 0; bb < static_cast<std::ptrdiff_t>(batch); ++bb) {
    const auto b = static_cast<std::size_t>(bb);
    const Real* mb = m + b * len * taps;
    Real* ob = out + b * len;
    for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(len); ++t) {
      Real s = 0;
      for (std::size_t j = 0; j < taps; ++j) {
        const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(j) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        s += w[j] * mb[static_cast<std::size_t>(src) * taps + j];
      }
      ob[t] = s;
    }
  }
}

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

#define MEG_INSTANTIATE_KERNELS(Real)                                                                               \
  template void matmul<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t, bool);         \
  template void matmul_tn<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);            \
  template void matmul_nt<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);            \
  template void attention_forward<Real>(const Real*, const Real*, const Real*, const std::uint8_t*, Real*, Real*,   \
                                        const AttentionDims&);                                                      \
  template void attention_backward<Real>(const Real*, const Real*, const Real*, const Real*, const Real*, Real*,    \
                                         Real*, Real*, const AttentionDims&);                                       \
  template void tap_sum<Real>(const Real*, const Real*, Real*, std::size_t, std::size_t, std::size_t);

MEG_INSTANTIATE_KERNELS(float)
MEG_INSTANTIATE_KERNELS(double)

}  // namespace meg::kernels
