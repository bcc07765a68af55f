#pragma once

#include <cstddef>
#include <cstdint>

// Hot loops of the numeric core. The top-level namespace holds the
// OpenMP-parallel kernels used by the ops; meg::kernels::reference holds the
// plain serial versions they are tested and benchmarked against.
//
// Parallel kernels split work over output rows only, so every output element
// is produced by one thread with a fixed summation order: results do not
// depend on the thread count.
namespace meg::kernels {

// c[m,n] = a[m,k] * b[k,n]  (or += when accumulate)
template <class Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// c[k,n] += a[m,k]^T * b[m,n]
template <class Real>
void matmul_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n);

// c[m,k] += a[m,n] * b[k,n]^T
template <class Real>
void matmul_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k);

struct AttentionDims {
  std::size_t batch = 1;  // independent sequences
  std::size_t lq = 1;     // query length
  std::size_t lk = 1;     // key length
  std::size_t width = 1;  // model width, split evenly across heads
  std::size_t heads = 1;
};

// Scaled dot-product attention per sequence and head. mask is lq x lk
// (nonzero = allowed) and shared across the batch. probs receives the
// attention weights [batch, heads, lq, lk]; a query row with no allowed key
// produces zero weights and a zero output.
template <class Real>
void attention_forward(const Real* q, const Real* k, const Real* v, const std::uint8_t* mask, Real* out, Real* probs,
                       const AttentionDims& dims);

// Accumulates into dq, dk, dv.
template <class Real>
void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, const AttentionDims& dims);

// out[b,t] = sum_j w[j] * m[b, t + j - taps/2, j], zero outside [0, len).
template <class Real>
void tap_sum(const Real* m, const Real* w, Real* out, std::size_t batch, std::size_t len, std::size_t taps);

namespace reference {

template <class Real>
void matmul(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
template <class Real>
void matmul_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n);
template <class Real>
void matmul_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t n, std::size_t k);
template <class Real>
void attention_forward(const Real* q, const Real* k, const Real* v, const std::uint8_t* mask, Real* out, Real* probs,
                       const AttentionDims& dims);
template <class Real>
void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, const AttentionDims& dims);
template <class Real>
void tap_sum(const Real* m, const Real* w, Real* out, std::size_t batch, std::size_t len, std::size_t taps);

}  // namespace reference

void set_threads(int n);
int max_threads();

}  // namespace meg::kernels
