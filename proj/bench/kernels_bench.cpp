// Serial reference kernels against their OpenMP counterparts.
// Thread count follows OMP_NUM_THREADS.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "meg/kernels.hpp"

namespace k = meg::kernels;

namespace {

std::vector<float> filled(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<float> dist;
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::matmul(a.data(), b.data(), c.data(), n, n, n, false);
    else
      k::reference::matmul(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

template <bool Parallel>
void BM_MatmulTN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = filled(n * n, 3), b = filled(n * n, 4);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::matmul_tn(a.data(), b.data(), c.data(), n, n, n);
    else
      k::reference::matmul_tn(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

// GPT-shaped: 8 latents over a 64 token window, causal-style mask.
k::AttentionDims dims_for(std::size_t batch) { return {batch, 8, 64, 64, 4}; }

std::vector<std::uint8_t> mask_for(const k::AttentionDims& d) {
  std::vector<std::uint8_t> m(d.lq * d.lk);
  for (std::size_t i = 0; i < d.lq; ++i)
    for (std::size_t j = 0; j < d.lk; ++j) m[i * d.lk + j] = j <= d.lk - d.lq + i;
  return m;
}

template <bool Parallel>
void BM_AttentionForward(benchmark::State& state) {
  const auto d = dims_for(static_cast<std::size_t>(state.range(0)));
  const auto q = filled(d.batch * d.lq * d.width, 5), kk = filled(d.batch * d.lk * d.width, 6),
             v = filled(d.batch * d.lk * d.width, 7);
  const auto mask = mask_for(d);
  std::vector<float> out(d.batch * d.lq * d.width), probs(d.batch * d.heads * d.lq * d.lk);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::attention_forward(q.data(), kk.data(), v.data(), mask.data(), out.data(), probs.data(), d);
    else
      k::reference::attention_forward(q.data(), kk.data(), v.data(), mask.data(), out.data(), probs.data(), d);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_AttentionBackward(benchmark::State& state) {
  const auto d = dims_for(static_cast<std::size_t>(state.range(0)));
  const auto q = filled(d.batch * d.lq * d.width, 8), kk = filled(d.batch * d.lk * d.width, 9),
             v = filled(d.batch * d.lk * d.width, 10), dout = filled(d.batch * d.lq * d.width, 11);
  const auto mask = mask_for(d);
  std::vector<float> out(d.batch * d.lq * d.width), probs(d.batch * d.heads * d.lq * d.lk);
  k::reference::attention_forward(q.data(), kk.data(), v.data(), mask.data(), out.data(), probs.data(), d);
  std::vector<float> dq(q.size()), dk(kk.size()), dv(v.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::attention_backward(q.data(), kk.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(), dv.data(), d);
    else
      k::reference::attention_backward(q.data(), kk.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(),
                                       dv.data(), d);
    benchmark::DoNotOptimize(dq.data());
  }
}

// Tokeniser decoder: batch of series, 10 taps.
template <bool Parallel>
void BM_TapSum(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const std::size_t len = 2000, taps = 10;
  const auto m = filled(batch * len * taps, 12), w = filled(taps, 13);
  std::vector<float> out(batch * len);
  for (auto _ : state) {
    if constexpr (Parallel)
      k::tap_sum(m.data(), w.data(), out.data(), batch, len, taps);
    else
      k::reference::tap_sum(m.data(), w.data(), out.data(), batch, len, taps);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Matmul<false>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/openmp")->Arg(64)->Arg(256)->UseRealTime();
BENCHMARK(BM_MatmulTN<false>)->Name("matmul_tn/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_MatmulTN<true>)->Name("matmul_tn/openmp")->Arg(64)->Arg(256)->UseRealTime();
BENCHMARK(BM_AttentionForward<false>)->Name("attention_fwd/serial")->Arg(16)->Arg(64);
BENCHMARK(BM_AttentionForward<true>)->Name("attention_fwd/openmp")->Arg(16)->Arg(64)->UseRealTime();
BENCHMARK(BM_AttentionBackward<false>)->Name("attention_bwd/serial")->Arg(16)->Arg(64);
BENCHMARK(BM_AttentionBackward<true>)->Name("attention_bwd/openmp")->Arg(16)->Arg(64)->UseRealTime();
BENCHMARK(BM_TapSum<false>)->Name("tap_sum/serial")->Arg(8)->Arg(64);
BENCHMARK(BM_TapSum<true>)->Name("tap_sum/openmp")->Arg(8)->Arg(64)->UseRealTime();

BENCHMARK_MAIN();
