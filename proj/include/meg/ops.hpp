#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "meg/tape.hpp"

// Differentiable layer primitives. Every op records its output on the tape
// and, when any input needs a gradient, a backward closure.
namespace meg::ops {

// x[..., in] * w[in, out]
template <class Real>
Var matmul(Tape<Real>& tape, Var x, Var w);

// Affine map over the last axis.
template <class Real>
Var dense(Tape<Real>& tape, Var x, Var w, Var b);

// Elementwise a + b; b may also be a trailing-shape suffix of a, in which case
// it is broadcast over the leading axes.
template <class Real>
Var add(Tape<Real>& tape, Var a, Var b);

template <class Real>
Var sub(Tape<Real>& tape, Var a, Var b);

template <class Real>
Var mul(Tape<Real>& tape, Var a, Var b);

template <class Real>
Var scale(Tape<Real>& tape, Var a, Real s);

template <class Real>
Var layer_norm(Tape<Real>& tape, Var x, Var gain, Var bias, Real eps);

// Softmax over the last axis of logits / temperature.
template <class Real>
Var softmax_t(Tape<Real>& tape, Var logits, Real temperature);

template <class Real>
Var leaky_relu(Tape<Real>& tape, Var x, Real slope);

// Inverted dropout; identity when !training or rate == 0.
template <class Real>
Var dropout(Tape<Real>& tape, Var x, Real rate, bool training, std::mt19937_64& rng);

template <class Real>
Var reshape(Tape<Real>& tape, Var x, Shape shape);

// Row gather: output shape is prefix + [table width].
template <class Real>
Var embedding(Tape<Real>& tape, Var table, std::span<const int> ids, Shape prefix);

// [n, la, d] ++ [n, lb, d] -> [n, la + lb, d]
template <class Real>
Var concat_axis1(Tape<Real>& tape, Var a, Var b);

// x[:, start:start+len, :] for a rank-3 x.
template <class Real>
Var slice_axis1(Tape<Real>& tape, Var x, std::size_t start, std::size_t len);

// Mean over axis 1 of a rank-3 tensor: [n, l, d] -> [n, d].
template <class Real>
Var mean_axis1(Tape<Real>& tape, Var x);

// Multi-head masked scaled dot-product attention. q [n, lq, d], k/v [n, lk, d],
// mask lq x lk shared across n (nonzero = allowed).
template <class Real>
Var attention(Tape<Real>& tape, Var q, Var k, Var v, std::vector<std::uint8_t> mask, std::size_t heads);

template <class Real>
Var sum(Tape<Real>& tape, Var x);

template <class Real>
Var mean(Tape<Real>& tape, Var x);

// Mean squared difference, scalar.
template <class Real>
Var mse(Tape<Real>& tape, Var prediction, Var target);

// Mean cross-entropy of softmax(logits[..., K]) against integer targets, one
// per row of logits.
template <class Real>
Var cross_entropy(Tape<Real>& tape, Var logits, std::span<const int> targets);

// Single-layer GRU over x [b, t, in] from h0 [b, units]. Gate blocks in wx
// [in, 3u], wh [u, 3u] and bias [3u] are ordered update, reset, candidate:
//   z = sig(x wz + h uz + bz), r = sig(x wr + h ur + br)
//   n = tanh(x wn + (r * h) un + bn), h' = (1 - z) * n + z * h
// Returns the hidden state at every step, [b, t, u].
template <class Real>
Var gru_sequence(Tape<Real>& tape, Var x, Var wx, Var wh, Var bias, Var h0);

// out[b, t] = sum_j w[j] * m[b, t + j - taps/2, j] with zero padding, where
// m is [b, t, taps].
template <class Real>
Var tap_sum(Tape<Real>& tape, Var m, Var w);

}  // namespace meg::ops
