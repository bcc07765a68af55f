#include <gtest/gtest.h>

#include <cmath>

#include "meg/adam.hpp"
#include "meg/grad_check.hpp"
#include "meg/ops.hpp"
#include "meg/rng.hpp"

namespace {

using meg::Rng;
using meg::Shape;
using meg::Tape;
using meg::Tensor;
using meg::Var;
namespace ops = meg::ops;

using T64 = Tensor<double>;

T64 make(Shape s, std::vector<double> v) { return T64(std::move(s), std::move(v)); }

// Projects a tensor to a scalar with fixed random weights so every output
// component contributes a distinct gradient.
Var project(Tape<double>& tape, Var y, Rng& rng) {
  auto w = meg::uniform_tensor<double>(tape.value(y).shape, 1.0, rng);
  return ops::sum(tape, ops::mul(tape, y, tape.constant(w)));
}

TEST(Dense, IdentityAndHandArithmetic) {
  Tape<double> tape;
  auto y = ops::dense(tape, tape.constant(make({2}, {1, 2})), tape.constant(make({2, 2}, {1, 0, 0, 1})),
                      tape.constant(make({2}, {0, 0})));
  EXPECT_EQ(tape.value(y).values, (std::vector<double>{1, 2}));
  auto z = ops::dense(tape, tape.constant(make({2}, {1, 1})), tape.constant(make({2, 1}, {2, 3})),
                      tape.constant(make({1}, {5})));
  EXPECT_EQ(tape.value(z).values, (std::vector<double>{10}));
}

TEST(Dense, ShapeMismatchIsDimensionError) {
  Tape<double> tape;
  EXPECT_THROW(ops::dense(tape, tape.constant(T64({3})), tape.constant(T64({2, 2})), tape.constant(T64({2}))),
               meg::DimensionError);
  EXPECT_THROW(ops::dense(tape, tape.constant(T64({2})), tape.constant(T64({2, 2})), tape.constant(T64({3}))),
               meg::DimensionError);
}

TEST(Dense, WeightGradientMatchesFiniteDifferences) {
  Rng rng(1);
  auto x = meg::uniform_tensor<double>({4, 3}, 1.0, rng);
  auto b = meg::uniform_tensor<double>({5}, 1.0, rng);
  auto w = meg::uniform_tensor<double>({3, 5}, 1.0, rng);
  auto res = meg::grad_check(
      [&](Tape<double>& t, Var wv) { return ops::sum(t, ops::dense(t, t.constant(x), wv, t.constant(b))); }, w);
  EXPECT_LT(res.max_error, 1e-4);
}

TEST(LayerNorm, ConstantVectorNormalisesToZero) {
  Tape<double> tape;
  auto y = ops::layer_norm(tape, tape.constant(make({3}, {3, 3, 3})), tape.constant(make({3}, {1, 1, 1})),
                           tape.constant(make({3}, {0, 0, 0})), 1e-5);
  for (double v : tape.value(y).values) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, UnitVarianceInputIsUnchangedUpToEps) {
  Tape<double> tape;
  auto y = ops::layer_norm(tape, tape.constant(make({2}, {1, -1})), tape.constant(make({2}, {1, 1})),
                           tape.constant(make({2}, {0, 0})), 1e-8);
  EXPECT_NEAR(tape.value(y).values[0], 1.0, 1e-7);
  EXPECT_NEAR(tape.value(y).values[1], -1.0, 1e-7);
}

TEST(LayerNorm, EmptyFeatureAxisIsDimensionError) {
  Tape<double> tape;
  EXPECT_THROW(ops::layer_norm(tape, tape.constant(T64({2, 0})), tape.constant(T64({0})), tape.constant(T64({0})),
                               1e-5),
               meg::DimensionError);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  auto gain = meg::uniform_tensor<double>({6}, 1.0, rng);
  auto bias = meg::uniform_tensor<double>({6}, 1.0, rng);
  auto x = meg::uniform_tensor<double>({3, 6}, 2.0, rng);
  auto res = meg::grad_check(
      [&](Tape<double>& t, Var xv) {
        Rng r(9);
        return project(t, ops::layer_norm(t, xv, t.constant(gain), t.constant(bias), 1e-5), r);
      },
      x);
  EXPECT_LT(res.max_error, 1e-4);
}

TEST(Gru, ZeroParametersKeepZeroState) {
  Tape<double> tape;
  Rng rng(3);
  auto x = meg::uniform_tensor<double>({1, 7, 2}, 1.0, rng);
  auto y = ops::gru_sequence(tape, tape.constant(x), tape.constant(T64({2, 12})), tape.constant(T64({4, 12})),
                             tape.constant(T64({12})), tape.constant(T64({1, 4})));
  for (double v : tape.value(y).values) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SingleStepEqualsHandWrittenCell) {
  Rng rng(4);
  const std::size_t in = 2, u = 3;
  auto x = meg::uniform_tensor<double>({1, 1, in}, 1.0, rng);
  auto wx = meg::uniform_tensor<double>({in, 3 * u}, 1.0, rng);
  auto wh = meg::uniform_tensor<double>({u, 3 * u}, 1.0, rng);
  auto b = meg::uniform_tensor<double>({3 * u}, 1.0, rng);
  auto h0 = meg::uniform_tensor<double>({1, u}, 1.0, rng);
  Tape<double> tape;
  auto y = ops::gru_sequence(tape, tape.constant(x), tape.constant(wx), tape.constant(wh), tape.constant(b),
                             tape.constant(h0));
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> r(u);
  for (std::size_t j = 0; j < u; ++j) {
    double a = b[u + j];
    for (std::size_t i = 0; i < in; ++i) a += x[i] * wx.at(i, u + j);
    for (std::size_t i = 0; i < u; ++i) a += h0[i] * wh.at(i, u + j);
    r[j] = sig(a);
  }
  for (std::size_t j = 0; j < u; ++j) {
    double az = b[j], an = b[2 * u + j];
    for (std::size_t i = 0; i < in; ++i) {
      az += x[i] * wx.at(i, j);
      an += x[i] * wx.at(i, 2 * u + j);
    }
    for (std::size_t i = 0; i < u; ++i) {
      az += h0[i] * wh.at(i, j);
      an += r[i] * h0[i] * wh.at(i, 2 * u + j);
    }
    const double z = sig(az), n = std::tanh(an);
    EXPECT_NEAR(tape.value(y)[j], (1 - z) * n + z * h0[j], 1e-14);
  }
}

TEST(Gru, GradientThroughFiveStepsMatchesFiniteDifferences) {
  Rng rng(5);
  meg::ParamSet<double> p;
  p.add("x", meg::uniform_tensor<double>({2, 5, 3}, 1.0, rng));
  p.add("wx", meg::uniform_tensor<double>({3, 12}, 0.5, rng));
  p.add("wh", meg::uniform_tensor<double>({4, 12}, 0.5, rng));
  p.add("b", meg::uniform_tensor<double>({12}, 0.5, rng));
  p.add("h0", meg::uniform_tensor<double>({2, 4}, 0.5, rng));
  auto res = meg::grad_check_params(
      [](Tape<double>& t, const meg::Bound<double>& b) {
        Rng r(17);
        return project(t, ops::gru_sequence(t, b["x"], b["wx"], b["wh"], b["b"], b["h0"]), r);
      },
      p);
  EXPECT_LT(res.max_error, 1e-4) << "worst " << res.worst << " a=" << res.analytic << " n=" << res.numeric;
}

TEST(Gru, NonFiniteInputIsNumericError) {
  Tape<double> tape;
  T64 x({1, 2, 1});
  x[1] = std::nan("");
  EXPECT_THROW(ops::gru_sequence(tape, tape.constant(x), tape.constant(T64({1, 3})), tape.constant(T64({1, 3})),
                                 tape.constant(T64({3})), tape.constant(T64({1, 1}))),
               meg::NumericError);
}

TEST(SoftmaxT, Examples) {
  Tape<double> tape;
  auto a = ops::softmax_t(tape, tape.constant(make({3}, {0, 0, 0})), 1.0);
  for (double v : tape.value(a).values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto b = ops::softmax_t(tape, tape.constant(make({2}, {10, 0})), 0.1);
  EXPECT_GT(tape.value(b)[0], 0.9999);
  // Extended-precision evaluation of exp(x_i) / sum exp(x).
  auto c = ops::softmax_t(tape, tape.constant(make({3}, {1, 2, 3})), 1.0);
  EXPECT_NEAR(tape.value(c)[0], 0.090030573170380457998, 1e-15);
  EXPECT_NEAR(tape.value(c)[1], 0.24472847105479765247, 1e-15);
  EXPECT_NEAR(tape.value(c)[2], 0.66524095577482188953, 1e-15);
}

TEST(SoftmaxT, NonPositiveTemperatureIsParameterError) {
  Tape<double> tape;
  EXPECT_THROW(ops::softmax_t(tape, tape.constant(T64({3})), 0.0), meg::ParameterError);
  EXPECT_THROW(ops::softmax_t(tape, tape.constant(T64({3})), -1.0), meg::ParameterError);
}

TEST(Adam, ZeroGradientLeavesFreshParametersUnchanged) {
  meg::ParamSet<double> p;
  p.add("w", make({2}, {0.5, -1.5}));
  meg::AdamState<double> s;
  meg::adam_step(p, {T64({2})}, s, 0.1);
  EXPECT_EQ(p.get("w").values, (std::vector<double>{0.5, -1.5}));
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  meg::ParamSet<double> p;
  p.add("w", make({1}, {0.0}));
  meg::AdamState<double> s;
  meg::adam_step(p, {make({1}, {1.0})}, s, 0.1);
  const double m = s.m[0][0], v = s.v[0][0];
  meg::adam_step(p, {T64({1})}, s, 0.1);
  EXPECT_NEAR(s.m[0][0], 0.9 * m, 1e-15);
  EXPECT_NEAR(s.v[0][0], 0.999 * v, 1e-15);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  meg::ParamSet<double> p;
  p.add("w", make({1}, {2.0}));
  meg::AdamState<double> s;
  meg::adam_step(p, {make({1}, {1.0})}, s, 0.01);
  EXPECT_NEAR(p.get("w")[0], 2.0 - 0.01, 1e-9);
}

TEST(Adam, QuadraticDescentMatchesReferenceRun) {
  meg::ParamSet<double> p;
  p.add("w", make({1}, {1.0}));
  meg::AdamState<double> s;
  for (int i = 0; i < 100; ++i) meg::adam_step(p, {make({1}, {2.0 * p.get("w")[0]})}, s, 0.05);
  // Value from an independent scalar Adam loop run once.
  EXPECT_NEAR(p.get("w")[0], -0.00421140038463886, 1e-12);
  EXPECT_LT(std::abs(p.get("w")[0]), 0.2);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
  meg::ParamSet<double> p;
  p.add("w", T64({2}));
  meg::AdamState<double> s;
  EXPECT_THROW(meg::adam_step(p, {T64({3})}, s, 0.1), meg::DimensionError);
}

TEST(Adam, DeterministicGivenSameInputs) {
  Rng rng(8);
  meg::ParamSet<float> p;
  p.add("w", meg::uniform_tensor<float>({10}, 1.0, rng));
  auto g = meg::uniform_tensor<float>({10}, 1.0, rng);
  auto q = p;
  meg::AdamState<float> s1, s2;
  for (int i = 0; i < 5; ++i) {
    meg::adam_step(p, {g}, s1, 1e-3);
    meg::adam_step(q, {g}, s2, 1e-3);
  }
  EXPECT_EQ(p.get("w").values, q.get("w").values);
}

TEST(GradCheck, Examples) {
  auto sq = meg::grad_check([](Tape<double>& t, Var x) { return ops::sum(t, ops::mul(t, x, x)); }, make({2}, {1, 2}));
  EXPECT_LT(sq.max_error, 1e-8);
  auto constant = meg::grad_check([](Tape<double>& t, Var) { return t.constant(T64::scalar(3.0)); }, make({2}, {1, 2}));
  EXPECT_LT(constant.max_error, 1e-8);

  Rng rng(12);
  auto w = meg::uniform_tensor<double>({4, 5}, 1.0, rng);
  auto b = meg::uniform_tensor<double>({5}, 1.0, rng);
  auto chain = meg::grad_check(
      [&](Tape<double>& t, Var x) {
        auto h = ops::dense(t, x, t.constant(w), t.constant(b));
        h = ops::layer_norm(t, h, t.constant(T64({5}, 1.0)), t.constant(T64({5})), 1e-5);
        Rng r(4);
        return project(t, ops::softmax_t(t, h, 0.5), r);
      },
      meg::uniform_tensor<double>({3, 4}, 1.0, rng));
  EXPECT_LT(chain.max_error, 1e-4);
}

TEST(GradCheck, NonFiniteValueIsNumericError) {
  EXPECT_THROW(meg::grad_check(
                   [](Tape<double>& t, Var x) {
                     return ops::scale(t, ops::sum(t, x), std::numeric_limits<double>::infinity());
                   },
                   make({1}, {1.0})),
               meg::NumericError);
}

TEST(Attention, DeltaMaskReturnsThatValue) {
  Rng rng(13);
  auto q = meg::uniform_tensor<double>({1, 2, 4}, 1.0, rng);
  auto k = meg::uniform_tensor<double>({1, 3, 4}, 1.0, rng);
  auto v = meg::uniform_tensor<double>({1, 3, 4}, 1.0, rng);
  Tape<double> tape;
  auto y = ops::attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), {0, 1, 0, 0, 0, 1}, 1);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_DOUBLE_EQ(tape.value(y)[e], v[4 + e]);
    EXPECT_DOUBLE_EQ(tape.value(y)[4 + e], v[8 + e]);
  }
}

TEST(Attention, HeadsMustDivideWidth) {
  Tape<double> tape;
  auto x = tape.constant(T64({1, 2, 6}));
  EXPECT_THROW(ops::attention(tape, x, x, x, std::vector<std::uint8_t>(4, 1), 4), meg::ConfigError);
}

TEST(Embedding, OutOfRangeIsIndexError) {
  Tape<double> tape;
  std::vector<int> ids{0, 3};
  EXPECT_THROW(ops::embedding(tape, tape.constant(T64({3, 2})), ids, {2}), meg::IndexError);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tape<double> tape;
  std::vector<int> targets{0, 4, 2};
  auto l = ops::cross_entropy(tape, tape.constant(T64({3, 7})), targets);
  EXPECT_NEAR(tape.value(l)[0], std::log(7.0), 1e-12);
}

// Every differentiable op, composed on randomized small shapes, over 50 seeds.
TEST(Property, EveryOpPassesGradCheckAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t n = 1 + meg::uniform_index(rng, 3);
    const std::size_t l = 2 + meg::uniform_index(rng, 3);
    const std::size_t d = 2 * (1 + meg::uniform_index(rng, 2));
    const std::size_t k = 2 + meg::uniform_index(rng, 4);
    meg::ParamSet<double> p;
    p.add("x", meg::uniform_tensor<double>({n, l, d}, 1.0, rng));
    p.add("w", meg::uniform_tensor<double>({d, d}, 0.7, rng));
    p.add("b", meg::uniform_tensor<double>({d}, 0.5, rng));
    p.add("g", meg::uniform_tensor<double>({d}, 1.0, rng));
    p.add("beta", meg::uniform_tensor<double>({d}, 0.5, rng));
    p.add("table", meg::uniform_tensor<double>({k, d}, 1.0, rng));
    p.add("wx", meg::uniform_tensor<double>({d, 3 * d}, 0.5, rng));
    p.add("wh", meg::uniform_tensor<double>({d, 3 * d}, 0.5, rng));
    p.add("bg", meg::uniform_tensor<double>({3 * d}, 0.5, rng));
    p.add("h0", meg::uniform_tensor<double>({n, d}, 0.5, rng));
    p.add("head", meg::uniform_tensor<double>({d, k}, 0.7, rng));
    p.add("taps", meg::uniform_tensor<double>({d}, 1.0, rng));
    std::vector<int> ids(n * l), targets(n * l);
    for (auto& i : ids) i = static_cast<int>(meg::uniform_index(rng, k));
    for (auto& i : targets) i = static_cast<int>(meg::uniform_index(rng, k));
    std::vector<std::uint8_t> mask(l * l);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j <= i; ++j) mask[i * l + j] = 1;
    const std::uint64_t proj_seed = rng();

    auto fn = [&](Tape<double>& t, const meg::Bound<double>& b) {
      Rng r(proj_seed);
      Var e = ops::add(t, b["x"], ops::embedding(t, b["table"], ids, {n, l}));
      Var h = ops::gru_sequence(t, e, b["wx"], b["wh"], b["bg"], b["h0"]);
      Var a = ops::attention(t, ops::dense(t, h, b["w"], b["b"]), h, e, mask, d / 2);
      Var ln = ops::layer_norm(t, ops::add(t, a, h), b["g"], b["beta"], 1e-5);
      Var act = ops::leaky_relu(t, ops::sub(t, ln, e), 0.1);
      Var cat = ops::concat_axis1(t, act, ops::slice_axis1(t, e, 1, l - 1));
      Var pooled = ops::mean_axis1(t, cat);
      Var logits = ops::matmul(t, ln, b["head"]);
      Var ce = ops::cross_entropy(t, logits, targets);
      Var sm = project(t, ops::softmax_t(t, logits, 0.7), r);
      Var dec = ops::tap_sum(t, ops::reshape(t, act, {n, l, d}), b["taps"]);
      Var err = ops::mse(t, dec, t.constant(meg::uniform_tensor<double>({n, l}, 1.0, r)));
      Var tot = ops::add(t, ops::add(t, ce, sm), ops::add(t, err, project(t, pooled, r)));
      return ops::add(t, tot, ops::scale(t, ops::mean(t, ops::mul(t, a, a)), 0.3));
    };
    auto res = meg::grad_check_params(fn, p, 1e-6);
    EXPECT_LT(res.max_error, 1e-4) << "seed " << seed << " worst " << res.worst << " a=" << res.analytic
                                   << " n=" << res.numeric;
  }
}

TEST(Property, SoftmaxRowsSumToOne) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<float> tape;
    auto x = meg::uniform_tensor<float>({4, 9}, 20.0, rng);
    const float temp = static_cast<float>(meg::uniform(rng, 0.05, 3.0));
    auto y = ops::softmax_t(tape, tape.constant(x), temp);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_GE(tape.value(y).at(r, j), 0.0f);
        s += tape.value(y).at(r, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Property, LayerNormStandardisesEachSlice) {
  Rng rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<double> tape;
    const std::size_t d = 2 + meg::uniform_index(rng, 30);
    auto x = meg::uniform_tensor<double>({3, d}, 5.0, rng);
    auto y = ops::layer_norm(tape, tape.constant(x), tape.constant(T64({d}, 1.0)), tape.constant(T64({d})), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double mu = 0, var = 0;
      for (std::size_t j = 0; j < d; ++j) mu += tape.value(y).at(r, j);
      mu /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) var += std::pow(tape.value(y).at(r, j) - mu, 2);
      var /= static_cast<double>(d);
      EXPECT_LT(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(Dropout, IdentityOutsideTrainingAndUnbiasedInside) {
  Rng rng(23);
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({10000}, 1.0f));
  EXPECT_EQ(ops::dropout(tape, x, 0.2f, false, rng).id, x.id);
  auto y = ops::dropout(tape, x, 0.2f, true, rng);
  double s = 0;
  for (float v : tape.value(y).values) s += v;
  EXPECT_NEAR(s / 10000.0, 1.0, 0.03);
}

}  // namespace
