#pragma once

#include <span>
#include <string>
#include <vector>

#include "meg/rng.hpp"
#include "meg/signal.hpp"

namespace meg::baselines {

// x_t = sum_i coeffs[i] * x_{t-1-i} + noise_std * e_t
struct ArChannel {
  std::vector<double> coeffs;
  double noise_std = 0;
};

struct ArModel {
  std::size_t order = 80;
  std::vector<ArChannel> channels;
};

// Least squares via the normal equations with 1e-8 ridge on the Gram
// diagonal; noise_std is the standard error of the regression. Throws
// NumericError naming the reciprocal condition number when the design is
// rank deficient.
ArChannel fit_ar(std::span<const float> series, std::size_t order);
// One model per channel, fitted on the concatenation of the sessions' data
// (lagged rows never straddle sessions).
ArModel fit_ar(const SignalSet& signals, std::size_t order);

// Largest companion-matrix eigenvalue modulus; >= 1 means unstable.
double spectral_radius(const ArChannel& ch);

struct ArSeries {
  std::vector<double> values;  // generated steps, prompt excluded
  bool unstable = false;
};

// Prompt of order standard-normal draws, then the recursion.
ArSeries generate_ar(const ArChannel& ch, std::size_t steps, Rng& rng);
Recording generate_ar(const ArModel& model, std::size_t steps, std::uint32_t fs, Rng& rng,
                      std::vector<std::string>* warnings = nullptr);

// Plain-text coefficient table: one row per channel, noise_std first.
std::string coefficient_table(const ArModel& model);

}  // namespace meg::baselines
