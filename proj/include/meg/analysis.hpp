#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meg/rng.hpp"
#include "meg/signal.hpp"

namespace meg::analysis {

// Welch estimate; power is [channel][frequency] one-sided density (units^2/Hz).
struct Psd {
  std::vector<double> freqs;
  std::vector<std::vector<double>> power;
  double fs = 0;
  double window_s = 0;
  double overlap = 0;
  std::string window = "hann";
  std::size_t segments = 0;

  std::size_t channels() const { return power.size(); }
};

// Hann-windowed periodograms of mean-removed segments, averaged. Throws
// InputError when the window is longer than the series.
Psd welch_psd(std::span<const float> x, double fs, double window_s = 2.0, double overlap = 0.5);
Psd welch_psd(const Recording& rec, double window_s = 2.0, double overlap = 0.5);
// Channel-wise average of per-session PSDs, weighted by segment count.
Psd welch_psd(const std::vector<const Recording*>& sessions, double window_s = 2.0, double overlap = 0.5);

// Trapezoidal integral of one channel's density.
double integrate(const Psd& psd, std::size_t channel, double lo_hz, double hi_hz);

struct Band {
  std::string name;
  double lo = 0;
  double hi = 0;
};
// delta 1-4, theta 4-8, alpha 8-12, beta 13-30, gamma 30-45 Hz
std::vector<Band> canonical_bands();

// maps[band][channel]: mean density over the band's bins divided by that
// channel's mean across bands.
std::vector<std::vector<double>> band_power_maps(const Psd& psd, const std::vector<Band>& bands);

enum class FingerprintKind { spatial, spectral, spatial_spectral, tde };
FingerprintKind parse_kind(const std::string& name);
std::string kind_name(FingerprintKind kind);

struct FingerprintOptions {
  double window_s = 2.0;
  double overlap = 0.5;
  double fmin = 1.0;  // frequency range kept for the PSD kinds
  double fmax = 45.0;
  int max_lag = 7;  // tde lags -max_lag..max_lag
};

struct FingerprintFeature {
  FingerprintKind kind = FingerprintKind::spatial;
  int subject = 0;
  std::vector<double> values;
};

// Feature of one subject from all of their sessions.
FingerprintFeature fingerprint(const std::vector<const Recording*>& sessions, FingerprintKind kind,
                               const FingerprintOptions& opt = {});
// Same, from a precomputed PSD (PSD kinds only; bins outside fmin..fmax dropped).
std::vector<double> psd_fingerprint(const Psd& psd, FingerprintKind kind, double fmin, double fmax);

// 1 - Pearson correlation; 2 (maximal) when either vector has zero variance.
double correlation_distance(std::span<const double> a, std::span<const double> b);

struct Identification {
  double accuracy = 0;
  std::size_t degenerate = 0;  // vectors with zero variance
  std::vector<std::vector<double>> distance;  // [real i][generated j]
};

// Column j (generated subject j) is correct when its distance to real subject
// j is among the k smallest in that column (ties counted against it).
Identification topk_identify(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen,
                             std::size_t k);

// Pearson correlation between the off-diagonal upper triangles of the
// real-real and generated-generated correlation matrices; nullopt when either
// triangle is constant.
std::optional<double> consistency_score(const std::vector<std::vector<double>>& real,
                                        const std::vector<std::vector<double>>& gen);

// Null: rows and columns of the generated correlation matrix permuted
// together. p = (1 + #{null >= observed}) / (1 + n_perm).
double permutation_pvalue(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen,
                          std::size_t n_perm, Rng& rng);

// Pearson correlation; nullopt when either side is constant.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

}  // namespace meg::analysis
