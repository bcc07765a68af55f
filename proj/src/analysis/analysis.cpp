#include "meg/analysis.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>

#include "meg/errors.hpp"

namespace meg::analysis {

namespace {

struct Welch {
  std::size_t nperseg = 0, step = 0;
  std::vector<double> window;
  double scale = 0;

  Welch(double fs, double window_s, double overlap) {
    if (!(fs > 0) || !(window_s > 0)) throw ParameterError("welch: fs and window must be positive");
    if (!(overlap >= 0 && overlap < 1)) throw ParameterError("welch: overlap must lie in [0, 1)");
    nperseg = static_cast<std::size_t>(std::llround(window_s * fs));
    if (nperseg < 2) throw ParameterError("welch: window shorter than two samples");
    step = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(nperseg) * (1 - overlap))));
    window.resize(nperseg);
    double ss = 0;
    for (std::size_t i = 0; i < nperseg; ++i) {
      window[i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(nperseg));
      ss += window[i] * window[i];
    }
    scale = 1.0 / (fs * ss);
  }

  std::size_t bins() const { return nperseg / 2 + 1; }

  // Adds the periodograms of every mean-removed segment of x into acc;
  // returns the count.
  std::size_t accumulate(std::span<const float> x, std::vector<double>& acc) const {
    if (x.size() < nperseg) {
      throw InputError("welch: window of " + std::to_string(nperseg) + " samples exceeds series of " +
                       std::to_string(x.size()));
    }
    std::vector<double> seg(nperseg);
    std::vector<std::complex<double>> spec(bins());
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(nperseg), seg.data(),
                                          reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE);
    std::size_t count = 0;
    for (std::size_t start = 0; start + nperseg <= x.size(); start += step, ++count) {
      double mean = 0;
      for (std::size_t i = 0; i < nperseg; ++i) mean += x[start + i];
      mean /= static_cast<double>(nperseg);
      for (std::size_t i = 0; i < nperseg; ++i) seg[i] = window[i] * (x[start + i] - mean);
      fftw_execute(plan);
      for (std::size_t k = 0; k < bins(); ++k) {
        double p = std::norm(spec[k]) * scale;
        if (k != 0 && !(nperseg % 2 == 0 && k == bins() - 1)) p *= 2;
        acc[k] += p;
      }
    }
    fftw_destroy_plan(plan);
    return count;
  }
};

Psd empty_psd(const Welch& w, double fs, double window_s, double overlap, std::size_t channels) {
  Psd psd;
  psd.fs = fs;
  psd.window_s = window_s;
  psd.overlap = overlap;
  psd.freqs.resize(w.bins());
  for (std::size_t k = 0; k < w.bins(); ++k) psd.freqs[k] = static_cast<double>(k) * fs / static_cast<double>(w.nperseg);
  psd.power.assign(channels, std::vector<double>(w.bins(), 0.0));
  return psd;
}

std::vector<std::vector<double>> correlation_matrix(const std::vector<std::vector<double>>& feats) {
  const std::size_t n = feats.size();
  std::vector<std::vector<double>> r(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) r[i][j] = r[j][i] = pearson(feats[i], feats[j]).value_or(0.0);
  return r;
}

std::vector<double> upper(const std::vector<std::vector<double>>& m, const std::vector<std::size_t>& perm) {
  std::vector<double> out;
  const std::size_t n = m.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) out.push_back(m[perm[i]][perm[j]]);
  return out;
}

std::vector<std::size_t> identity(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

void check_features(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen) {
  if (real.size() != gen.size()) throw DimensionError("feature sets differ in subject count");
  for (std::size_t i = 0; i < real.size(); ++i)
    if (real[i].size() != real[0].size() || gen[i].size() != real[0].size())
      throw DimensionError("feature vectors differ in length");
}

}  // namespace

Psd welch_psd(std::span<const float> x, double fs, double window_s, double overlap) {
  Welch w(fs, window_s, overlap);
  Psd psd = empty_psd(w, fs, window_s, overlap, 1);
  psd.segments = w.accumulate(x, psd.power[0]);
  for (double& p : psd.power[0]) p /= static_cast<double>(psd.segments);
  return psd;
}

Psd welch_psd(const Recording& rec, double window_s, double overlap) {
  return welch_psd(std::vector<const Recording*>{&rec}, window_s, overlap);
}

Psd welch_psd(const std::vector<const Recording*>& sessions, double window_s, double overlap) {
  if (sessions.empty()) throw InputError("welch: no sessions");
  const double fs = sessions[0]->fs;
  const std::size_t channels = sessions[0]->channels;
  Welch w(fs, window_s, overlap);
  Psd psd = empty_psd(w, fs, window_s, overlap, channels);
  for (const Recording* rec : sessions) {
    if (rec->channels != channels || rec->fs != sessions[0]->fs)
      throw DimensionError("welch: sessions differ in channel count or rate");
    std::size_t n = 0;
    for (std::size_t c = 0; c < channels; ++c) n = w.accumulate(rec->channel(c), psd.power[c]);
    psd.segments += n;
  }
  for (auto& row : psd.power)
    for (double& p : row) p /= static_cast<double>(psd.segments);
  return psd;
}

double integrate(const Psd& psd, std::size_t channel, double lo_hz, double hi_hz) {
  double total = 0;
  for (std::size_t k = 1; k < psd.freqs.size(); ++k) {
    const double f0 = psd.freqs[k - 1], f1 = psd.freqs[k];
    if (f0 < lo_hz || f1 > hi_hz) continue;
    total += 0.5 * (psd.power[channel][k - 1] + psd.power[channel][k]) * (f1 - f0);
  }
  return total;
}

std::vector<Band> canonical_bands() {
  return {{"delta", 1, 4}, {"theta", 4, 8}, {"alpha", 8, 12}, {"beta", 13, 30}, {"gamma", 30, 45}};
}

std::vector<std::vector<double>> band_power_maps(const Psd& psd, const std::vector<Band>& bands) {
  if (bands.empty()) throw ParameterError("band_power_maps: no bands");
  const std::size_t nc = psd.channels();
  std::vector<std::vector<double>> maps(bands.size(), std::vector<double>(nc, 0.0));
  for (std::size_t b = 0; b < bands.size(); ++b) {
    std::size_t bins = 0;
    for (std::size_t k = 0; k < psd.freqs.size(); ++k) {
      if (psd.freqs[k] < bands[b].lo || psd.freqs[k] > bands[b].hi) continue;
      ++bins;
      for (std::size_t c = 0; c < nc; ++c) maps[b][c] += psd.power[c][k];
    }
    if (bins == 0) throw ParameterError("band_power_maps: band '" + bands[b].name + "' contains no frequency bins");
    for (double& v : maps[b]) v /= static_cast<double>(bins);
  }
  for (std::size_t c = 0; c < nc; ++c) {
    double mean = 0;
    for (const auto& m : maps) mean += m[c];
    mean /= static_cast<double>(bands.size());
    for (auto& m : maps) m[c] = mean > 0 ? m[c] / mean : 0.0;
  }
  return maps;
}

FingerprintKind parse_kind(const std::string& name) {
  if (name == "spatial") return FingerprintKind::spatial;
  if (name == "spectral") return FingerprintKind::spectral;
  if (name == "spatial_spectral" || name == "spatial+spectral") return FingerprintKind::spatial_spectral;
  if (name == "tde") return FingerprintKind::tde;
  throw ParameterError("unknown fingerprint kind '" + name + "'");
}

std::string kind_name(FingerprintKind kind) {
  switch (kind) {
    case FingerprintKind::spatial: return "spatial";
    case FingerprintKind::spectral: return "spectral";
    case FingerprintKind::spatial_spectral: return "spatial_spectral";
    case FingerprintKind::tde: return "tde";
  }
  return "?";
}

std::vector<double> psd_fingerprint(const Psd& psd, FingerprintKind kind, double fmin, double fmax) {
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < psd.freqs.size(); ++k)
    if (psd.freqs[k] >= fmin && psd.freqs[k] <= fmax) keep.push_back(k);
  if (keep.empty()) throw ParameterError("fingerprint: no frequency bins in range");
  const std::size_t nc = psd.channels();
  std::vector<double> out;
  switch (kind) {
    case FingerprintKind::spatial:
      for (std::size_t c = 0; c < nc; ++c) {
        double s = 0;
        for (auto k : keep) s += psd.power[c][k];
        out.push_back(s / static_cast<double>(keep.size()));
      }
      break;
    case FingerprintKind::spectral:
      for (auto k : keep) {
        double s = 0;
        for (std::size_t c = 0; c < nc; ++c) s += psd.power[c][k];
        out.push_back(s / static_cast<double>(nc));
      }
      break;
    case FingerprintKind::spatial_spectral:
      for (std::size_t c = 0; c < nc; ++c)
        for (auto k : keep) out.push_back(psd.power[c][k]);
      break;
    case FingerprintKind::tde:
      throw ParameterError("fingerprint: tde kind needs the time series, not a PSD");
  }
  return out;
}

FingerprintFeature fingerprint(const std::vector<const Recording*>& sessions, FingerprintKind kind,
                               const FingerprintOptions& opt) {
  if (sessions.empty()) throw InputError("fingerprint: no sessions");
  FingerprintFeature f;
  f.kind = kind;
  f.subject = sessions[0]->subject_id;
  if (kind != FingerprintKind::tde) {
    f.values = psd_fingerprint(welch_psd(sessions, opt.window_s, opt.overlap), kind, opt.fmin, opt.fmax);
    return f;
  }
  // Covariance of the lag-embedded multichannel series, pooled over sessions.
  const std::size_t nc = sessions[0]->channels;
  const std::size_t nl = static_cast<std::size_t>(2 * opt.max_lag + 1);
  const std::size_t e = nc * nl;
  std::vector<double> cov(e * e, 0.0), mean(e, 0.0), row(e);
  std::size_t frames = 0;
  for (const Recording* rec : sessions) {
    if (rec->channels != nc) throw DimensionError("fingerprint: sessions differ in channel count");
    if (rec->samples <= nl - 1) throw InputError("fingerprint: session shorter than the lag span");
    for (std::size_t t = nl - 1; t < rec->samples; ++t) {
      for (std::size_t c = 0; c < nc; ++c) {
        const float* x = rec->channel(c).data();
        for (std::size_t l = 0; l < nl; ++l) row[c * nl + l] = x[t - l];
      }
      for (std::size_t i = 0; i < e; ++i) {
        mean[i] += row[i];
        const double ri = row[i];
        double* ci = cov.data() + i * e;
        for (std::size_t j = i; j < e; ++j) ci[j] += ri * row[j];
      }
      ++frames;
    }
  }
  const double n = static_cast<double>(frames);
  for (std::size_t i = 0; i < e; ++i)
    for (std::size_t j = i; j < e; ++j) f.values.push_back(cov[i * e + j] / n - (mean[i] / n) * (mean[j] / n));
  return f;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double correlation_distance(std::span<const double> a, std::span<const double> b) {
  const auto r = pearson(a, b);
  return r ? 1.0 - *r : 2.0;
}

Identification topk_identify(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen,
                             std::size_t k) {
  check_features(real, gen);
  if (k == 0) throw ParameterError("topk_identify: k must be positive");
  const std::size_t n = real.size();
  if (n == 0) throw InputError("topk_identify: no subjects");
  Identification id;
  for (const auto* set : {&real, &gen})
    for (const auto& v : *set)
      if (!pearson(v, v)) ++id.degenerate;
  id.distance.assign(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) id.distance[i][j] = correlation_distance(real[i], gen[j]);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t rank = 0;  // entries in column j at least as close as the diagonal
    for (std::size_t i = 0; i < n; ++i)
      if (i != j && id.distance[i][j] <= id.distance[j][j]) ++rank;
    if (rank < k) ++hits;
  }
  id.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  return id;
}

std::optional<double> consistency_score(const std::vector<std::vector<double>>& real,
                                        const std::vector<std::vector<double>>& gen) {
  check_features(real, gen);
  if (real.size() < 3) throw InputError("consistency_score: needs at least three subjects");
  const auto p = identity(real.size());
  return pearson(upper(correlation_matrix(real), p), upper(correlation_matrix(gen), p));
}

double permutation_pvalue(const std::vector<std::vector<double>>& real, const std::vector<std::vector<double>>& gen,
                          std::size_t n_perm, Rng& rng) {
  if (n_perm == 0) throw ParameterError("permutation_pvalue: n_perm must be positive");
  check_features(real, gen);
  if (real.size() < 3) throw InputError("permutation_pvalue: needs at least three subjects");
  const auto rr = correlation_matrix(real);
  const auto gg = correlation_matrix(gen);
  auto perm = identity(real.size());
  const auto ref = upper(rr, perm);
  const auto observed = pearson(ref, upper(gg, perm));
  if (!observed) return 1.0;
  std::size_t extreme = 0;
  for (std::size_t i = 0; i < n_perm; ++i) {
    shuffle(perm.begin(), perm.end(), rng);
    const auto null = pearson(ref, upper(gg, perm));
    if (null && *null >= *observed) ++extreme;
  }
  return static_cast<double>(1 + extreme) / static_cast<double>(1 + n_perm);
}

}  // namespace meg::analysis
