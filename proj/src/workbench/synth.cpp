#include "meg/synth.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "meg/errors.hpp"

namespace meg {

void standardise(Recording& rec) {
  for (std::size_t c = 0; c < rec.channels; ++c) {
    auto x = rec.channel(c);
    if (x.empty()) continue;
    double mu = 0;
    for (float v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (float v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double sd = var > 0 ? std::sqrt(var) : 1.0;
    for (float& v : x) v = static_cast<float>((v - mu) / sd);
  }
}

}  // namespace meg

namespace meg::synth {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Per-sample phase diffusion of the oscillation (radians); sets its bandwidth.
constexpr double kPhaseJitter = 0.03;

void unit_variance(std::vector<double>& x) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  const double sd = var > 0 ? std::sqrt(var) : 1.0;
  for (double& v : x) v = (v - mu) / sd;
}

}  // namespace

OscillationProfile SynthSpec::profile(std::size_t subject) const {
  if (subject < profiles.size()) return profiles[subject];
  OscillationProfile p;
  p.centre_hz = base_hz + static_cast<double>(subject) * step_hz;
  p.mean_on_s = mean_on_s;
  p.mean_off_s = mean_off_s;
  p.amplitude = burst_amplitude;
  return p;
}

std::vector<double> aperiodic_noise(std::size_t n, double exponent, Rng& rng) {
  if (n < 2) return std::vector<double>(n, 0.0);
  const std::size_t bins = n / 2 + 1;
  std::vector<std::complex<double>> spec(bins);
  for (std::size_t k = 1; k < bins; ++k) {
    const double amp = std::pow(static_cast<double>(k), -exponent / 2.0);
    const double re = normal(rng), im = normal(rng);
    spec[k] = {amp * re, amp * im};
  }
  std::vector<double> out(n);
  fftw_plan plan = fftw_plan_dft_c2r_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(spec.data()), out.data(),
                                        FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  unit_variance(out);
  return out;
}

std::vector<std::uint8_t> markov_on_off(std::size_t n, double mean_on, double mean_off, Rng& rng) {
  if (mean_on < 1.0 || mean_off < 1.0) throw ConfigError("burst dwell times must be at least one sample");
  const double p_leave_on = 1.0 / mean_on;
  const double p_leave_off = 1.0 / mean_off;
  std::vector<std::uint8_t> path(n);
  std::uint8_t state = uniform01(rng) < mean_on / (mean_on + mean_off) ? 1 : 0;
  for (std::size_t t = 0; t < n; ++t) {
    path[t] = state;
    const double leave = state ? p_leave_on : p_leave_off;
    if (uniform01(rng) < leave) state = 1 - state;
  }
  return path;
}

SynthDataset synth_dataset(const SynthSpec& spec) {
  if (spec.subjects == 0 || spec.sessions == 0 || spec.channels == 0)
    throw ConfigError("synth: subjects, sessions and channels must be positive");
  if (spec.fs == 0 || spec.duration_s <= 0) throw ConfigError("synth: fs and duration must be positive");
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    if (static_cast<double>(spec.fs) <= 2.0 * spec.profile(s).centre_hz)
      throw ConfigError("synth: fs must exceed twice the centre frequency of subject " + std::to_string(s));
  }
  const auto samples = static_cast<std::size_t>(std::llround(spec.duration_s * spec.fs));
  const double fs = spec.fs;
  const auto& task = spec.task_profile;
  const auto evoked_len = static_cast<std::size_t>(std::llround(task.evoked_duration_s * fs));
  if (spec.task) {
    if (task.classes < 2) throw ConfigError("synth: task needs at least two classes");
    const std::size_t trials = static_cast<std::size_t>(task.classes) * task.trials_per_class;
    if (samples < 2 * spec.fs + trials * (evoked_len + 1))
      throw ConfigError("synth: session too short for " + std::to_string(trials) + " trials");
  }

  SynthDataset out;
  Rng master(spec.seed);
  // Subject-level traits are drawn once so every session of a subject shares them.
  std::vector<std::vector<double>> gains(spec.subjects, std::vector<double>(spec.channels));
  for (auto& g : gains)
    for (auto& v : g) v = 0.5 + uniform01(master);

  for (std::size_t subj = 0; subj < spec.subjects; ++subj) {
    const OscillationProfile prof = spec.profile(subj);
    for (std::size_t ses = 0; ses < spec.sessions; ++ses) {
      Rng rng(master());
      Recording rec(spec.channels, samples, spec.fs);
      rec.subject_id = static_cast<int>(subj);
      rec.session_id = "sub-" + std::to_string(subj) + "_ses-" + std::to_string(ses);
      const int session_index = static_cast<int>(out.signals.sessions.size());

      std::vector<Event> events;
      if (spec.task) {
        const std::size_t trials = static_cast<std::size_t>(task.classes) * task.trials_per_class;
        std::vector<int> labels(trials);
        for (std::size_t i = 0; i < trials; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(task.classes));
        shuffle(labels.begin(), labels.end(), rng);
        const std::size_t spacing = (samples - 2 * spec.fs) / trials;
        for (std::size_t i = 0; i < trials; ++i) {
          const std::size_t jitter = spacing > evoked_len ? uniform_index(rng, (spacing - evoked_len) / 2 + 1) : 0;
          events.push_back({session_index, static_cast<int>(subj), spec.fs + i * spacing + jitter, labels[i]});
        }
      }

      std::vector<std::vector<std::uint8_t>> paths;
      for (std::size_t c = 0; c < spec.channels; ++c) {
        std::vector<double> x = aperiodic_noise(samples, spec.aperiodic_exponent, rng);
        auto path = markov_on_off(samples, prof.mean_on_s * fs, prof.mean_off_s * fs, rng);
        double phase = uniform(rng, 0.0, kTwoPi);
        const double amp = prof.amplitude * gains[subj][c];
        for (std::size_t t = 0; t < samples; ++t) {
          phase += kTwoPi * prof.centre_hz / fs + kPhaseJitter * normal(rng);
          if (path[t]) x[t] += amp * std::sin(phase);
        }
        for (const auto& ev : events) {
          const double f = 4.0 + 3.0 * ev.label;
          const double pattern = std::cos(0.7 * static_cast<double>(c) + 1.3 * ev.label);
          for (std::size_t i = 0; i < evoked_len && ev.onset + i < samples; ++i) {
            const double w = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(evoked_len));
            x[ev.onset + i] += task.evoked_amplitude * pattern * w * std::sin(kTwoPi * f * static_cast<double>(i) / fs);
          }
        }
        auto dst = rec.channel(c);
        for (std::size_t t = 0; t < samples; ++t) dst[t] = static_cast<float>(x[t]);
        paths.push_back(std::move(path));
      }
      standardise(rec);
      out.signals.sessions.push_back(std::move(rec));
      out.burst_paths.push_back(std::move(paths));
      out.events.insert(out.events.end(), events.begin(), events.end());
    }
  }
  return out;
}

}  // namespace meg::synth
