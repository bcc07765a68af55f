#pragma once

#include <cstdint>
#include <vector>

#include "meg/rng.hpp"
#include "meg/signal.hpp"

namespace meg::synth {

// Bursty narrowband oscillation of one subject. The on/off process is a
// two-state Markov chain with geometric dwell times of the given means.
struct OscillationProfile {
  double centre_hz = 10.0;
  double mean_on_s = 0.5;
  double mean_off_s = 1.0;
  double amplitude = 2.0;
};

struct TaskProfile {
  int classes = 4;
  std::size_t trials_per_class = 40;  // per session
  double evoked_amplitude = 1.5;
  double evoked_duration_s = 0.16;
};

struct SynthSpec {
  std::size_t subjects = 10;
  std::size_t sessions = 1;  // per subject
  std::size_t channels = 8;
  double duration_s = 120.0;
  std::uint32_t fs = 250;
  double aperiodic_exponent = 1.0;
  // Subject s gets centre_hz = base_hz + s * step_hz unless profiles are given.
  double base_hz = 8.0;
  double step_hz = 1.5;
  double burst_amplitude = 2.0;
  double mean_on_s = 0.5;
  double mean_off_s = 1.0;
  std::vector<OscillationProfile> profiles;
  bool task = false;
  TaskProfile task_profile;
  std::uint64_t seed = 1;

  OscillationProfile profile(std::size_t subject) const;
};

struct SynthDataset {
  SignalSet signals;
  EventTable events;
  // Ground-truth burst state, [session][channel][sample], 1 = burst on.
  std::vector<std::vector<std::vector<std::uint8_t>>> burst_paths;
};

// Each channel: 1/f^exponent background + bursty subject-specific oscillation
// (+ class-specific evoked responses at event onsets), standardised per
// channel. Deterministic in spec.seed.
SynthDataset synth_dataset(const SynthSpec& spec);

// Gaussian noise whose power spectrum falls as 1/f^exponent (zero mean).
std::vector<double> aperiodic_noise(std::size_t n, double exponent, Rng& rng);

// Two-state Markov chain path with geometric dwell times (in samples).
std::vector<std::uint8_t> markov_on_off(std::size_t n, double mean_on, double mean_off, Rng& rng);

}  // namespace meg::synth
