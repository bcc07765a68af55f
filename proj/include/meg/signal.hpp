#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace meg {

// One recording session: channels x samples, stored channel-major.
struct Recording {
  std::string session_id;
  int subject_id = 0;
  std::uint32_t fs = 250;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<float> data;

  Recording() = default;
  Recording(std::size_t c, std::size_t t, std::uint32_t rate = 250)
      : fs(rate), channels(c), samples(t), data(c * t, 0.0f) {}

  std::span<float> channel(std::size_t c) { return {data.data() + c * samples, samples}; }
  std::span<const float> channel(std::size_t c) const { return {data.data() + c * samples, samples}; }
};

struct SignalSet {
  std::vector<Recording> sessions;

  std::size_t channels() const { return sessions.empty() ? 0 : sessions.front().channels; }
  std::uint32_t fs() const { return sessions.empty() ? 0 : sessions.front().fs; }
  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& s : sessions) n += s.samples;
    return n;
  }
};

// Token labels aligned sample-for-sample with a Recording.
struct TokenTrace {
  std::string session_id;
  int subject_id = 0;
  std::uint16_t vocab = 0;  // number of distinct labels (K*)
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<std::uint16_t> labels;

  std::span<std::uint16_t> channel(std::size_t c) { return {labels.data() + c * samples, samples}; }
  std::span<const std::uint16_t> channel(std::size_t c) const { return {labels.data() + c * samples, samples}; }
};

struct TokenCorpus {
  std::uint16_t vocab = 0;
  std::vector<TokenTrace> sessions;

  std::size_t channels() const { return sessions.empty() ? 0 : sessions.front().channels; }
};

// Task event; session indexes SignalSet::sessions.
struct Event {
  int session = 0;
  int subject = 0;
  std::size_t onset = 0;
  int label = 0;
};

using EventTable = std::vector<Event>;

// Subtract the mean and divide by the standard deviation of every channel.
void standardise(Recording& rec);

}  // namespace meg
