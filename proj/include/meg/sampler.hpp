#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "meg/gpt.hpp"
#include "meg/rng.hpp"
#include "meg/tokeniser.hpp"

namespace meg::sampler {

struct GenerationConfig {
  double top_p = 0.99;
  std::size_t steps = 2500;
  int subject_id = -1;  // -1 = no subject term
  std::uint64_t seed = 1;
  void validate() const;
};

// Occurrence rate of each label over the corpus, normalised.
std::vector<double> token_frequencies(const TokenCorpus& corpus);

// L x C i.i.d. draws from the frequencies, returned [channel][time].
std::vector<std::vector<int>> init_prompt(std::span<const double> frequencies, std::size_t L, std::size_t C, Rng& rng);

// Labels of the nucleus: sorted by descending probability, the shortest
// prefix whose mass exceeds top_p, extended by any labels tied with its last
// member.
std::vector<std::size_t> nucleus(std::span<const double> probs, double top_p);

std::size_t nucleus_sample(std::span<const double> probs, double top_p, Rng& rng);

struct Generated {
  std::vector<std::vector<std::uint16_t>> tokens;  // [channel][step]
  Recording signal;                                // steps samples, prompt excluded
};

// Autoregressive loop: newest latent's next-token distribution per channel,
// nucleus-sampled, appended, window slid by one. Tokens are decoded with the
// tokeniser at the end.
Generated generate(const gpt::GptModel& model, const GenerationConfig& config, const tokeniser::TokeniserModel& tok,
                   std::span<const double> frequencies, std::uint32_t fs = 250);

// Token-only variant used when no tokeniser is at hand.
std::vector<std::vector<std::uint16_t>> generate_tokens(const gpt::GptModel& model, const GenerationConfig& config,
                                                        std::span<const double> frequencies);

}  // namespace meg::sampler
