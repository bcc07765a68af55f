#include "meg/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "meg/errors.hpp"

namespace meg::sampler {

namespace {

std::size_t categorical(std::span<const double> weights, double total, Rng& rng) {
  const double u = uniform01(rng) * total;
  double acc = 0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0) continue;
    acc += weights[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

}  // namespace

void GenerationConfig::validate() const {
  if (!(top_p > 0 && top_p <= 1)) throw ParameterError("generation: top_p must lie in (0, 1]");
  if (steps == 0) throw ParameterError("generation: steps must be positive");
}

std::vector<double> token_frequencies(const TokenCorpus& corpus) {
  std::vector<double> f(corpus.vocab, 0.0);
  double n = 0;
  for (const auto& s : corpus.sessions)
    for (auto l : s.labels) {
      f[l] += 1;
      n += 1;
    }
  if (n == 0) throw InputError("token_frequencies: empty corpus");
  for (double& v : f) v /= n;
  return f;
}

std::vector<std::vector<int>> init_prompt(std::span<const double> frequencies, std::size_t L, std::size_t C, Rng& rng) {
  double total = 0;
  for (double f : frequencies) {
    if (f < 0 || !std::isfinite(f)) throw InputError("init_prompt: frequencies must be finite and non-negative");
    total += f;
  }
  if (!(total > 0)) throw InputError("init_prompt: all frequencies are zero");
  std::vector<std::vector<int>> prompt(C, std::vector<int>(L));
  for (auto& ch : prompt)
    for (auto& t : ch) t = static_cast<int>(categorical(frequencies, total, rng));
  return prompt;
}

std::vector<std::size_t> nucleus(std::span<const double> probs, double top_p) {
  if (!(top_p > 0)) throw ParameterError("nucleus: top_p must be positive");
  if (probs.empty()) throw InputError("nucleus: empty distribution");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double mass = 0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep++]];
    if (mass > top_p) break;
  }
  const double boundary = probs[order[keep - 1]];
  while (keep < order.size() && probs[order[keep]] == boundary) ++keep;
  // Zero-probability labels are never emitted, whatever top_p says.
  while (keep > 1 && probs[order[keep - 1]] <= 0) --keep;
  order.resize(keep);
  return order;
}

std::size_t nucleus_sample(std::span<const double> probs, double top_p, Rng& rng) {
  const auto set = nucleus(probs, top_p);
  std::vector<double> w(set.size());
  double total = 0;
  for (std::size_t i = 0; i < set.size(); ++i) total += w[i] = probs[set[i]];
  if (!(total > 0)) return set.front();
  return set[categorical(w, total, rng)];
}

std::vector<std::vector<std::uint16_t>> generate_tokens(const gpt::GptModel& model, const GenerationConfig& config,
                                                        std::span<const double> frequencies) {
  config.validate();
  const auto& cfg = model.config;
  if (frequencies.size() != cfg.vocab)
    throw ConfigError("generate: token frequencies cover " + std::to_string(frequencies.size()) +
                      " labels, model K*=" + std::to_string(cfg.vocab));
  Rng rng(config.seed);
  auto window = init_prompt(frequencies, cfg.L, cfg.channels, rng);
  std::vector<std::vector<std::uint16_t>> out(cfg.channels);
  gpt::Batch batch;
  batch.items = 1;
  batch.channels = cfg.channels;
  batch.length = cfg.L;
  batch.subjects = {config.subject_id};
  batch.tokens.resize(cfg.channels * cfg.L);
  std::vector<double> probs(cfg.vocab);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t c = 0; c < cfg.channels; ++c)
      std::copy(window[c].begin(), window[c].end(), batch.tokens.begin() + static_cast<std::ptrdiff_t>(c * cfg.L));
    const Tensor<float> logits = gpt::forward(model, batch).logits;
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      // Newest latent: predicts the token after the window.
      const float* row = logits.data() + (c * cfg.L_latent + cfg.L_latent - 1) * cfg.vocab;
      const float mx = *std::max_element(row, row + cfg.vocab);
      double z = 0;
      for (std::size_t k = 0; k < cfg.vocab; ++k) z += probs[k] = std::exp(static_cast<double>(row[k] - mx));
      for (double& p : probs) p /= z;
      const auto next = static_cast<int>(nucleus_sample(probs, config.top_p, rng));
      out[c].push_back(static_cast<std::uint16_t>(next));
      std::rotate(window[c].begin(), window[c].begin() + 1, window[c].end());
      window[c].back() = next;
    }
  }
  return out;
}

Generated generate(const gpt::GptModel& model, const GenerationConfig& config, const tokeniser::TokeniserModel& tok,
                   std::span<const double> frequencies, std::uint32_t fs) {
  if (tok.vocab_star != model.config.vocab)
    throw ConfigError("generate: tokeniser K*=" + std::to_string(tok.vocab_star) + " but model K*=" +
                      std::to_string(model.config.vocab));
  Generated g;
  g.tokens = generate_tokens(model, config, frequencies);
  g.signal = Recording(model.config.channels, config.steps, fs);
  g.signal.subject_id = config.subject_id;
  g.signal.session_id = "generated";
  for (std::size_t c = 0; c < g.tokens.size(); ++c) {
    const auto x = tokeniser::detokenise(g.tokens[c], tok);
    std::copy(x.begin(), x.end(), g.signal.channel(c).begin());
  }
  return g;
}

}  // namespace meg::sampler
