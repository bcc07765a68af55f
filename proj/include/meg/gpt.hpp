#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "meg/config.hpp"
#include "meg/params.hpp"
#include "meg/rng.hpp"
#include "meg/signal.hpp"

namespace meg::gpt {

struct GptConfig {
  std::size_t vocab = 0;     // K*
  std::size_t channels = 0;  // C
  std::size_t subjects = 0;  // N; 0 = no subject table
  std::size_t d_z = 400, d_c = 400, d_p = 400, d_s = 400;
  std::size_t d = 400;
  std::size_t L = 80;
  std::size_t L_p = 4;
  std::size_t L_u = 16;
  std::size_t L_latent = 40;
  std::size_t L_loss = 8;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t ff = 400;
  double leaky_slope = 0.2;
  double dropout = 0.2;
  // Training
  std::size_t batch = 8;
  std::size_t epochs = 60;
  double lr = 1e-5;
  std::size_t steps_per_epoch = 0;  // 0 = every training window once
  double val_fraction = 0.1;        // tail of each session held out for validation
  double clip_norm = 0;

  std::size_t patches() const { return L / L_p; }
  void validate() const;
};

GptConfig full_config();
// d=32, 2 layers, 2 heads, L=40.
GptConfig desk_config();
GptConfig config_from(const Config& cfg, GptConfig base);
const std::vector<std::string>& config_keys();

struct GptModel {
  GptConfig config;
  ParamSet<float> params;
  bool has_subjects() const { return params.contains("emb.subject"); }
};

GptModel init_model(const GptConfig& cfg, Rng& rng);

// Allowed keys per latent query (row-major L_latent x (P + L_u), 1 = allowed).
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;
  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

// Latent query i sits at window time q_i = L - L_latent + i and predicts
// time q_i + 1. It may attend patch j iff j*L_p + L_p - 1 <= q_i - 1 and
// unpatched slot m iff L - L_u + m <= q_i - 1.
AttentionMask build_mask(std::size_t P, std::size_t L_p, std::size_t L_u, std::size_t L_latent);
// Lower-triangular mask among latents for layers after the first.
AttentionMask causal_mask(std::size_t n);

// Token windows for a batch of items; tokens are [item][channel][time] and
// each item carries a subject id (-1 = no subject term).
struct Batch {
  std::size_t items = 0;
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<int> subjects;

  int token(std::size_t item, std::size_t c, std::size_t t) const {
    return tokens[(item * channels + c) * length + t];
  }
};

template <class Real>
struct Graph {
  Var embeddings;  // [items*C, L, d]
  Var decoder;     // [items*C, L_latent, d]
  Var logits;      // [items*C, L_latent, K*]
};

// v = sum of the four (projected) embeddings, [items*C, L, d].
template <class Real>
Var embed_inputs(Tape<Real>& tape, const Bound<Real>& p, const GptConfig& cfg, const Batch& batch);

// Non-overlapping windows of L_p embeddings through one shared dense map.
template <class Real>
Var patch(Tape<Real>& tape, Var v, std::size_t L_p, Var w, Var b);

template <class Real>
Graph<Real> forward_graph(Tape<Real>& tape, const Bound<Real>& p, const GptConfig& cfg, const Batch& batch,
                          bool training, Rng* rng);

// Mean cross-entropy over the last L_loss latent positions. targets holds
// L_latent labels per sequence (only the last L_loss are read).
template <class Real>
Var sequence_loss(Tape<Real>& tape, Var logits, std::span<const int> targets, std::size_t L_loss);

// Inference forward pass (dropout off). Logits [items*C, L_latent, K*].
struct Output {
  Tensor<float> decoder;
  Tensor<float> logits;
};
Output forward(const GptModel& model, const Batch& batch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0, train_accuracy = 0;
  double val_loss = 0, val_accuracy = 0;
};
std::string metrics_line(const EpochMetrics& m);

// Windows of L + 1 tokens per session, every L_loss samples. Subject ids
// come from the sessions (or -1 when the model has no subject table).
struct Window {
  std::size_t session = 0;
  std::size_t start = 0;
};

struct TrainResult {
  GptModel model;
  std::vector<EpochMetrics> history;
};

// Adam over shuffled windows. Targets of latent i are the tokens one step
// after its query time.
TrainResult train_gpt(const TokenCorpus& corpus, const GptConfig& cfg, Rng& rng,
                      const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct FineTuneConfig {
  std::size_t batch = 16;
  std::size_t epochs = 10;
  double lr = 5e-7;
  std::size_t steps_per_epoch = 0;
  double val_fraction = 0.1;
  // Size of a fresh subject table for the new data; 0 drops the subject term.
  std::size_t new_subjects = 0;
};
FineTuneConfig fine_tune_config_from(const Config& cfg, FineTuneConfig base);

// Token, channel and position tables (and their projections) stay frozen;
// the pre-training subject table is discarded.
TrainResult fine_tune(const GptModel& model, const TokenCorpus& corpus, const FineTuneConfig& ft, Rng& rng,
                      const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Decoder output averaged over latent time: [trials, C*d], channel-major.
Tensor<float> extract_features(const GptModel& model, const Batch& trials);

// Next-token accuracy and loss on all windows of a corpus.
EpochMetrics evaluate_corpus(const GptModel& model, const TokenCorpus& corpus);

void save_model(const std::filesystem::path& path, const GptModel& model);
GptModel load_model(const std::filesystem::path& path);

}  // namespace meg::gpt
