#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meg/config.hpp"
#include "meg/params.hpp"
#include "meg/rng.hpp"
#include "meg/signal.hpp"

namespace meg::tokeniser {

struct TokeniserConfig {
  std::size_t vocab = 128;  // K
  std::size_t d_token = 10;
  std::size_t units = 128;  // GRU width
  std::size_t seq_len = 200;
  std::size_t batch = 32;
  std::size_t epochs = 10;
  double lr = 1e-5;
  double temperature = 0.1;
  // Optimiser steps per epoch; 0 means one pass over the corpus in
  // non-overlapping windows.
  std::size_t steps_per_epoch = 0;
  double clip_norm = 0;  // 0 disables gradient clipping

  void validate() const;
};

// Hyperparameters of the original full-scale run.
TokeniserConfig full_config();
// Single-core desk-scale run on the synthetic corpus.
TokeniserConfig desk_config();
// Overrides from keys tokeniser.* (see README).
TokeniserConfig config_from(const Config& cfg, TokeniserConfig base);
const std::vector<std::string>& config_keys();

// kappa(epoch) falls linearly from 1 at the first epoch to 0 at the last.
struct AnnealSchedule {
  std::size_t epochs = 10;
  double temperature = 0.1;
  double kappa(std::size_t epoch) const;
};

struct TokeniserModel {
  TokeniserConfig config;
  // gru.wx [1,3u], gru.wh [u,3u], gru.b [3u], head.w [u,K], head.b [K],
  // norm.gain [K], norm.bias [K], kernels [K,d], taps [d]
  ParamSet<float> params;
  // Original label -> refactored label; empty until refactorised.
  std::vector<std::uint16_t> refactor;
  std::uint16_t vocab_star = 0;  // K*

  std::size_t vocab() const { return config.vocab; }
  bool refactorised() const { return !refactor.empty(); }
};

TokeniserModel init_model(const TokeniserConfig& cfg, Rng& rng);

struct Encoding {
  Tensor<float> logits;     // [T, K]
  std::vector<int> labels;  // original labels, argmax of logits
};

// Encodes one standardised channel. Windows of seq_len are encoded
// independently (the GRU state restarts at each window), as in training.
Encoding encode(std::span<const float> signal, const TokeniserModel& model);

// (1 - kappa) * onehot(argmax) + kappa * softmax(logits / temperature), row-wise.
template <class Real>
Tensor<Real> anneal_assign(const Tensor<Real>& logits, double kappa, double temperature);

// x~[t] = sum_j weights[j] * <assignment[t + j - d/2], kernels[:, j]>, zero padded.
template <class Real>
std::vector<Real> decode(const Tensor<Real>& assignment, const Tensor<Real>& kernels, const Tensor<Real>& weights);

// Differentiable reconstruction loss of a batch x [B, T]. Used for training
// (float) and gradient checks (double).
template <class Real>
Var reconstruction_loss(Tape<Real>& tape, const Bound<Real>& p, const Tensor<Real>& x, double kappa,
                        double temperature);

struct EpochLog {
  std::size_t epoch = 0;
  double kappa = 0;
  double loss = 0;  // mean training MSE over the epoch
};

// Trains on random seq_len windows drawn from every session and channel, then
// refactorises on the training corpus.
TokeniserModel train_tokeniser(const SignalSet& corpus, const TokeniserConfig& cfg, const AnnealSchedule& schedule,
                               Rng& rng, std::vector<EpochLog>* log = nullptr,
                               const std::function<void(const EpochLog&)>& on_epoch = {});

struct Refactor {
  std::vector<std::uint16_t> map;  // original label -> new label
  std::uint16_t vocab_star = 0;
};

// Used labels get 1.. in descending count (ties: lower original label first);
// unused labels map to 0.
Refactor refactorise(const std::vector<std::size_t>& counts);
Refactor refactorise(const std::vector<std::vector<int>>& label_sequences, std::size_t vocab);

// Refactorises the model on the given corpus.
void refactorise_model(TokeniserModel& model, const SignalSet& corpus);

TokenCorpus tokenise(const SignalSet& signals, const TokeniserModel& model);
// Refactored labels back to a continuous signal; label 0 decodes to zero.
std::vector<float> detokenise(std::span<const std::uint16_t> labels, const TokeniserModel& model);
SignalSet detokenise(const TokenCorpus& tokens, const TokeniserModel& model, std::uint32_t fs);

// 100 * (1 - sum (x - x~)^2 / sum x^2); nullopt when x is all zero.
std::optional<double> pve(std::span<const float> original, std::span<const float> reconstruction);
std::optional<double> pve(const SignalSet& original, const SignalSet& reconstruction);

void save_model(const std::filesystem::path& path, const TokeniserModel& model);
TokeniserModel load_model(const std::filesystem::path& path);

}  // namespace meg::tokeniser
