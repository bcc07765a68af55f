#pragma once

#include <Eigen/Dense>
#include <optional>
#include <span>
#include <vector>

#include "meg/analysis.hpp"
#include "meg/rng.hpp"

namespace meg::bursts {

// Row r holds x[r + offset + lag_j] in column j, where offset = -min(lags).
struct TdeData {
  Eigen::MatrixXd data;
  std::vector<int> lags;
  int channel = 0;
  std::size_t offset = 0;  // source time of row 0 at lag 0
};

TdeData tde_embed(std::span<const float> series, const std::vector<int>& lags, int channel = 0);
std::vector<int> symmetric_lags(int max_lag);

struct HmmModel {
  std::size_t states = 0;
  Eigen::VectorXd initial;
  Eigen::MatrixXd transition;  // rows sum to 1
  std::vector<Eigen::MatrixXd> covariances;
};

struct HmmFit {
  HmmModel model;
  std::vector<double> log_likelihood;  // one entry per EM iteration, before its M-step
  std::size_t iterations = 0;
  std::size_t regularised = 0;  // covariance repairs (diagonal jitter)
  bool converged = false;
};

// Baum-Welch with zero-mean full-covariance Gaussian emissions. Starts from
// an energy-quantile partition of the frames, jittered by rng. Stops when the
// relative log-likelihood gain drops below tol or after n_iter iterations.
HmmFit hmm_fit(const TdeData& data, std::size_t states, std::size_t n_iter, double tol, Rng& rng);

struct StateTimecourse {
  Eigen::MatrixXd probs;    // [frames, states] posterior
  std::vector<int> path;    // per-frame argmax of probs
  std::vector<int> viterbi; // jointly most probable state sequence
  double log_likelihood = 0;
};

StateTimecourse infer_states(const HmmModel& model, const TdeData& data);

// Total log-likelihood of the data under the model.
double log_likelihood(const HmmModel& model, const TdeData& data);

// Minimum-cost assignment; result[i] is the column matched to row i.
std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost);

// perm[i] = state of the new run matched to reference state i, minimising
// the summed (1 - correlation) of flattened upper-triangular covariances.
std::vector<std::size_t> match_states(const std::vector<Eigen::MatrixXd>& ref, const std::vector<Eigen::MatrixXd>& next);
double covariance_dissimilarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Reorders a model's states by perm (state i of the result = state perm[i]).
HmmModel permute_states(const HmmModel& model, const std::vector<std::size_t>& perm);

struct StateStats {
  std::size_t activations = 0;
  double rate_hz = 0;                    // activations per second
  std::optional<double> mean_interval_s; // from leaving to re-entering
  std::optional<double> mean_lifetime_s; // from entering to leaving
};

std::vector<StateStats> burst_stats(std::span<const int> path, std::size_t states, double fs);

// Welch PSD per state over maximal same-state runs at least one window long;
// nullopt for states without such a run.
std::vector<std::optional<analysis::Psd>> state_psd(std::span<const float> signal, std::span<const int> path,
                                                    std::size_t path_offset, std::size_t states, double fs,
                                                    double window_s = 2.0, double overlap = 0.5);

}  // namespace meg::bursts
