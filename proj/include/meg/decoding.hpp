#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "meg/gpt.hpp"
#include "meg/signal.hpp"

namespace meg::decoding {

struct Epochs {
  std::size_t channels = 0;
  std::size_t window = 0;
  std::vector<float> data;  // [trial][channel][sample]
  std::vector<int> labels;
  std::vector<int> sessions;
  std::vector<int> subjects;
  std::vector<std::size_t> events;  // index into the source event table
  std::size_t dropped = 0;          // events whose window left the session

  std::size_t trials() const { return labels.size(); }
  const float* trial(std::size_t i) const { return data.data() + i * channels * window; }
};

// Windows of `window` samples starting at each event onset.
Epochs epoch(const SignalSet& signals, const EventTable& events, std::size_t window);

struct TokenEpochs {
  gpt::Batch batch;  // one item per kept event, subject ids set to -1
  std::vector<int> labels;
  std::vector<int> sessions;
  std::vector<int> subjects;
  std::vector<std::size_t> events;
  std::size_t dropped = 0;
};

// Token windows of `length` labels starting at each event onset.
TokenEpochs token_epochs(const TokenCorpus& corpus, const EventTable& events, std::size_t length);

// Features from one forward pass per trial, [trials, C*d] as a double matrix.
Eigen::MatrixXd model_features(const gpt::GptModel& model, const TokenEpochs& epochs);

// One row per trial, channel-major flattening.
Eigen::MatrixXd baseline_features(const Epochs& epochs);

struct Classifier {
  Eigen::MatrixXd weights;  // [features, classes]
  Eigen::VectorXd bias;
  double lambda = 1.0;
  Eigen::VectorXd mean;  // training-set feature statistics
  Eigen::VectorXd scale;
  std::vector<double> objective;  // per iteration, non-increasing
  bool converged = false;

  std::size_t classes() const { return static_cast<std::size_t>(bias.size()); }
};

// Multinomial logistic regression on standardised features minimising
// sum cross-entropy + (lambda / 2) * ||W||^2 (bias unpenalised) by L-BFGS
// with Armijo backtracking. classes = max(y) + 1.
Classifier train_classifier(const Eigen::MatrixXd& X, const std::vector<int>& y, double lambda = 1.0,
                            std::size_t max_iter = 500, double tol = 1e-8);

// Objective of the given parameters on standardised features.
double objective(const Eigen::MatrixXd& Z, const std::vector<int>& y, const Eigen::MatrixXd& W,
                 const Eigen::VectorXd& b, double lambda);

Eigen::MatrixXd standardise_with(const Classifier& clf, const Eigen::MatrixXd& X);
std::vector<int> predict(const Classifier& clf, const Eigen::MatrixXd& X);

struct SessionScore {
  int session = 0;
  std::size_t trials = 0;
  double accuracy = 0;
};

struct Evaluation {
  double accuracy = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<SessionScore> per_session;
  double session_mean = 0;  // mean of per-session accuracies
  double ci_low = 0, ci_high = 0;  // 95% t-interval over session means
};

Evaluation evaluate(const Classifier& clf, const Eigen::MatrixXd& X, const std::vector<int>& y,
                    const std::vector<int>& sessions);

enum class SplitMode { within_subject, new_subject };

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> unused;  // trials in neither set under this mode
};

// Training set: every session but the last of each subject other than
// held_out_subject. Test set: those last sessions (within_subject) or all
// sessions of held_out_subject (new_subject). Sessions are ordered by their
// index in the signal set.
Split split_protocol(const std::vector<int>& trial_subjects, const std::vector<int>& trial_sessions, SplitMode mode,
                     int held_out_subject);

SplitMode parse_mode(const std::string& name);

}  // namespace meg::decoding
