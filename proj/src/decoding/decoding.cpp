#include "meg/decoding.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <deque>
#include <map>
#include <set>

#include "meg/errors.hpp"

namespace meg::decoding {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Objective and gradient for parameters packed as [W (column-major); b].
double objective_grad(const MatrixXd& Z, const std::vector<int>& y, const VectorXd& theta, std::size_t k,
                      double lambda, VectorXd* grad) {
  const Eigen::Index f = Z.cols(), kk = static_cast<Eigen::Index>(k);
  const Eigen::Map<const MatrixXd> W(theta.data(), f, kk);
  const Eigen::Map<const VectorXd> b(theta.data() + f * kk, kk);
  MatrixXd logits = Z * W;
  logits.rowwise() += b.transpose();
  double value = 0.5 * lambda * W.squaredNorm();
  MatrixXd resid(logits.rows(), kk);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    value += std::log(z) + mx - logits(i, y[static_cast<std::size_t>(i)]);
    resid.row(i) = e / z;
    resid(i, y[static_cast<std::size_t>(i)]) -= 1.0;
  }
  if (grad) {
    grad->resize(theta.size());
    Eigen::Map<MatrixXd> gW(grad->data(), f, kk);
    gW = Z.transpose() * resid + lambda * W;
    grad->tail(kk) = resid.colwise().sum().transpose();
  }
  return value;
}

}  // namespace

Epochs epoch(const SignalSet& signals, const EventTable& events, std::size_t window) {
  if (window == 0) throw ParameterError("epoch: window must be positive");
  Epochs out;
  out.channels = signals.channels();
  out.window = window;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const Event& ev = events[e];
    if (ev.session < 0 || static_cast<std::size_t>(ev.session) >= signals.sessions.size())
      throw IndexError("epoch: event " + std::to_string(e) + " names session " + std::to_string(ev.session));
    const Recording& rec = signals.sessions[static_cast<std::size_t>(ev.session)];
    if (ev.onset + window > rec.samples) {
      ++out.dropped;
      continue;
    }
    for (std::size_t c = 0; c < rec.channels; ++c) {
      const auto ch = rec.channel(c);
      out.data.insert(out.data.end(), ch.begin() + static_cast<std::ptrdiff_t>(ev.onset),
                      ch.begin() + static_cast<std::ptrdiff_t>(ev.onset + window));
    }
    out.labels.push_back(ev.label);
    out.sessions.push_back(ev.session);
    out.subjects.push_back(ev.subject);
    out.events.push_back(e);
  }
  if (out.trials() == 0) throw InputError("epoch: no event has a complete window");
  return out;
}

TokenEpochs token_epochs(const TokenCorpus& corpus, const EventTable& events, std::size_t length) {
  if (length == 0) throw ParameterError("token_epochs: length must be positive");
  TokenEpochs out;
  out.batch.channels = corpus.channels();
  out.batch.length = length;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const Event& ev = events[e];
    if (ev.session < 0 || static_cast<std::size_t>(ev.session) >= corpus.sessions.size())
      throw IndexError("token_epochs: event " + std::to_string(e) + " names session " + std::to_string(ev.session));
    const TokenTrace& tr = corpus.sessions[static_cast<std::size_t>(ev.session)];
    if (ev.onset + length > tr.samples) {
      ++out.dropped;
      continue;
    }
    for (std::size_t c = 0; c < tr.channels; ++c) {
      const auto ch = tr.channel(c);
      for (std::size_t t = 0; t < length; ++t) out.batch.tokens.push_back(ch[ev.onset + t]);
    }
    out.batch.subjects.push_back(-1);
    ++out.batch.items;
    out.labels.push_back(ev.label);
    out.sessions.push_back(ev.session);
    out.subjects.push_back(ev.subject);
    out.events.push_back(e);
  }
  if (out.batch.items == 0) throw InputError("token_epochs: no event has a complete window");
  return out;
}

MatrixXd model_features(const gpt::GptModel& model, const TokenEpochs& epochs) {
  const Tensor<float> f = gpt::extract_features(model, epochs.batch);
  const auto rows = static_cast<Eigen::Index>(f.shape[0]), cols = static_cast<Eigen::Index>(f.shape[1]);
  MatrixXd X(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) X(i, j) = f.data()[i * cols + j];
  return X;
}

MatrixXd baseline_features(const Epochs& epochs) {
  const std::size_t f = epochs.channels * epochs.window;
  MatrixXd X(static_cast<Eigen::Index>(epochs.trials()), static_cast<Eigen::Index>(f));
  for (std::size_t i = 0; i < epochs.trials(); ++i)
    for (std::size_t j = 0; j < f; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = epochs.trial(i)[j];
  return X;
}

double objective(const MatrixXd& Z, const std::vector<int>& y, const MatrixXd& W, const VectorXd& b, double lambda) {
  VectorXd theta(W.size() + b.size());
  theta.head(W.size()) = Eigen::Map<const VectorXd>(W.data(), W.size());
  theta.tail(b.size()) = b;
  return objective_grad(Z, y, theta, static_cast<std::size_t>(b.size()), lambda, nullptr);
}

Classifier train_classifier(const MatrixXd& X, const std::vector<int>& y, double lambda, std::size_t max_iter,
                            double tol) {
  if (X.rows() != static_cast<Eigen::Index>(y.size())) throw DimensionError("train_classifier: one label per row required");
  if (X.rows() == 0) throw InputError("train_classifier: no trials");
  if (!X.allFinite()) throw InputError("train_classifier: non-finite features");
  if (!(lambda >= 0)) throw ParameterError("train_classifier: lambda must be non-negative");
  std::set<int> present(y.begin(), y.end());
  if (*present.begin() < 0) throw IndexError("train_classifier: negative label");
  if (present.size() < 2) throw InputError("train_classifier: at least two classes must be present");
  const auto k = static_cast<std::size_t>(*present.rbegin() + 1);

  Classifier clf;
  clf.lambda = lambda;
  const double n = static_cast<double>(X.rows());
  clf.mean = X.colwise().mean().transpose();
  clf.scale = ((X.rowwise() - clf.mean.transpose()).array().square().colwise().sum() / n).sqrt().transpose();
  for (auto& s : clf.scale) if (!(s > 0)) s = 1.0;
  const MatrixXd Z = standardise_with(clf, X);

  const Eigen::Index dim = Z.cols() * static_cast<Eigen::Index>(k) + static_cast<Eigen::Index>(k);
  VectorXd theta = VectorXd::Zero(dim), grad;
  double value = objective_grad(Z, y, theta, k, lambda, &grad);
  clf.objective.push_back(value);
  // Initial inverse Hessian: softmax curvature is at most n/2 per standardised
  // column, plus lambda on the weights.
  VectorXd h0 = VectorXd::Constant(dim, 1.0 / (lambda + 0.5 * n));
  h0.tail(static_cast<Eigen::Index>(k)).setConstant(1.0 / (0.5 * n));
  constexpr std::size_t memory = 10;
  std::deque<std::pair<VectorXd, VectorXd>> history;  // (s, y) pairs
  for (std::size_t it = 0; it < max_iter; ++it) {
    // Two-loop recursion for the L-BFGS direction.
    VectorXd q = grad;
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      const auto& [s, yy] = history[i];
      alpha[i] = s.dot(q) / yy.dot(s);
      q -= alpha[i] * yy;
    }
    q.array() *= h0.array();
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& [s, yy] = history[i];
      const double beta = yy.dot(q) / yy.dot(s);
      q += (alpha[i] - beta) * s;
    }
    VectorXd dir = -q;
    double slope = grad.dot(dir);
    if (!(slope < 0)) {
      dir = -grad;
      slope = -grad.squaredNorm();
      history.clear();
    }
    double step = 1.0, next_value = 0;
    VectorXd next, next_grad;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      next = theta + step * dir;
      next_value = objective_grad(Z, y, next, k, lambda, &next_grad);
      if (next_value <= value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      clf.converged = true;
      break;
    }
    const VectorXd s = next - theta, yy = next_grad - grad;
    if (s.dot(yy) > 1e-12) {
      history.emplace_back(s, yy);
      if (history.size() > memory) history.pop_front();
    }
    const double drop = value - next_value;
    theta = std::move(next);
    grad = std::move(next_grad);
    value = next_value;
    clf.objective.push_back(value);
    if (drop <= tol * std::max(1.0, std::abs(value)) || grad.norm() <= tol) {
      clf.converged = true;
      break;
    }
  }
  const Eigen::Index f = Z.cols(), kk = static_cast<Eigen::Index>(k);
  clf.weights = Eigen::Map<const MatrixXd>(theta.data(), f, kk);
  clf.bias = theta.tail(kk);
  return clf;
}

MatrixXd standardise_with(const Classifier& clf, const MatrixXd& X) {
  if (X.cols() != clf.mean.size())
    throw DimensionError("classifier expects " + std::to_string(clf.mean.size()) + " features, got " +
                         std::to_string(X.cols()));
  return (X.rowwise() - clf.mean.transpose()).array().rowwise() / clf.scale.transpose().array();
}

std::vector<int> predict(const Classifier& clf, const MatrixXd& X) {
  MatrixXd logits = standardise_with(clf, X) * clf.weights;
  logits.rowwise() += clf.bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index k;
    logits.row(i).maxCoeff(&k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return out;
}

Evaluation evaluate(const Classifier& clf, const MatrixXd& X, const std::vector<int>& y, const std::vector<int>& sessions) {
  if (X.rows() != static_cast<Eigen::Index>(y.size()) || sessions.size() != y.size())
    throw DimensionError("evaluate: labels and sessions must match the feature rows");
  if (y.empty()) throw InputError("evaluate: no trials");
  const auto pred = predict(clf, X);
  std::size_t k = std::max<std::size_t>(clf.classes(), 4);
  for (int l : y) k = std::max(k, static_cast<std::size_t>(l) + 1);
  Evaluation ev;
  ev.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::map<int, std::pair<std::size_t, std::size_t>> per;  // session -> (correct, total)
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ++ev.confusion[static_cast<std::size_t>(y[i])][static_cast<std::size_t>(pred[i])];
    const bool hit = pred[i] == y[i];
    correct += hit;
    per[sessions[i]].first += hit;
    ++per[sessions[i]].second;
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(y.size());
  double sum = 0, sq = 0;
  for (const auto& [s, ct] : per) {
    const double a = static_cast<double>(ct.first) / static_cast<double>(ct.second);
    ev.per_session.push_back({s, ct.second, a});
    sum += a;
    sq += a * a;
  }
  const double m = static_cast<double>(per.size());
  ev.session_mean = sum / m;
  ev.ci_low = ev.ci_high = ev.session_mean;
  if (per.size() > 1) {
    const double var = std::max(0.0, (sq - m * ev.session_mean * ev.session_mean) / (m - 1));
    const boost::math::students_t t(m - 1);
    const double half = boost::math::quantile(t, 0.975) * std::sqrt(var / m);
    ev.ci_low = ev.session_mean - half;
    ev.ci_high = ev.session_mean + half;
  }
  return ev;
}

Split split_protocol(const std::vector<int>& trial_subjects, const std::vector<int>& trial_sessions, SplitMode mode,
                     int held_out_subject) {
  if (trial_subjects.size() != trial_sessions.size()) throw DimensionError("split_protocol: subjects and sessions differ in length");
  std::map<int, std::set<int>> sessions_of;
  for (std::size_t i = 0; i < trial_subjects.size(); ++i) sessions_of[trial_subjects[i]].insert(trial_sessions[i]);
  if (!sessions_of.count(held_out_subject))
    throw ConfigError("split_protocol: held-out subject " + std::to_string(held_out_subject) + " has no trials");
  if (sessions_of.size() < 2) throw ConfigError("split_protocol: at least two subjects required");
  std::map<int, int> last_session;
  for (const auto& [subject, sessions] : sessions_of) {
    if (subject == held_out_subject) continue;
    if (sessions.size() < 2)
      throw ConfigError("split_protocol: subject " + std::to_string(subject) + " needs at least two sessions");
    last_session[subject] = *sessions.rbegin();
  }
  Split split;
  for (std::size_t i = 0; i < trial_subjects.size(); ++i) {
    const int subject = trial_subjects[i];
    if (subject == held_out_subject) {
      (mode == SplitMode::new_subject ? split.test : split.unused).push_back(i);
    } else if (trial_sessions[i] == last_session[subject]) {
      (mode == SplitMode::within_subject ? split.test : split.unused).push_back(i);
    } else {
      split.train.push_back(i);
    }
  }
  return split;
}

SplitMode parse_mode(const std::string& name) {
  if (name == "within" || name == "within-subject" || name == "within_subject") return SplitMode::within_subject;
  if (name == "new" || name == "new-subject" || name == "new_subject") return SplitMode::new_subject;
  throw ConfigError("unknown split mode '" + name + "'");
}

}  // namespace meg::decoding
