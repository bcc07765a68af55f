#include "meg/bursts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "meg/errors.hpp"

namespace meg::bursts {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLog2Pi = 1.8378770664093453;

struct Emission {
  Eigen::LLT<MatrixXd> llt;
  double log_norm = 0;
};

// Cholesky of each covariance, adding diagonal jitter until it succeeds.
std::vector<Emission> factorise(std::vector<MatrixXd>& covs, std::size_t* repairs) {
  std::vector<Emission> out(covs.size());
  for (std::size_t s = 0; s < covs.size(); ++s) {
    MatrixXd& c = covs[s];
    c = 0.5 * (c + c.transpose());
    const double base = std::max(c.trace() / static_cast<double>(c.rows()), 1e-12);
    double jitter = 0;
    for (int attempt = 0;; ++attempt) {
      out[s].llt.compute(c);
      bool ok = out[s].llt.info() == Eigen::Success;
      if (ok) {
        const VectorXd d = out[s].llt.matrixL().toDenseMatrix().diagonal();
        ok = (d.array() > 1e-9 * std::sqrt(base)).all();
      }
      if (ok) break;
      if (attempt > 40) throw NumericError("hmm: covariance of state " + std::to_string(s) + " cannot be repaired");
      jitter = jitter == 0 ? 1e-6 * base : jitter * 10;
      c.diagonal().array() += jitter;
      if (repairs) ++*repairs;
    }
    const VectorXd d = out[s].llt.matrixL().toDenseMatrix().diagonal();
    out[s].log_norm = -0.5 * (static_cast<double>(c.rows()) * kLog2Pi) - d.array().log().sum();
  }
  return out;
}

// log N(x_t | 0, cov_s) for every frame and state, [frames, states].
MatrixXd log_emissions(const MatrixXd& x, const std::vector<Emission>& em) {
  MatrixXd out(x.rows(), static_cast<Eigen::Index>(em.size()));
  for (std::size_t s = 0; s < em.size(); ++s) {
    // Solve L y = x^T for all frames at once.
    MatrixXd y = em[s].llt.matrixL().solve(x.transpose());
    out.col(static_cast<Eigen::Index>(s)) = em[s].log_norm - 0.5 * y.colwise().squaredNorm().transpose().array();
  }
  return out;
}

struct ForwardBackward {
  MatrixXd gamma;       // [frames, states]
  MatrixXd xi;          // summed pairwise posteriors [states, states]
  double loglik = 0;
};

ForwardBackward forward_backward(const HmmModel& m, const MatrixXd& logb) {
  const Eigen::Index n = logb.rows(), s = logb.cols();
  // Scaled emissions b = exp(logb - rowmax) keep alpha/beta in range.
  VectorXd rowmax = logb.rowwise().maxCoeff();
  MatrixXd b = (logb.colwise() - rowmax).array().exp();
  MatrixXd alpha(n, s), beta(n, s);
  VectorXd c(n);
  alpha.row(0) = m.initial.transpose().cwiseProduct(b.row(0));
  c(0) = alpha.row(0).sum();
  alpha.row(0) /= c(0);
  for (Eigen::Index t = 1; t < n; ++t) {
    alpha.row(t) = (alpha.row(t - 1) * m.transition).cwiseProduct(b.row(t));
    c(t) = alpha.row(t).sum();
    if (!(c(t) > 0)) throw NumericError("hmm: zero likelihood at frame " + std::to_string(t));
    alpha.row(t) /= c(t);
  }
  beta.row(n - 1).setOnes();
  for (Eigen::Index t = n - 1; t > 0; --t)
    beta.row(t - 1) = (m.transition * (b.row(t).cwiseProduct(beta.row(t))).transpose()).transpose() / c(t);
  ForwardBackward fb;
  fb.gamma = alpha.cwiseProduct(beta);
  for (Eigen::Index t = 0; t < n; ++t) fb.gamma.row(t) /= fb.gamma.row(t).sum();
  fb.xi = MatrixXd::Zero(s, s);
  for (Eigen::Index t = 1; t < n; ++t) {
    const Eigen::RowVectorXd bb = b.row(t).cwiseProduct(beta.row(t));
    fb.xi.noalias() += (alpha.row(t - 1).transpose() * bb).cwiseProduct(m.transition) / c(t);
  }
  fb.loglik = c.array().log().sum() + rowmax.sum();
  return fb;
}

void check_model(const HmmModel& m, const TdeData& data) {
  if (m.states == 0 || m.covariances.size() != m.states) throw DimensionError("hmm: model has no states");
  for (const auto& c : m.covariances)
    if (c.rows() != data.data.cols()) throw DimensionError("hmm: model and data differ in embedding dimension");
  if (data.data.rows() == 0) throw InputError("hmm: no frames");
}

std::vector<double> flat_upper(const MatrixXd& m) {
  std::vector<double> v;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = i; j < m.cols(); ++j) v.push_back(m(i, j));
  return v;
}

}  // namespace

std::vector<int> symmetric_lags(int max_lag) {
  std::vector<int> lags;
  for (int l = -max_lag; l <= max_lag; ++l) lags.push_back(l);
  return lags;
}

TdeData tde_embed(std::span<const float> series, const std::vector<int>& lags, int channel) {
  if (lags.empty()) throw ParameterError("tde_embed: empty lag set");
  const int lo = *std::min_element(lags.begin(), lags.end());
  const int hi = *std::max_element(lags.begin(), lags.end());
  const auto span = static_cast<std::size_t>(hi - lo);
  if (span >= series.size())
    throw InputError("tde_embed: lag span " + std::to_string(span) + " not shorter than series of " +
                     std::to_string(series.size()));
  TdeData out;
  out.lags = lags;
  out.channel = channel;
  out.offset = static_cast<std::size_t>(-lo);
  const std::size_t frames = series.size() - span;
  out.data.resize(static_cast<Eigen::Index>(frames), static_cast<Eigen::Index>(lags.size()));
  for (std::size_t j = 0; j < lags.size(); ++j) {
    const auto shift = static_cast<std::size_t>(lags[j] - lo);
    for (std::size_t r = 0; r < frames; ++r)
      out.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = series[r + shift];
  }
  return out;
}

HmmFit hmm_fit(const TdeData& data, std::size_t states, std::size_t n_iter, double tol, Rng& rng) {
  if (states == 0) throw ParameterError("hmm_fit: at least one state required");
  const MatrixXd& x = data.data;
  const Eigen::Index n = x.rows(), e = x.cols();
  if (n < static_cast<Eigen::Index>(states) * (e + 1)) throw InputError("hmm_fit: too few frames for the model");
  const auto s = static_cast<Eigen::Index>(states);

  // Initial responsibilities from energy quantiles, softened by random noise.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const VectorXd energy = x.rowwise().squaredNorm();
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return energy(a) < energy(b); });
  MatrixXd gamma = MatrixXd::Zero(n, s);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto k = static_cast<Eigen::Index>(r * states / order.size());
    for (Eigen::Index j = 0; j < s; ++j) gamma(order[r], j) = (j == k ? 1.0 : 0.0) + 0.05 * uniform01(rng);
    gamma.row(order[r]) /= gamma.row(order[r]).sum();
  }

  HmmFit fit;
  HmmModel& m = fit.model;
  m.states = states;
  m.initial = VectorXd::Constant(s, 1.0 / static_cast<double>(s));
  m.transition = MatrixXd::Constant(s, s, states == 1 ? 1.0 : 0.05 / static_cast<double>(s - 1));
  if (states > 1) m.transition.diagonal().setConstant(0.95);
  m.covariances.assign(states, MatrixXd::Zero(e, e));
  auto m_step_covariances = [&](const MatrixXd& g) {
    for (Eigen::Index j = 0; j < s; ++j) {
      const double w = g.col(j).sum();
      MatrixXd weighted = x.array().colwise() * g.col(j).array();
      m.covariances[static_cast<std::size_t>(j)] = (x.transpose() * weighted) / std::max(w, 1e-300);
    }
  };
  m_step_covariances(gamma);

  for (std::size_t it = 0; it < n_iter; ++it) {
    auto em = factorise(m.covariances, &fit.regularised);
    const ForwardBackward fb = forward_backward(m, log_emissions(x, em));
    fit.log_likelihood.push_back(fb.loglik);
    fit.iterations = it + 1;
    if (it > 0) {
      const double prev = fit.log_likelihood[it - 1];
      if (fb.loglik - prev < tol * std::abs(prev)) {
        fit.converged = true;
        break;
      }
    }
    m.initial = fb.gamma.row(0).transpose();
    for (Eigen::Index i = 0; i < s; ++i) {
      const double row = fb.xi.row(i).sum();
      if (row > 0) m.transition.row(i) = fb.xi.row(i) / row;
    }
    m_step_covariances(fb.gamma);
  }
  factorise(m.covariances, &fit.regularised);
  return fit;
}

double log_likelihood(const HmmModel& model, const TdeData& data) {
  check_model(model, data);
  auto covs = model.covariances;
  return forward_backward(model, log_emissions(data.data, factorise(covs, nullptr))).loglik;
}

StateTimecourse infer_states(const HmmModel& model, const TdeData& data) {
  check_model(model, data);
  auto covs = model.covariances;
  const MatrixXd logb = log_emissions(data.data, factorise(covs, nullptr));
  const ForwardBackward fb = forward_backward(model, logb);
  StateTimecourse tc;
  tc.probs = fb.gamma;
  tc.log_likelihood = fb.loglik;
  const Eigen::Index n = logb.rows(), s = logb.cols();
  tc.path.resize(static_cast<std::size_t>(n));
  for (Eigen::Index t = 0; t < n; ++t) {
    Eigen::Index k;
    fb.gamma.row(t).maxCoeff(&k);
    tc.path[static_cast<std::size_t>(t)] = static_cast<int>(k);
  }
  // Viterbi in log space.
  const MatrixXd logA = model.transition.array().log();
  const VectorXd logpi = model.initial.array().log();
  MatrixXd delta(n, s);
  Eigen::MatrixXi back(n, s);
  delta.row(0) = logpi.transpose() + logb.row(0);
  for (Eigen::Index t = 1; t < n; ++t)
    for (Eigen::Index j = 0; j < s; ++j) {
      Eigen::Index best;
      const double v = (delta.row(t - 1).transpose() + logA.col(j)).maxCoeff(&best);
      delta(t, j) = v + logb(t, j);
      back(t, j) = static_cast<int>(best);
    }
  tc.viterbi.resize(static_cast<std::size_t>(n));
  Eigen::Index k;
  delta.row(n - 1).maxCoeff(&k);
  for (Eigen::Index t = n - 1; t >= 0; --t) {
    tc.viterbi[static_cast<std::size_t>(t)] = static_cast<int>(k);
    if (t > 0) k = back(t, k);
  }
  return tc;
}

std::vector<std::size_t> hungarian(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost)
    if (row.size() != n) throw DimensionError("hungarian: cost matrix must be square");
  // Potentials method, 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j]) assignment[p[j] - 1] = j - 1;
  return assignment;
}

double covariance_dissimilarity(const MatrixXd& a, const MatrixXd& b) {
  return analysis::correlation_distance(flat_upper(a), flat_upper(b));
}

std::vector<std::size_t> match_states(const std::vector<MatrixXd>& ref, const std::vector<MatrixXd>& next) {
  if (ref.size() != next.size()) throw DimensionError("match_states: state counts differ");
  std::vector<std::vector<double>> cost(ref.size(), std::vector<double>(ref.size()));
  for (std::size_t i = 0; i < ref.size(); ++i)
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (ref[i].rows() != next[j].rows()) throw DimensionError("match_states: embedding dimensions differ");
      cost[i][j] = covariance_dissimilarity(ref[i], next[j]);
    }
  return hungarian(cost);
}

HmmModel permute_states(const HmmModel& model, const std::vector<std::size_t>& perm) {
  HmmModel out = model;
  const auto s = static_cast<Eigen::Index>(model.states);
  for (Eigen::Index i = 0; i < s; ++i) {
    const auto pi = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
    out.initial(i) = model.initial(pi);
    out.covariances[static_cast<std::size_t>(i)] = model.covariances[static_cast<std::size_t>(pi)];
    for (Eigen::Index j = 0; j < s; ++j)
      out.transition(i, j) = model.transition(pi, static_cast<Eigen::Index>(perm[static_cast<std::size_t>(j)]));
  }
  return out;
}

std::vector<StateStats> burst_stats(std::span<const int> path, std::size_t states, double fs) {
  if (!(fs > 0)) throw ParameterError("burst_stats: fs must be positive");
  std::vector<StateStats> out(states);
  if (path.empty()) return out;
  std::vector<double> life_sum(states, 0), gap_sum(states, 0);
  std::vector<std::size_t> gaps(states, 0);
  std::vector<std::ptrdiff_t> last_exit(states, -1);
  std::size_t start = 0;
  for (std::size_t t = 1; t <= path.size(); ++t) {
    if (t < path.size() && path[t] == path[start]) continue;
    const int st = path[start];
    if (st < 0 || static_cast<std::size_t>(st) >= states) throw IndexError("burst_stats: state out of range");
    const auto k = static_cast<std::size_t>(st);
    ++out[k].activations;
    life_sum[k] += static_cast<double>(t - start);
    if (last_exit[k] >= 0) {
      gap_sum[k] += static_cast<double>(static_cast<std::ptrdiff_t>(start) - last_exit[k]);
      ++gaps[k];
    }
    last_exit[k] = static_cast<std::ptrdiff_t>(t);
    start = t;
  }
  const double duration = static_cast<double>(path.size()) / fs;
  for (std::size_t k = 0; k < states; ++k) {
    out[k].rate_hz = static_cast<double>(out[k].activations) / duration;
    if (out[k].activations > 0) out[k].mean_lifetime_s = life_sum[k] / static_cast<double>(out[k].activations) / fs;
    if (gaps[k] > 0) out[k].mean_interval_s = gap_sum[k] / static_cast<double>(gaps[k]) / fs;
  }
  return out;
}

std::vector<std::optional<analysis::Psd>> state_psd(std::span<const float> signal, std::span<const int> path,
                                                    std::size_t path_offset, std::size_t states, double fs,
                                                    double window_s, double overlap) {
  if (path_offset + path.size() > signal.size()) throw DimensionError("state_psd: path exceeds signal");
  const auto window = static_cast<std::size_t>(std::llround(window_s * fs));
  std::vector<std::optional<analysis::Psd>> out(states);
  std::size_t start = 0;
  for (std::size_t t = 1; t <= path.size(); ++t) {
    if (t < path.size() && path[t] == path[start]) continue;
    const auto k = static_cast<std::size_t>(path[start]);
    if (k >= states) throw IndexError("state_psd: state out of range");
    if (t - start >= window) {
      const auto run = signal.subspan(path_offset + start, t - start);
      analysis::Psd psd = analysis::welch_psd(run, fs, window_s, overlap);
      if (!out[k]) {
        out[k] = std::move(psd);
      } else {
        auto& acc = *out[k];
        const double a = static_cast<double>(acc.segments), b = static_cast<double>(psd.segments);
        for (std::size_t f = 0; f < acc.freqs.size(); ++f)
          acc.power[0][f] = (acc.power[0][f] * a + psd.power[0][f] * b) / (a + b);
        acc.segments += psd.segments;
      }
    }
    start = t;
  }
  return out;
}

}  // namespace meg::bursts
