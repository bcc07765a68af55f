#include "meg/baselines.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

#include "meg/errors.hpp"
#include "meg/report.hpp"

namespace meg::baselines {

namespace {

struct Normal {
  Eigen::MatrixXd gram;
  Eigen::VectorXd rhs;
  double yy = 0;
  std::size_t rows = 0;

  explicit Normal(std::size_t p) : gram(Eigen::MatrixXd::Zero(p, p)), rhs(Eigen::VectorXd::Zero(p)) {}

  void add(std::span<const float> x) {
    const std::size_t p = static_cast<std::size_t>(rhs.size());
    if (x.size() <= p) return;
    const std::size_t n = x.size() - p;
    Eigen::MatrixXd design(n, p);
    Eigen::VectorXd y(n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t t = r + p;
      y(static_cast<Eigen::Index>(r)) = x[t];
      for (std::size_t i = 0; i < p; ++i) design(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = x[t - 1 - i];
    }
    gram.noalias() += design.transpose() * design;
    rhs.noalias() += design.transpose() * y;
    yy += y.squaredNorm();
    rows += n;
  }

  ArChannel solve() const {
    const std::size_t p = static_cast<std::size_t>(rhs.size());
    if (rows <= p) throw InputError("fit_ar: series must be longer than the order");
    // Conditioning of the unregularised Gram matrix decides rank deficiency.
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues();
    const double rcond = ev.maxCoeff() > 0 ? std::max(0.0, ev.minCoeff()) / ev.maxCoeff() : 0.0;
    Eigen::MatrixXd g = gram;
    g.diagonal().array() += 1e-8;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(g);
    if (ldlt.info() != Eigen::Success || !(rcond > 1e-13)) {
      std::ostringstream msg;
      msg << "fit_ar: design is rank deficient (reciprocal condition number " << rcond << ", order " << p << ", "
          << rows << " rows)";
      throw NumericError(msg.str());
    }
    const Eigen::VectorXd a = ldlt.solve(rhs);
    // RSS = y'y - 2 a'X'y + a'X'Xa
    const double rss = std::max(0.0, yy - 2 * a.dot(rhs) + a.dot(gram * a));
    ArChannel ch;
    ch.coeffs.assign(a.data(), a.data() + a.size());
    ch.noise_std = std::sqrt(rss / static_cast<double>(rows - p));
    return ch;
  }
};

}  // namespace

ArChannel fit_ar(std::span<const float> series, std::size_t order) {
  if (order == 0) throw ParameterError("fit_ar: order must be positive");
  if (series.size() <= order) throw InputError("fit_ar: series must be longer than the order");
  Normal ne(order);
  ne.add(series);
  return ne.solve();
}

ArModel fit_ar(const SignalSet& signals, std::size_t order) {
  if (order == 0) throw ParameterError("fit_ar: order must be positive");
  if (signals.sessions.empty()) throw InputError("fit_ar: no sessions");
  ArModel model;
  model.order = order;
  for (std::size_t c = 0; c < signals.channels(); ++c) {
    Normal ne(order);
    for (const auto& rec : signals.sessions) ne.add(rec.channel(c));
    model.channels.push_back(ne.solve());
  }
  return model;
}

double spectral_radius(const ArChannel& ch) {
  const auto p = static_cast<Eigen::Index>(ch.coeffs.size());
  if (p == 0) return 0;
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i) companion(0, i) = ch.coeffs[static_cast<std::size_t>(i)];
  for (Eigen::Index i = 1; i < p; ++i) companion(i, i - 1) = 1;
  return companion.eigenvalues().cwiseAbs().maxCoeff();
}

ArSeries generate_ar(const ArChannel& ch, std::size_t steps, Rng& rng) {
  if (steps == 0) throw ParameterError("generate_ar: steps must be positive");
  const std::size_t p = ch.coeffs.size();
  ArSeries out;
  out.unstable = spectral_radius(ch) >= 1.0;
  std::vector<double> x(p + steps);
  for (std::size_t i = 0; i < p; ++i) x[i] = normal(rng);
  for (std::size_t t = p; t < x.size(); ++t) {
    double v = 0;
    for (std::size_t i = 0; i < p; ++i) v += ch.coeffs[i] * x[t - 1 - i];
    x[t] = v + ch.noise_std * normal(rng);
  }
  out.values.assign(x.begin() + static_cast<std::ptrdiff_t>(p), x.end());
  return out;
}

Recording generate_ar(const ArModel& model, std::size_t steps, std::uint32_t fs, Rng& rng,
                      std::vector<std::string>* warnings) {
  Recording rec(model.channels.size(), steps, fs);
  for (std::size_t c = 0; c < model.channels.size(); ++c) {
    const ArSeries s = generate_ar(model.channels[c], steps, rng);
    if (s.unstable && warnings) warnings->push_back("AR model of channel " + std::to_string(c) + " is unstable");
    auto dst = rec.channel(c);
    for (std::size_t t = 0; t < steps; ++t) dst[t] = static_cast<float>(s.values[t]);
  }
  return rec;
}

std::string coefficient_table(const ArModel& model) {
  std::string out = "# channel\tnoise_std\ta1..a" + std::to_string(model.order) + "\n";
  for (std::size_t c = 0; c < model.channels.size(); ++c) {
    out += std::to_string(c) + "\t" + format_real(model.channels[c].noise_std);
    for (double a : model.channels[c].coeffs) out += "\t" + format_real(a);
    out += "\n";
  }
  return out;
}

}  // namespace meg::baselines
