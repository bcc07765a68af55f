#include "meg/tokeniser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "meg/adam.hpp"
#include "meg/io.hpp"
#include "meg/ops.hpp"
#include "meg/report.hpp"

namespace meg::tokeniser {

namespace {

constexpr float kNormEps = 1e-5f;

template <class Real>
std::vector<int> argmax_rows(const Tensor<Real>& t) {
  const std::size_t k = t.last(), rows = t.rows();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = t.data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

// Logits for a batch of equal-length windows x [B, T].
Tensor<float> encoder_logits(const TokeniserModel& model, const Tensor<float>& x) {
  Tape<float> tape;
  Bound<float> p(tape, model.params);
  const std::size_t nb = x.dim(0), nt = x.dim(1), u = model.config.units;
  Var xin = tape.constant(Tensor<float>({nb, nt, 1}, x.values));
  Var h0 = tape.constant(Tensor<float>({nb, u}));
  Var hs = ops::gru_sequence(tape, xin, p["gru.wx"], p["gru.wh"], p["gru.b"], h0);
  Var logits = ops::dense(tape, hs, p["head.w"], p["head.b"]);
  logits = ops::layer_norm(tape, logits, p["norm.gain"], p["norm.bias"], kNormEps);
  return tape.value(logits);
}

}  // namespace

void TokeniserConfig::validate() const {
  if (vocab < 2 || vocab > 65535) throw ConfigError("tokeniser: vocabulary must be in [2, 65535]");
  if (d_token == 0 || d_token % 2 != 0) throw ConfigError("tokeniser: d_token must be even and positive");
  if (units == 0 || seq_len == 0 || batch == 0) throw ConfigError("tokeniser: units, seq_len and batch must be positive");
  if (!(lr > 0)) throw ConfigError("tokeniser: learning rate must be positive");
  if (!(temperature > 0)) throw ConfigError("tokeniser: temperature must be positive");
}

TokeniserConfig full_config() { return {}; }

TokeniserConfig desk_config() {
  TokeniserConfig c;
  c.units = 96;
  c.epochs = 10;
  c.lr = 2e-3;
  c.steps_per_epoch = 300;
  c.clip_norm = 1.0;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "tokeniser.scale",  "tokeniser.vocab",       "tokeniser.d_token",         "tokeniser.units",
      "tokeniser.seq_len", "tokeniser.batch",      "tokeniser.epochs",          "tokeniser.lr",
      "tokeniser.temperature", "tokeniser.steps_per_epoch", "tokeniser.clip_norm"};
  return keys;
}

TokeniserConfig config_from(const Config& cfg, TokeniserConfig c) {
  const std::string scale = cfg.str("tokeniser.scale", "");
  if (scale == "full") c = full_config();
  else if (scale == "desk") c = desk_config();
  else if (!scale.empty()) throw ConfigError("tokeniser.scale must be 'full' or 'desk'");
  auto count = [&](const char* key, std::size_t fallback) {
    const long long v = cfg.integer(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.vocab = count("tokeniser.vocab", c.vocab);
  c.d_token = count("tokeniser.d_token", c.d_token);
  c.units = count("tokeniser.units", c.units);
  c.seq_len = count("tokeniser.seq_len", c.seq_len);
  c.batch = count("tokeniser.batch", c.batch);
  c.epochs = count("tokeniser.epochs", c.epochs);
  c.steps_per_epoch = count("tokeniser.steps_per_epoch", c.steps_per_epoch);
  c.lr = cfg.real("tokeniser.lr", c.lr);
  c.temperature = cfg.real("tokeniser.temperature", c.temperature);
  c.clip_norm = cfg.real("tokeniser.clip_norm", c.clip_norm);
  c.validate();
  return c;
}

double AnnealSchedule::kappa(std::size_t epoch) const {
  if (epochs <= 1) return 0.0;
  const double k = 1.0 - static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return std::clamp(k, 0.0, 1.0);
}

TokeniserModel init_model(const TokeniserConfig& cfg, Rng& rng) {
  cfg.validate();
  TokeniserModel m;
  m.config = cfg;
  const std::size_t u = cfg.units, k = cfg.vocab, d = cfg.d_token;
  const double g = 1.0 / std::sqrt(static_cast<double>(u));
  m.params.add("gru.wx", uniform_tensor<float>({1, 3 * u}, g, rng));
  m.params.add("gru.wh", uniform_tensor<float>({u, 3 * u}, g, rng));
  m.params.add("gru.b", uniform_tensor<float>({3 * u}, g, rng));
  m.params.add("head.w", uniform_tensor<float>({u, k}, std::sqrt(6.0 / static_cast<double>(u + k)), rng));
  m.params.add("head.b", Tensor<float>({k}));
  m.params.add("norm.gain", Tensor<float>({k}, 1.0f));
  m.params.add("norm.bias", Tensor<float>({k}));
  m.params.add("kernels", normal_tensor<float>({k, d}, 0.3, rng));
  m.params.add("taps", Tensor<float>({d}, 1.0f / static_cast<float>(d)));
  return m;
}

Encoding encode(std::span<const float> signal, const TokeniserModel& model) {
  if (signal.empty()) throw InputError("encode: empty signal");
  for (float v : signal)
    if (!std::isfinite(v)) throw InputError("encode: non-finite sample");
  const std::size_t n = signal.size(), w = model.config.seq_len, k = model.vocab();
  Encoding out;
  out.logits = Tensor<float>({n, k});
  const std::size_t full = n / w;
  if (full > 0) {
    Tensor<float> x({full, w}, std::vector<float>(signal.begin(), signal.begin() + static_cast<std::ptrdiff_t>(full * w)));
    const Tensor<float> l = encoder_logits(model, x);
    std::copy(l.values.begin(), l.values.end(), out.logits.values.begin());
  }
  if (const std::size_t rest = n - full * w; rest > 0) {
    Tensor<float> x({1, rest}, std::vector<float>(signal.begin() + static_cast<std::ptrdiff_t>(full * w), signal.end()));
    const Tensor<float> l = encoder_logits(model, x);
    std::copy(l.values.begin(), l.values.end(), out.logits.values.begin() + static_cast<std::ptrdiff_t>(full * w * k));
  }
  out.labels = argmax_rows(out.logits);
  return out;
}

template <class Real>
Tensor<Real> anneal_assign(const Tensor<Real>& logits, double kappa, double temperature) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ParameterError("anneal_assign: kappa must lie in [0, 1]");
  if (!(temperature > 0)) throw ParameterError("anneal_assign: temperature must be positive");
  const std::size_t k = logits.last(), rows = logits.rows();
  Tensor<Real> out(logits.shape);
  const auto top = argmax_rows(logits);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = logits.data() + r * k;
    Real* dst = out.data() + r * k;
    if (kappa > 0) {
      const Real mx = row[top[r]];
      double total = 0;
      for (std::size_t j = 0; j < k; ++j) {
        dst[j] = static_cast<Real>(std::exp(static_cast<double>(row[j] - mx) / temperature));
        total += dst[j];
      }
      for (std::size_t j = 0; j < k; ++j) dst[j] = static_cast<Real>(kappa * dst[j] / total);
    }
    dst[top[r]] += static_cast<Real>(1.0 - kappa);
  }
  return out;
}

template <class Real>
std::vector<Real> decode(const Tensor<Real>& assignment, const Tensor<Real>& kernels, const Tensor<Real>& weights) {
  if (assignment.rank() != 2 || kernels.rank() != 2 || weights.rank() != 1)
    throw DimensionError("decode: expected assignment [T,K], kernels [K,d], weights [d]");
  const std::size_t t_len = assignment.dim(0), k = assignment.dim(1), d = weights.dim(0);
  if (kernels.dim(0) != k || kernels.dim(1) != d)
    throw DimensionError("decode: kernels " + shape_str(kernels.shape) + " do not match K=" + std::to_string(k) +
                         ", d=" + std::to_string(d));
  if (d % 2 != 0) throw DimensionError("decode: d_token must be even");
  // m[t, j] = <assignment[t], kernels[:, j]>
  std::vector<Real> m(t_len * d, Real(0));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < k; ++c) {
      const Real a = assignment.at(t, c);
      if (a == Real(0)) continue;
      for (std::size_t j = 0; j < d; ++j) m[t * d + j] += a * kernels.at(c, j);
    }
  std::vector<Real> out(t_len, Real(0));
  const auto half = static_cast<std::ptrdiff_t>(d / 2);
  for (std::size_t t = 0; t < t_len; ++t) {
    Real acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const auto s = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(t_len)) continue;
      acc += weights[j] * m[static_cast<std::size_t>(s) * d + j];
    }
    out[t] = acc;
  }
  return out;
}

template <class Real>
Var reconstruction_loss(Tape<Real>& tape, const Bound<Real>& p, const Tensor<Real>& x, double kappa,
                        double temperature) {
  if (x.rank() != 2) throw DimensionError("reconstruction_loss: batch must be [B, T]");
  const std::size_t nb = x.dim(0), nt = x.dim(1);
  const std::size_t u = tape.value(p["gru.wh"]).dim(0);
  Var xin = tape.constant(Tensor<Real>({nb, nt, 1}, x.values));
  Var h0 = tape.constant(Tensor<Real>({nb, u}));
  Var hs = ops::gru_sequence(tape, xin, p["gru.wx"], p["gru.wh"], p["gru.b"], h0);
  Var logits = ops::dense(tape, hs, p["head.w"], p["head.b"]);
  logits = ops::layer_norm(tape, logits, p["norm.gain"], p["norm.bias"], static_cast<Real>(kNormEps));

  // The argmax term carries no gradient; only the softmax share does.
  Tensor<Real> hard = anneal_assign(tape.value(logits), 0.0, temperature);
  for (auto& v : hard.values) v *= static_cast<Real>(1.0 - kappa);
  Var z = tape.constant(std::move(hard));
  if (kappa > 0) {
    Var soft = ops::softmax_t(tape, logits, static_cast<Real>(temperature));
    z = ops::add(tape, z, ops::scale(tape, soft, static_cast<Real>(kappa)));
  }
  Var m = ops::matmul(tape, z, p["kernels"]);
  Var rec = ops::tap_sum(tape, m, p["taps"]);
  return ops::mse(tape, rec, tape.constant(x));
}

TokeniserModel train_tokeniser(const SignalSet& corpus, const TokeniserConfig& cfg, const AnnealSchedule& schedule,
                               Rng& rng, std::vector<EpochLog>* log,
                               const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  // Windows are drawn from (session, channel) series long enough to hold one.
  struct Series {
    const float* data;
    std::size_t len;
  };
  std::vector<Series> series;
  std::size_t windows = 0;
  for (const auto& rec : corpus.sessions) {
    if (rec.samples < cfg.seq_len) continue;
    for (std::size_t c = 0; c < rec.channels; ++c) {
      series.push_back({rec.channel(c).data(), rec.samples});
      windows += rec.samples / cfg.seq_len;
    }
  }
  if (series.empty()) throw InputError("train_tokeniser: no series of at least seq_len samples");

  TokeniserModel model = init_model(cfg, rng);
  const std::size_t steps =
      cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : std::max<std::size_t>(1, windows / cfg.batch);
  AdamState<float> state;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double kappa = schedule.kappa(epoch);
    double total = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      Tensor<float> x({cfg.batch, cfg.seq_len});
      for (std::size_t b = 0; b < cfg.batch; ++b) {
        const Series& s = series[uniform_index(rng, series.size())];
        const std::size_t start = uniform_index(rng, s.len - cfg.seq_len + 1);
        std::copy_n(s.data + start, cfg.seq_len, x.data() + b * cfg.seq_len);
      }
      Tape<float> tape;
      Bound<float> p(tape, model.params);
      Var loss = reconstruction_loss(tape, p, x, kappa, schedule.temperature);
      total += tape.value(loss).values[0];
      tape.backward(loss);
      auto grads = p.gradients(tape);
      if (cfg.clip_norm > 0) clip_global_norm(grads, cfg.clip_norm);
      adam_step(model.params, grads, state, cfg.lr);
    }
    EpochLog entry{epoch, kappa, total / static_cast<double>(steps)};
    if (log) log->push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  refactorise_model(model, corpus);
  return model;
}

Refactor refactorise(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  Refactor r;
  r.map.assign(counts.size(), 0);
  std::uint16_t next = 1;
  for (std::size_t label : order) {
    if (counts[label] == 0) break;
    r.map[label] = next++;
  }
  r.vocab_star = next;
  return r;
}

Refactor refactorise(const std::vector<std::vector<int>>& label_sequences, std::size_t vocab) {
  std::vector<std::size_t> counts(vocab, 0);
  for (const auto& seq : label_sequences)
    for (int l : seq) {
      if (l < 0 || static_cast<std::size_t>(l) >= vocab) throw IndexError("refactorise: label out of range");
      ++counts[static_cast<std::size_t>(l)];
    }
  return refactorise(counts);
}

void refactorise_model(TokeniserModel& model, const SignalSet& corpus) {
  std::vector<std::size_t> counts(model.vocab(), 0);
  for (const auto& rec : corpus.sessions)
    for (std::size_t c = 0; c < rec.channels; ++c)
      for (int l : encode(rec.channel(c), model).labels) ++counts[static_cast<std::size_t>(l)];
  Refactor r = refactorise(counts);
  model.refactor = std::move(r.map);
  model.vocab_star = r.vocab_star;
}

TokenCorpus tokenise(const SignalSet& signals, const TokeniserModel& model) {
  if (!model.refactorised()) throw ConfigError("tokenise: model has not been refactorised");
  TokenCorpus corpus;
  corpus.vocab = model.vocab_star;
  for (const auto& rec : signals.sessions) {
    TokenTrace t;
    t.session_id = rec.session_id;
    t.subject_id = rec.subject_id;
    t.vocab = model.vocab_star;
    t.channels = rec.channels;
    t.samples = rec.samples;
    t.labels.resize(rec.channels * rec.samples);
    for (std::size_t c = 0; c < rec.channels; ++c) {
      const auto labels = encode(rec.channel(c), model).labels;
      auto dst = t.channel(c);
      for (std::size_t i = 0; i < labels.size(); ++i) dst[i] = model.refactor[static_cast<std::size_t>(labels[i])];
    }
    corpus.sessions.push_back(std::move(t));
  }
  return corpus;
}

std::vector<float> detokenise(std::span<const std::uint16_t> labels, const TokeniserModel& model) {
  if (!model.refactorised()) throw ConfigError("detokenise: model has not been refactorised");
  const std::size_t d = model.config.d_token;
  const auto& kernels = model.params.get("kernels");
  const auto& taps = model.params.get("taps");
  // Row r of the table is the kernel of the original label mapped to r.
  std::vector<float> table(static_cast<std::size_t>(model.vocab_star) * d, 0.0f);
  for (std::size_t orig = 0; orig < model.refactor.size(); ++orig) {
    const std::uint16_t r = model.refactor[orig];
    if (r == 0) continue;
    std::copy_n(kernels.data() + orig * d, d, table.data() + r * d);
  }
  const std::size_t n = labels.size();
  const auto half = static_cast<std::ptrdiff_t>(d / 2);
  std::vector<float> out(n, 0.0f);
  for (std::size_t t = 0; t < n; ++t) {
    float acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const auto s = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - half;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(n)) continue;
      const std::uint16_t l = labels[static_cast<std::size_t>(s)];
      if (l >= model.vocab_star) throw IndexError("detokenise: label " + std::to_string(l) + " outside vocabulary");
      acc += taps[j] * table[l * d + j];
    }
    out[t] = acc;
  }
  return out;
}

SignalSet detokenise(const TokenCorpus& tokens, const TokeniserModel& model, std::uint32_t fs) {
  SignalSet out;
  for (const auto& t : tokens.sessions) {
    Recording rec(t.channels, t.samples, fs);
    rec.session_id = t.session_id;
    rec.subject_id = t.subject_id;
    for (std::size_t c = 0; c < t.channels; ++c) {
      const auto x = detokenise(t.channel(c), model);
      std::copy(x.begin(), x.end(), rec.channel(c).begin());
    }
    out.sessions.push_back(std::move(rec));
  }
  return out;
}

std::optional<double> pve(std::span<const float> original, std::span<const float> reconstruction) {
  if (original.size() != reconstruction.size()) throw DimensionError("pve: length mismatch");
  double err = 0, power = 0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double e = static_cast<double>(original[i]) - reconstruction[i];
    err += e * e;
    power += static_cast<double>(original[i]) * original[i];
  }
  if (power == 0) return std::nullopt;
  return 100.0 * (1.0 - err / power);
}

std::optional<double> pve(const SignalSet& original, const SignalSet& reconstruction) {
  if (original.sessions.size() != reconstruction.sessions.size()) throw DimensionError("pve: session count mismatch");
  double err = 0, power = 0;
  for (std::size_t s = 0; s < original.sessions.size(); ++s) {
    const auto& a = original.sessions[s].data;
    const auto& b = reconstruction.sessions[s].data;
    if (a.size() != b.size()) throw DimensionError("pve: shape mismatch in session " + std::to_string(s));
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double e = static_cast<double>(a[i]) - b[i];
      err += e * e;
      power += static_cast<double>(a[i]) * a[i];
    }
  }
  if (power == 0) return std::nullopt;
  return 100.0 * (1.0 - err / power);
}

void save_model(const std::filesystem::path& path, const TokeniserModel& model) {
  io::Checkpoint ck;
  const auto& c = model.config;
  ck.meta = {{"kind", "tokeniser"},
             {"vocab", std::to_string(c.vocab)},
             {"d_token", std::to_string(c.d_token)},
             {"units", std::to_string(c.units)},
             {"seq_len", std::to_string(c.seq_len)},
             {"batch", std::to_string(c.batch)},
             {"epochs", std::to_string(c.epochs)},
             {"lr", format_real(c.lr)},
             {"temperature", format_real(c.temperature)},
             {"steps_per_epoch", std::to_string(c.steps_per_epoch)},
             {"clip_norm", format_real(c.clip_norm)},
             {"vocab_star", std::to_string(model.vocab_star)}};
  ck.params = model.params;
  Tensor<float> map({model.refactor.size()});
  for (std::size_t i = 0; i < model.refactor.size(); ++i) map[i] = model.refactor[i];
  ck.params.add("refactor", std::move(map), false);
  io::write_checkpoint(path, ck);
}

TokeniserModel load_model(const std::filesystem::path& path) {
  io::Checkpoint ck = io::read_checkpoint(path);
  if (ck.meta["kind"] != "tokeniser") throw FormatError(path.string() + ": not a tokeniser checkpoint");
  Config meta;
  for (const auto& [k, v] : ck.meta)
    if (k != "kind" && k != "vocab_star") meta.set("tokeniser." + k, v);
  TokeniserModel m;
  try {
    m.config = config_from(meta, TokeniserConfig{});
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const Shape expect[] = {{1, 3 * m.config.units}, {m.config.units, 3 * m.config.units}, {3 * m.config.units},
                          {m.config.units, m.config.vocab}, {m.config.vocab}, {m.config.vocab}, {m.config.vocab},
                          {m.config.vocab, m.config.d_token}, {m.config.d_token}};
  const char* names[] = {"gru.wx", "gru.wh", "gru.b", "head.w", "head.b", "norm.gain", "norm.bias", "kernels", "taps"};
  for (std::size_t i = 0; i < 9; ++i) {
    if (!ck.params.contains(names[i])) throw FormatError(path.string() + ": missing block " + names[i]);
    Tensor<float> t = ck.params.get(names[i]);
    if (t.shape != expect[i]) throw FormatError(path.string() + ": block " + names[i] + " has shape " + shape_str(t.shape));
    m.params.add(names[i], std::move(t));
  }
  if (ck.params.contains("refactor")) {
    const auto& map = ck.params.get("refactor");
    m.vocab_star = static_cast<std::uint16_t>(std::stoul(ck.meta["vocab_star"]));
    for (float v : map.values) {
      if (v < 0 || v >= m.vocab_star) throw FormatError(path.string() + ": refactor map entry out of range");
      m.refactor.push_back(static_cast<std::uint16_t>(v));
    }
  }
  return m;
}

template Tensor<float> anneal_assign<float>(const Tensor<float>&, double, double);
template Tensor<double> anneal_assign<double>(const Tensor<double>&, double, double);
template std::vector<float> decode<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template std::vector<double> decode<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Var reconstruction_loss<float>(Tape<float>&, const Bound<float>&, const Tensor<float>&, double, double);
template Var reconstruction_loss<double>(Tape<double>&, const Bound<double>&, const Tensor<double>&, double, double);

}  // namespace meg::tokeniser
