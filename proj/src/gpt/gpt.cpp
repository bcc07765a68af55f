#include "meg/gpt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "meg/adam.hpp"
#include "meg/io.hpp"
#include "meg/ops.hpp"
#include "meg/report.hpp"

namespace meg::gpt {

namespace {

constexpr double kNormEps = 1e-5;

std::string layer(std::size_t l, const char* part) { return "layer" + std::to_string(l) + "." + part; }

void add_dense(ParamSet<float>& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p.add(name + ".w", uniform_tensor<float>({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng));
  p.add(name + ".b", Tensor<float>({out}));
}

template <class Real>
Var dense(Tape<Real>& tape, const Bound<Real>& p, Var x, const std::string& name) {
  return ops::dense(tape, x, p[name + ".w"], p[name + ".b"]);
}

template <class Real>
Var norm(Tape<Real>& tape, const Bound<Real>& p, Var x, const std::string& name) {
  return ops::layer_norm(tape, x, p[name + ".gain"], p[name + ".bias"], static_cast<Real>(kNormEps));
}

// Gathers rows of a table and projects them to width d when a map exists.
template <class Real>
Var lookup(Tape<Real>& tape, const Bound<Real>& p, const std::string& name, std::span<const int> ids, Shape prefix) {
  Var e = ops::embedding(tape, p["emb." + name], ids, std::move(prefix));
  if (p.contains("map." + name + ".w")) e = dense(tape, p, e, "map." + name);
  return e;
}

template <class Real>
Var block(Tape<Real>& tape, const Bound<Real>& p, const GptConfig& cfg, std::size_t l, Var queries, Var keys,
          const AttentionMask& mask, bool training, Rng* rng) {
  Var q = dense(tape, p, queries, layer(l, "q"));
  Var k = dense(tape, p, keys, layer(l, "k"));
  Var v = dense(tape, p, keys, layer(l, "v"));
  Var a = ops::attention(tape, q, k, v, mask.allowed, cfg.heads);
  a = dense(tape, p, a, layer(l, "o"));
  Var h = norm(tape, p, ops::add(tape, queries, a), layer(l, "norm1"));
  Var f = ops::leaky_relu(tape, dense(tape, p, h, layer(l, "ff1")), static_cast<Real>(cfg.leaky_slope));
  f = dense(tape, p, f, layer(l, "ff2"));
  if (training && cfg.dropout > 0) {
    if (!rng) throw ConfigError("gpt: training forward pass needs an rng for dropout");
    f = ops::dropout(tape, f, static_cast<Real>(cfg.dropout), true, *rng);
  }
  return norm(tape, p, ops::add(tape, h, f), layer(l, "norm2"));
}

// Targets of every latent query of every sequence for windows of L + 1 tokens.
struct WindowBatch {
  Batch batch;
  std::vector<int> targets;  // [items*C][L_latent]
};

WindowBatch make_batch(const TokenCorpus& corpus, const std::vector<Window>& windows, std::span<const std::size_t> pick,
                       const GptConfig& cfg, bool use_subjects) {
  WindowBatch wb;
  Batch& b = wb.batch;
  b.items = pick.size();
  b.channels = cfg.channels;
  b.length = cfg.L;
  b.tokens.resize(b.items * b.channels * b.length);
  wb.targets.resize(b.items * b.channels * cfg.L_latent);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    const Window& w = windows[pick[i]];
    const TokenTrace& trace = corpus.sessions[w.session];
    b.subjects.push_back(use_subjects ? trace.subject_id : -1);
    for (std::size_t c = 0; c < b.channels; ++c) {
      const auto ch = trace.channel(c);
      for (std::size_t t = 0; t < cfg.L; ++t) b.tokens[(i * b.channels + c) * cfg.L + t] = ch[w.start + t];
      for (std::size_t q = 0; q < cfg.L_latent; ++q)
        wb.targets[(i * b.channels + c) * cfg.L_latent + q] = ch[w.start + cfg.L - cfg.L_latent + q + 1];
    }
  }
  return wb;
}

struct Split {
  std::vector<Window> train, val;
};

Split make_windows(const TokenCorpus& corpus, const GptConfig& cfg, double val_fraction) {
  Split s;
  const std::size_t span = cfg.L + 1;
  for (std::size_t i = 0; i < corpus.sessions.size(); ++i) {
    const std::size_t n = corpus.sessions[i].samples;
    if (n < span) continue;
    const auto boundary = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - val_fraction)));
    for (std::size_t start = 0; start + span <= n; start += cfg.L_loss) {
      if (start + span <= boundary) s.train.push_back({i, start});
      else if (start >= boundary) s.val.push_back({i, start});
    }
  }
  return s;
}

// Sum of loss and count of correct argmax predictions over scored positions.
void score(const Tensor<float>& logits, std::span<const int> targets, const GptConfig& cfg, double& loss,
           std::size_t& correct, std::size_t& count) {
  const std::size_t k = logits.last(), seqs = logits.dim(0);
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t q = cfg.L_latent - cfg.L_loss; q < cfg.L_latent; ++q) {
      const float* row = logits.data() + (s * cfg.L_latent + q) * k;
      const int target = targets[s * cfg.L_latent + q];
      const float mx = *std::max_element(row, row + k);
      double z = 0;
      for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      loss += std::log(z) - (row[target] - mx);
      if (std::max_element(row, row + k) - row == target) ++correct;
      ++count;
    }
}

EpochMetrics evaluate_windows(const GptModel& model, const TokenCorpus& corpus, const std::vector<Window>& windows) {
  EpochMetrics m;
  if (windows.empty()) return m;
  double loss = 0;
  std::size_t correct = 0, count = 0;
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  constexpr std::size_t chunk = 32;
  for (std::size_t off = 0; off < idx.size(); off += chunk) {
    const auto pick = std::span(idx).subspan(off, std::min(chunk, idx.size() - off));
    const WindowBatch wb = make_batch(corpus, windows, pick, model.config, model.has_subjects());
    score(forward(model, wb.batch).logits, wb.targets, model.config, loss, correct, count);
  }
  m.train_loss = loss / static_cast<double>(count);
  m.train_accuracy = static_cast<double>(correct) / static_cast<double>(count);
  return m;
}

struct Schedule {
  std::size_t batch, epochs, steps_per_epoch;
  double lr, val_fraction, clip_norm;
};

TrainResult run_training(GptModel model, const TokenCorpus& corpus, const Schedule& sch, bool use_subjects, Rng& rng,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
  const GptConfig& cfg = model.config;
  if (corpus.vocab != cfg.vocab)
    throw ConfigError("gpt: corpus vocabulary " + std::to_string(corpus.vocab) + " differs from model K* " +
                      std::to_string(cfg.vocab));
  if (corpus.channels() != cfg.channels)
    throw ConfigError("gpt: corpus has " + std::to_string(corpus.channels()) + " channels, model " +
                      std::to_string(cfg.channels));
  const Split split = make_windows(corpus, cfg, sch.val_fraction);
  if (split.train.empty() && sch.epochs > 0) throw InputError("gpt: no training windows of length L + 1");
  TrainResult result;
  AdamState<float> state;
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps =
      sch.steps_per_epoch > 0 ? sch.steps_per_epoch : (split.train.size() + sch.batch - 1) / sch.batch;
  std::size_t cursor = order.size();
  for (std::size_t epoch = 0; epoch < sch.epochs; ++epoch) {
    double loss_sum = 0;
    std::size_t correct = 0, count = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<std::size_t> pick;
      while (pick.size() < sch.batch) {
        if (cursor == order.size()) {
          shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        pick.push_back(order[cursor++]);
        if (sch.steps_per_epoch == 0 && cursor == order.size()) break;
      }
      const WindowBatch wb = make_batch(corpus, split.train, pick, cfg, use_subjects);
      Tape<float> tape;
      Bound<float> p(tape, model.params);
      const Graph<float> g = forward_graph(tape, p, cfg, wb.batch, true, &rng);
      Var loss = sequence_loss(tape, g.logits, wb.targets, cfg.L_loss);
      double unused = 0;
      score(tape.value(g.logits), wb.targets, cfg, unused, correct, count);
      loss_sum += tape.value(loss).values[0] * static_cast<double>(pick.size() * cfg.channels * cfg.L_loss);
      tape.backward(loss);
      auto grads = p.gradients(tape);
      if (sch.clip_norm > 0) clip_global_norm(grads, sch.clip_norm);
      adam_step(model.params, grads, state, sch.lr);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = count ? loss_sum / static_cast<double>(count) : 0;
    m.train_accuracy = count ? static_cast<double>(correct) / static_cast<double>(count) : 0;
    const EpochMetrics v = evaluate_windows(model, corpus, split.val);
    m.val_loss = v.train_loss;
    m.val_accuracy = v.train_accuracy;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.model = std::move(model);
  return result;
}

std::size_t count_key(const Config& cfg, const char* key, std::size_t fallback) {
  const long long v = cfg.integer(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

void GptConfig::validate() const {
  if (vocab < 1) throw ConfigError("gpt: vocabulary K* must be positive");
  if (channels < 1) throw ConfigError("gpt: channel count must be positive");
  if (d == 0 || d_z == 0 || d_c == 0 || d_p == 0 || d_s == 0 || ff == 0) throw ConfigError("gpt: widths must be positive");
  if (L_p == 0 || L % L_p != 0)
    throw ConfigError("gpt: receptive field L=" + std::to_string(L) + " is not a multiple of L_p=" + std::to_string(L_p));
  if (L_u > L) throw ConfigError("gpt: L_u exceeds L");
  if (L_latent == 0 || L_latent > L) throw ConfigError("gpt: L_latent must lie in [1, L]");
  if (L_loss == 0 || L_loss > L_latent) throw ConfigError("gpt: L_loss must lie in [1, L_latent]");
  if (heads == 0 || d % heads != 0) throw ConfigError("gpt: heads must divide d");
  if (layers == 0) throw ConfigError("gpt: at least one layer required");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("gpt: dropout must lie in [0, 1)");
  if (!(lr > 0)) throw ConfigError("gpt: learning rate must be positive");
  if (batch == 0) throw ConfigError("gpt: batch must be positive");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("gpt: val_fraction must lie in [0, 1)");
}

GptConfig full_config() { return {}; }

GptConfig desk_config() {
  GptConfig c;
  c.d_z = c.d_c = c.d_p = c.d_s = c.d = 32;
  c.ff = 32;
  c.L = 40;
  c.L_p = 4;
  c.L_u = 8;
  c.L_latent = 20;
  c.L_loss = 8;
  c.heads = 2;
  c.layers = 2;
  c.dropout = 0.1;
  c.batch = 8;
  c.epochs = 10;
  c.lr = 1e-3;
  c.steps_per_epoch = 300;
  c.clip_norm = 1.0;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "gpt.scale",   "gpt.d_z",        "gpt.d_c",     "gpt.d_p",     "gpt.d_s",      "gpt.d",
      "gpt.L",       "gpt.L_p",        "gpt.L_u",     "gpt.L_latent", "gpt.L_loss",  "gpt.heads",
      "gpt.layers",  "gpt.ff",         "gpt.leaky_slope", "gpt.dropout", "gpt.batch", "gpt.epochs",
      "gpt.lr",      "gpt.steps_per_epoch", "gpt.val_fraction", "gpt.clip_norm", "gpt.subjects"};
  return keys;
}

GptConfig config_from(const Config& cfg, GptConfig c) {
  const std::string scale = cfg.str("gpt.scale", "");
  if (scale == "full" || scale == "desk") {
    const GptConfig keep = c;
    c = scale == "full" ? full_config() : desk_config();
    c.vocab = keep.vocab;
    c.channels = keep.channels;
    c.subjects = keep.subjects;
  } else if (!scale.empty()) {
    throw ConfigError("gpt.scale must be 'full' or 'desk'");
  }
  c.d_z = count_key(cfg, "gpt.d_z", c.d_z);
  c.d_c = count_key(cfg, "gpt.d_c", c.d_c);
  c.d_p = count_key(cfg, "gpt.d_p", c.d_p);
  c.d_s = count_key(cfg, "gpt.d_s", c.d_s);
  c.d = count_key(cfg, "gpt.d", c.d);
  c.L = count_key(cfg, "gpt.L", c.L);
  c.L_p = count_key(cfg, "gpt.L_p", c.L_p);
  c.L_u = count_key(cfg, "gpt.L_u", c.L_u);
  c.L_latent = count_key(cfg, "gpt.L_latent", c.L_latent);
  c.L_loss = count_key(cfg, "gpt.L_loss", c.L_loss);
  c.heads = count_key(cfg, "gpt.heads", c.heads);
  c.layers = count_key(cfg, "gpt.layers", c.layers);
  c.ff = count_key(cfg, "gpt.ff", c.ff);
  c.batch = count_key(cfg, "gpt.batch", c.batch);
  c.epochs = count_key(cfg, "gpt.epochs", c.epochs);
  c.steps_per_epoch = count_key(cfg, "gpt.steps_per_epoch", c.steps_per_epoch);
  c.subjects = count_key(cfg, "gpt.subjects", c.subjects);
  c.leaky_slope = cfg.real("gpt.leaky_slope", c.leaky_slope);
  c.dropout = cfg.real("gpt.dropout", c.dropout);
  c.lr = cfg.real("gpt.lr", c.lr);
  c.val_fraction = cfg.real("gpt.val_fraction", c.val_fraction);
  c.clip_norm = cfg.real("gpt.clip_norm", c.clip_norm);
  return c;
}

GptModel init_model(const GptConfig& cfg, Rng& rng) {
  cfg.validate();
  GptModel m;
  m.config = cfg;
  auto& p = m.params;
  auto table = [&](const char* name, std::size_t rows, std::size_t width) {
    p.add(std::string("emb.") + name, normal_tensor<float>({rows, width}, 0.1, rng));
    if (width != cfg.d) add_dense(p, std::string("map.") + name, width, cfg.d, rng);
  };
  table("token", cfg.vocab, cfg.d_z);
  table("channel", cfg.channels, cfg.d_c);
  table("position", cfg.L, cfg.d_p);
  if (cfg.subjects > 0) table("subject", cfg.subjects, cfg.d_s);
  add_dense(p, "patch", cfg.L_p * cfg.d, cfg.d, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    for (const char* part : {"q", "k", "v", "o"}) add_dense(p, layer(l, part), cfg.d, cfg.d, rng);
    p.add(layer(l, "norm1.gain"), Tensor<float>({cfg.d}, 1.0f));
    p.add(layer(l, "norm1.bias"), Tensor<float>({cfg.d}));
    add_dense(p, layer(l, "ff1"), cfg.d, cfg.ff, rng);
    add_dense(p, layer(l, "ff2"), cfg.ff, cfg.d, rng);
    p.add(layer(l, "norm2.gain"), Tensor<float>({cfg.d}, 1.0f));
    p.add(layer(l, "norm2.bias"), Tensor<float>({cfg.d}));
  }
  add_dense(p, "head", cfg.d, cfg.vocab, rng);
  return m;
}

AttentionMask build_mask(std::size_t P, std::size_t L_p, std::size_t L_u, std::size_t L_latent) {
  const std::size_t L = P * L_p;
  if (L_latent > L || L_u > L) throw ConfigError("build_mask: L_latent and L_u must not exceed L");
  AttentionMask m;
  m.rows = L_latent;
  m.cols = P + L_u;
  m.allowed.assign(m.rows * m.cols, 0);
  for (std::size_t i = 0; i < L_latent; ++i) {
    const std::size_t q = L - L_latent + i;
    for (std::size_t j = 0; j < P; ++j)
      if (j * L_p + L_p <= q) m.allowed[i * m.cols + j] = 1;
    for (std::size_t u = 0; u < L_u; ++u)
      if (L - L_u + u + 1 <= q) m.allowed[i * m.cols + P + u] = 1;
  }
  return m;
}

AttentionMask causal_mask(std::size_t n) {
  AttentionMask m;
  m.rows = m.cols = n;
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
  return m;
}

template <class Real>
Var embed_inputs(Tape<Real>& tape, const Bound<Real>& p, const GptConfig& cfg, const Batch& batch) {
  if (batch.channels != cfg.channels) throw DimensionError("embed_inputs: batch channel count differs from the model");
  if (batch.length != cfg.L) throw DimensionError("embed_inputs: window length differs from L");
  if (batch.subjects.size() != batch.items) throw DimensionError("embed_inputs: one subject id per item required");
  const std::size_t n = batch.items * batch.channels, L = batch.length;
  for (int t : batch.tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab)
      throw IndexError("embed_inputs: token " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab));
  Var v = lookup(tape, p, "token", batch.tokens, {n, L});

  std::vector<int> ids(n * L);
  for (std::size_t s = 0; s < n; ++s) std::fill_n(ids.begin() + static_cast<std::ptrdiff_t>(s * L), L, static_cast<int>(s % batch.channels));
  v = ops::add(tape, v, lookup(tape, p, "channel", ids, {n, L}));

  std::vector<int> pos(L);
  std::iota(pos.begin(), pos.end(), 0);
  v = ops::add(tape, v, lookup(tape, p, "position", pos, {L}));

  const bool any_subject = std::any_of(batch.subjects.begin(), batch.subjects.end(), [](int s) { return s >= 0; });
  if (any_subject) {
    if (!p.contains("emb.subject"))
      throw ConfigError("embed_inputs: subject ids given but the model has no subject table (stale ids?)");
    const std::size_t rows = tape.value(p["emb.subject"]).dim(0);
    // Items without a subject gather a zero row appended below the table.
    for (std::size_t s = 0; s < n; ++s) {
      const int sub = batch.subjects[s / batch.channels];
      if (sub >= 0 && static_cast<std::size_t>(sub) >= rows)
        throw IndexError("embed_inputs: subject " + std::to_string(sub) + " outside table of " + std::to_string(rows));
    }
    const bool mixed = std::any_of(batch.subjects.begin(), batch.subjects.end(), [](int s) { return s < 0; });
    Var sv;
    if (!mixed) {
      for (std::size_t s = 0; s < n; ++s)
        std::fill_n(ids.begin() + static_cast<std::ptrdiff_t>(s * L), L, batch.subjects[s / batch.channels]);
      sv = lookup(tape, p, "subject", ids, {n, L});
    } else {
      // Rows of absent subjects are masked to zero after the lookup.
      Tensor<Real> keep({n, L, cfg.d});
      for (std::size_t s = 0; s < n; ++s) {
        const int sub = batch.subjects[s / batch.channels];
        std::fill_n(ids.begin() + static_cast<std::ptrdiff_t>(s * L), L, std::max(sub, 0));
        if (sub >= 0) std::fill_n(keep.data() + s * L * cfg.d, L * cfg.d, Real(1));
      }
      sv = ops::mul(tape, lookup(tape, p, "subject", ids, {n, L}), tape.constant(std::move(keep)));
    }
    v = ops::add(tape, v, sv);
  }
  return v;
}

template <class Real>
Var patch(Tape<Real>& tape, Var v, std::size_t L_p, Var w, Var b) {
  const auto& shape = tape.value(v).shape;
  if (shape.size() != 3) throw DimensionError("patch: expected [sequences, L, d]");
  if (L_p == 0 || shape[1] % L_p != 0)
    throw DimensionError("patch: L=" + std::to_string(shape[1]) + " is not divisible by L_p=" + std::to_string(L_p));
  Var flat = ops::reshape(tape, v, {shape[0], shape[1] / L_p, L_p * shape[2]});
  return ops::dense(tape, flat, w, b);
}

template <class Real>
Graph<Real> forward_graph(Tape<Real>& tape, const Bound<Real>& p, const GptConfig& cfg, const Batch& batch,
                          bool training, Rng* rng) {
  Graph<Real> g;
  g.embeddings = embed_inputs(tape, p, cfg, batch);
  const std::size_t P = cfg.patches();
  Var ps = patch(tape, g.embeddings, cfg.L_p, p["patch.w"], p["patch.b"]);
  Var keys = ps;
  if (cfg.L_u > 0) keys = ops::concat_axis1(tape, ps, ops::slice_axis1(tape, g.embeddings, cfg.L - cfg.L_u, cfg.L_u));
  Var x = ops::slice_axis1(tape, g.embeddings, cfg.L - cfg.L_latent, cfg.L_latent);
  const AttentionMask first = build_mask(P, cfg.L_p, cfg.L_u, cfg.L_latent);
  const AttentionMask later = causal_mask(cfg.L_latent);
  x = block(tape, p, cfg, 0, x, keys, first, training, rng);
  for (std::size_t l = 1; l < cfg.layers; ++l) x = block(tape, p, cfg, l, x, x, later, training, rng);
  g.decoder = x;
  g.logits = dense(tape, p, x, "head");
  return g;
}

template <class Real>
Var sequence_loss(Tape<Real>& tape, Var logits, std::span<const int> targets, std::size_t L_loss) {
  const auto& shape = tape.value(logits).shape;
  if (shape.size() != 3) throw DimensionError("sequence_loss: expected [sequences, L_latent, K]");
  const std::size_t n = shape[0], lat = shape[1];
  if (L_loss == 0 || L_loss > lat) throw DimensionError("sequence_loss: L_loss must lie in [1, L_latent]");
  if (targets.size() != n * lat) throw DimensionError("sequence_loss: one target per latent position required");
  std::vector<int> scored;
  scored.reserve(n * L_loss);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t q = lat - L_loss; q < lat; ++q) scored.push_back(targets[s * lat + q]);
  Var tail = ops::slice_axis1(tape, logits, lat - L_loss, L_loss);
  return ops::cross_entropy(tape, tail, scored);
}

Output forward(const GptModel& model, const Batch& batch) {
  Tape<float> tape;
  Bound<float> p(tape, model.params);
  const Graph<float> g = forward_graph(tape, p, model.config, batch, false, nullptr);
  return {tape.value(g.decoder), tape.value(g.logits)};
}

std::string metrics_line(const EpochMetrics& m) {
  return "epoch=" + std::to_string(m.epoch) + " train_loss=" + format_real(m.train_loss) +
         " train_accuracy=" + format_real(m.train_accuracy) + " val_loss=" + format_real(m.val_loss) +
         " val_accuracy=" + format_real(m.val_accuracy);
}

TrainResult train_gpt(const TokenCorpus& corpus, const GptConfig& cfg_in, Rng& rng,
                      const std::function<void(const EpochMetrics&)>& on_epoch) {
  GptConfig cfg = cfg_in;
  if (cfg.vocab == 0) cfg.vocab = corpus.vocab;
  if (cfg.channels == 0) cfg.channels = corpus.channels();
  if (cfg.vocab != corpus.vocab)
    throw ConfigError("train_gpt: configured K*=" + std::to_string(cfg.vocab) + " but corpus has " +
                      std::to_string(corpus.vocab));
  for (const auto& s : corpus.sessions)
    if (cfg.subjects > 0 && (s.subject_id < 0 || static_cast<std::size_t>(s.subject_id) >= cfg.subjects))
      throw ConfigError("train_gpt: session " + s.session_id + " has subject id outside [0, subjects)");
  GptModel model = init_model(cfg, rng);
  const Schedule sch{cfg.batch, cfg.epochs, cfg.steps_per_epoch, cfg.lr, cfg.val_fraction, cfg.clip_norm};
  return run_training(std::move(model), corpus, sch, cfg.subjects > 0, rng, on_epoch);
}

FineTuneConfig fine_tune_config_from(const Config& cfg, FineTuneConfig c) {
  c.batch = count_key(cfg, "finetune.batch", c.batch);
  c.epochs = count_key(cfg, "finetune.epochs", c.epochs);
  c.steps_per_epoch = count_key(cfg, "finetune.steps_per_epoch", c.steps_per_epoch);
  c.new_subjects = count_key(cfg, "finetune.new_subjects", c.new_subjects);
  c.lr = cfg.real("finetune.lr", c.lr);
  c.val_fraction = cfg.real("finetune.val_fraction", c.val_fraction);
  if (c.batch == 0) throw ConfigError("finetune.batch must be positive");
  if (!(c.lr > 0)) throw ConfigError("finetune.lr must be positive");
  return c;
}

TrainResult fine_tune(const GptModel& model, const TokenCorpus& corpus, const FineTuneConfig& ft, Rng& rng,
                      const std::function<void(const EpochMetrics&)>& on_epoch) {
  GptModel tuned;
  tuned.config = model.config;
  tuned.config.subjects = ft.new_subjects;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const std::string& name = model.params.name(i);
    if (name.rfind("emb.subject", 0) == 0 || name.rfind("map.subject", 0) == 0) continue;
    const bool frozen = name.rfind("emb.token", 0) == 0 || name.rfind("emb.channel", 0) == 0 ||
                        name.rfind("emb.position", 0) == 0 || name.rfind("map.token", 0) == 0 ||
                        name.rfind("map.channel", 0) == 0 || name.rfind("map.position", 0) == 0;
    tuned.params.add(name, model.params.at(i), !frozen);
  }
  if (ft.new_subjects > 0) {
    for (const auto& s : corpus.sessions)
      if (s.subject_id < 0 || static_cast<std::size_t>(s.subject_id) >= ft.new_subjects)
        throw ConfigError("fine_tune: session " + s.session_id + " has subject id " + std::to_string(s.subject_id) +
                          " outside the new table of " + std::to_string(ft.new_subjects));
    tuned.params.add("emb.subject", normal_tensor<float>({ft.new_subjects, model.config.d_s}, 0.1, rng));
    if (model.config.d_s != model.config.d) add_dense(tuned.params, "map.subject", model.config.d_s, model.config.d, rng);
  }
  const Schedule sch{ft.batch, ft.epochs, ft.steps_per_epoch, ft.lr, ft.val_fraction, model.config.clip_norm};
  return run_training(std::move(tuned), corpus, sch, ft.new_subjects > 0, rng, on_epoch);
}

Tensor<float> extract_features(const GptModel& model, const Batch& trials) {
  if (trials.length < model.config.L) throw InputError("extract_features: trial window shorter than L");
  Batch b = trials;
  if (b.length > model.config.L) {
    // Keep the first L samples of each trial.
    b.length = model.config.L;
    b.tokens.clear();
    for (std::size_t i = 0; i < trials.items; ++i)
      for (std::size_t c = 0; c < trials.channels; ++c)
        for (std::size_t t = 0; t < b.length; ++t) b.tokens.push_back(trials.token(i, c, t));
  }
  const std::size_t d = model.config.d, C = b.channels;
  Tensor<float> out({b.items, C * d});
  constexpr std::size_t chunk = 32;
  for (std::size_t off = 0; off < b.items; off += chunk) {
    const std::size_t n = std::min(chunk, b.items - off);
    Batch part;
    part.items = n;
    part.channels = C;
    part.length = b.length;
    part.tokens.assign(b.tokens.begin() + static_cast<std::ptrdiff_t>(off * C * b.length),
                       b.tokens.begin() + static_cast<std::ptrdiff_t>((off + n) * C * b.length));
    part.subjects.assign(b.subjects.begin() + static_cast<std::ptrdiff_t>(off),
                         b.subjects.begin() + static_cast<std::ptrdiff_t>(off + n));
    Tape<float> tape;
    Bound<float> p(tape, model.params);
    const Graph<float> g = forward_graph(tape, p, model.config, part, false, nullptr);
    const Tensor<float>& mean = tape.value(ops::mean_axis1(tape, g.decoder));
    std::copy(mean.values.begin(), mean.values.end(), out.data() + off * C * d);
  }
  return out;
}

EpochMetrics evaluate_corpus(const GptModel& model, const TokenCorpus& corpus) {
  const Split all = make_windows(corpus, model.config, 0.0);
  EpochMetrics m = evaluate_windows(model, corpus, all.train);
  m.val_loss = m.train_loss;
  m.val_accuracy = m.train_accuracy;
  return m;
}

void save_model(const std::filesystem::path& path, const GptModel& model) {
  const auto& c = model.config;
  io::Checkpoint ck;
  ck.meta = {{"kind", "gpt"},
             {"vocab", std::to_string(c.vocab)},
             {"channels", std::to_string(c.channels)},
             {"subjects", std::to_string(c.subjects)},
             {"d_z", std::to_string(c.d_z)},
             {"d_c", std::to_string(c.d_c)},
             {"d_p", std::to_string(c.d_p)},
             {"d_s", std::to_string(c.d_s)},
             {"d", std::to_string(c.d)},
             {"L", std::to_string(c.L)},
             {"L_p", std::to_string(c.L_p)},
             {"L_u", std::to_string(c.L_u)},
             {"L_latent", std::to_string(c.L_latent)},
             {"L_loss", std::to_string(c.L_loss)},
             {"heads", std::to_string(c.heads)},
             {"layers", std::to_string(c.layers)},
             {"ff", std::to_string(c.ff)},
             {"leaky_slope", format_real(c.leaky_slope)},
             {"dropout", format_real(c.dropout)},
             {"batch", std::to_string(c.batch)},
             {"epochs", std::to_string(c.epochs)},
             {"lr", format_real(c.lr)},
             {"steps_per_epoch", std::to_string(c.steps_per_epoch)},
             {"val_fraction", format_real(c.val_fraction)},
             {"clip_norm", format_real(c.clip_norm)}};
  ck.params = model.params;
  io::write_checkpoint(path, ck);
}

GptModel load_model(const std::filesystem::path& path) {
  io::Checkpoint ck = io::read_checkpoint(path);
  if (ck.meta["kind"] != "gpt") throw FormatError(path.string() + ": not a gpt checkpoint");
  Config meta;
  for (const auto& [k, v] : ck.meta)
    if (k != "kind" && k != "vocab" && k != "channels") meta.set("gpt." + k, v);
  GptModel m;
  try {
    GptConfig base;
    base.vocab = std::stoul(ck.meta.at("vocab"));
    base.channels = std::stoul(ck.meta.at("channels"));
    m.config = config_from(meta, base);
    m.config.validate();
  } catch (const std::exception& e) {
    throw FormatError(path.string() + ": bad gpt metadata: " + e.what());
  }
  Rng rng(0);
  const GptModel shape = init_model(m.config, rng);
  for (std::size_t i = 0; i < shape.params.size(); ++i) {
    const std::string& name = shape.params.name(i);
    if (!ck.params.contains(name)) throw FormatError(path.string() + ": missing block " + name);
    Tensor<float> t = ck.params.get(name);
    if (t.shape != shape.params.at(i).shape)
      throw FormatError(path.string() + ": block " + name + " has shape " + shape_str(t.shape));
    m.params.add(name, std::move(t));
  }
  return m;
}

#define MEG_GPT_INSTANTIATE(Real)                                                                              \
  template Var embed_inputs<Real>(Tape<Real>&, const Bound<Real>&, const GptConfig&, const Batch&);            \
  template Var patch<Real>(Tape<Real>&, Var, std::size_t, Var, Var);                                           \
  template Graph<Real> forward_graph<Real>(Tape<Real>&, const Bound<Real>&, const GptConfig&, const Batch&, bool, \
                                           Rng*);                                                              \
  template Var sequence_loss<Real>(Tape<Real>&, Var, std::span<const int>, std::size_t);

MEG_GPT_INSTANTIATE(float)
MEG_GPT_INSTANTIATE(double)

}  // namespace meg::gpt
