// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--only 1,4,9] [--out DIR] [--megpipe PATH] [--pipeline SCRIPT]

#include <algorithm>
#include <boost/math/distributions/binomial.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "meg/analysis.hpp"
#include "meg/baselines.hpp"
#include "meg/bursts.hpp"
#include "meg/decoding.hpp"
#include "meg/grad_check.hpp"
#include "meg/io.hpp"
#include "meg/ops.hpp"
#include "meg/report.hpp"
#include "meg/sampler.hpp"
#include "meg/synth.hpp"
#include "meg/tokeniser.hpp"

namespace fs = std::filesystem;
using namespace meg;
namespace tk = meg::tokeniser;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path out;
  std::string megpipe;
  std::string pipeline;
  std::optional<tk::TokeniserModel> desk_tokeniser;  // from criterion 1, reused by 10
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void note(const std::string& s) { std::cout << "  .. " << s << std::endl; }

// Desk synthetic corpus plus a separately seeded held-out set.
synth::SynthSpec desk_spec(std::uint64_t seed) {
  synth::SynthSpec s;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------

Outcome tokeniser_fidelity(Context& ctx) {
  Stopwatch clock;
  const auto train = synth::synth_dataset(desk_spec(1));
  auto hs = desk_spec(99);
  hs.subjects = 2;
  hs.duration_s = 30;
  const auto held = synth::synth_dataset(hs);
  const auto cfg = tk::desk_config();
  Rng rng(7);
  auto model = tk::train_tokeniser(train.signals, cfg, {cfg.epochs, cfg.temperature}, rng, nullptr,
                                   [&](const tk::EpochLog& e) {
                                     note("tokeniser epoch " + std::to_string(e.epoch) + " kappa " + fmt("%.2f", e.kappa) +
                                          " loss " + fmt("%.4f", e.loss) + " t=" + fmt("%.0fs", clock.seconds()));
                                   });
  const double train_s = clock.seconds();
  const auto rec = tk::detokenise(tk::tokenise(held.signals, model), model, held.signals.fs());
  const double p = tk::pve(held.signals, rec).value_or(0.0);
  ctx.desk_tokeniser = std::move(model);
  return {p >= 95.0 && train_s < 1800.0, "held-out PVE " + fmt("%.2f%%", p) + " (floor 95%), K*=" +
                                             std::to_string(ctx.desk_tokeniser->vocab_star) + ", training " +
                                             fmt("%.0f s", train_s) + " (limit 1800 s)"};
}

// ---------------------------------------------------------------------------

namespace ops = meg::ops;

Var project(Tape<double>& tape, Var y, Rng& rng) {
  auto w = uniform_tensor<double>(tape.value(y).shape, 1.0, rng);
  return ops::sum(tape, ops::mul(tape, y, tape.constant(w)));
}

// Every differentiable op composed on random small shapes.
double layer_suite_error(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + uniform_index(rng, 3), l = 2 + uniform_index(rng, 3), d = 2 * (1 + uniform_index(rng, 2)),
                    k = 2 + uniform_index(rng, 4);
  ParamSet<double> p;
  p.add("x", uniform_tensor<double>({n, l, d}, 1.0, rng));
  p.add("w", uniform_tensor<double>({d, d}, 0.7, rng));
  p.add("b", uniform_tensor<double>({d}, 0.5, rng));
  p.add("g", uniform_tensor<double>({d}, 1.0, rng));
  p.add("beta", uniform_tensor<double>({d}, 0.5, rng));
  p.add("table", uniform_tensor<double>({k, d}, 1.0, rng));
  p.add("wx", uniform_tensor<double>({d, 3 * d}, 0.5, rng));
  p.add("wh", uniform_tensor<double>({d, 3 * d}, 0.5, rng));
  p.add("bg", uniform_tensor<double>({3 * d}, 0.5, rng));
  p.add("h0", uniform_tensor<double>({n, d}, 0.5, rng));
  p.add("head", uniform_tensor<double>({d, k}, 0.7, rng));
  p.add("taps", uniform_tensor<double>({d}, 1.0, rng));
  std::vector<int> ids(n * l), targets(n * l);
  for (auto& i : ids) i = static_cast<int>(uniform_index(rng, k));
  for (auto& i : targets) i = static_cast<int>(uniform_index(rng, k));
  std::vector<std::uint8_t> mask(l * l);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j <= i; ++j) mask[i * l + j] = 1;
  const std::uint64_t proj_seed = rng();
  auto fn = [&](Tape<double>& t, const Bound<double>& b) {
    Rng r(proj_seed);
    Var e = ops::add(t, b["x"], ops::embedding(t, b["table"], ids, {n, l}));
    Var h = ops::gru_sequence(t, e, b["wx"], b["wh"], b["bg"], b["h0"]);
    Var a = ops::attention(t, ops::dense(t, h, b["w"], b["b"]), h, e, mask, d / 2);
    Var ln = ops::layer_norm(t, ops::add(t, a, h), b["g"], b["beta"], 1e-5);
    Var act = ops::leaky_relu(t, ops::sub(t, ln, e), 0.1);
    Var cat = ops::concat_axis1(t, act, ops::slice_axis1(t, e, 1, l - 1));
    Var pooled = ops::mean_axis1(t, cat);
    Var logits = ops::matmul(t, ln, b["head"]);
    Var ce = ops::cross_entropy(t, logits, targets);
    Var sm = project(t, ops::softmax_t(t, logits, 0.7), r);
    Var dec = ops::tap_sum(t, ops::reshape(t, act, {n, l, d}), b["taps"]);
    Var err = ops::mse(t, dec, t.constant(uniform_tensor<double>({n, l}, 1.0, r)));
    Var tot = ops::add(t, ops::add(t, ce, sm), ops::add(t, err, project(t, pooled, r)));
    return ops::add(t, tot, ops::scale(t, ops::mean(t, ops::mul(t, a, a)), 0.3));
  };
  return grad_check_params(fn, p, 1e-6).max_error;
}

double tokeniser_grad_error(double kappa, std::uint64_t seed) {
  tk::TokeniserConfig cfg;
  cfg.vocab = 6;
  cfg.d_token = 4;
  cfg.units = 5;
  cfg.seq_len = 8;
  Rng rng(seed);
  const auto m = tk::init_model(cfg, rng);
  auto params = m.params.cast<double>();
  const auto x = uniform_tensor<double>({2, 8}, 1.0, rng);
  return grad_check_params(
             [&](Tape<double>& tape, const Bound<double>& p) {
               return tk::reconstruction_loss(tape, p, x, kappa, cfg.temperature);
             },
             params)
      .max_error;
}

gpt::GptConfig tiny_gpt(std::size_t layers) {
  gpt::GptConfig c;
  c.vocab = 5;
  c.channels = 2;
  c.d_z = c.d_c = c.d_p = c.d_s = c.d = 8;
  c.ff = 8;
  c.L = 8;
  c.L_p = 2;
  c.L_u = 2;
  c.L_latent = 4;
  c.L_loss = 2;
  c.heads = 2;
  c.layers = layers;
  c.dropout = 0.0;
  return c;
}

gpt::Batch random_batch(const gpt::GptConfig& c, std::size_t items, Rng& rng, int subject) {
  gpt::Batch b;
  b.items = items;
  b.channels = c.channels;
  b.length = c.L;
  for (std::size_t i = 0; i < items * c.channels * c.L; ++i) b.tokens.push_back(static_cast<int>(uniform_index(rng, c.vocab)));
  b.subjects.assign(items, subject);
  return b;
}

double gpt_grad_error(const gpt::GptConfig& c, int subject, std::uint64_t seed) {
  Rng rng(seed);
  const auto m = gpt::init_model(c, rng);
  auto params = m.params.cast<double>();
  const auto b = random_batch(c, 2, rng, subject);
  std::vector<int> targets(2 * c.channels * c.L_latent);
  for (auto& t : targets) t = static_cast<int>(uniform_index(rng, c.vocab));
  return grad_check_params(
             [&](Tape<double>& tape, const Bound<double>& p) {
               const auto g = gpt::forward_graph(tape, p, c, b, false, nullptr);
               return gpt::sequence_loss(tape, g.logits, targets, c.L_loss);
             },
             params)
      .max_error;
}

Outcome gradient_integrity(Context&) {
  Stopwatch clock;
  double layers = 0;
  for (std::uint64_t s = 0; s < 20; ++s) layers = std::max(layers, layer_suite_error(5000 + s));
  const double tok = std::max(tokeniser_grad_error(1.0, 11), tokeniser_grad_error(0.4, 12));
  auto two = tiny_gpt(2);
  two.subjects = 2;
  two.d_z = 5;
  two.d_s = 3;
  two.ff = 6;
  const double g = std::max(gpt_grad_error(tiny_gpt(1), -1, 13), gpt_grad_error(two, 1, 14));
  const double worst = std::max({layers, tok, g}), secs = clock.seconds();
  return {worst < 1e-4 && secs < 120.0, "max relative error layers " + fmt("%.2e", layers) + ", tokeniser " +
                                            fmt("%.2e", tok) + ", gpt " + fmt("%.2e", g) + " (limit 1e-4); " +
                                            fmt("%.1f s", secs) + " (limit 120 s)"};
}

// ---------------------------------------------------------------------------

Outcome causality(Context&) {
  auto c = tiny_gpt(2);
  c.L = 12;
  c.L_p = 4;
  c.L_u = 3;
  c.L_latent = 5;
  c.L_loss = 2;
  c.subjects = 2;
  std::size_t compared = 0, changed = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(300 + seed);
    const auto m = gpt::init_model(c, rng);
    const auto b = random_batch(c, 1, rng, static_cast<int>(seed % 2));
    const auto base = gpt::forward(m, b).logits;
    for (std::size_t ch = 0; ch < c.channels; ++ch)
      for (std::size_t t = 0; t < c.L; ++t)
        for (int alt = 0; alt < static_cast<int>(c.vocab); ++alt) {
          if (alt == b.tokens[ch * c.L + t]) continue;
          auto b2 = b;
          b2.tokens[ch * c.L + t] = alt;
          const auto out = gpt::forward(m, b2).logits;
          for (std::size_t s = 0; s < c.channels; ++s)
            for (std::size_t i = 0; i < c.L_latent; ++i) {
              if (c.L - c.L_latent + i >= t) continue;  // token t is not in latent i's future
              for (std::size_t k = 0; k < c.vocab; ++k) {
                const std::size_t at = (s * c.L_latent + i) * c.vocab + k;
                ++compared;
                if (out.values[at] != base.values[at]) ++changed;
              }
            }
        }
  }
  return {changed == 0 && compared > 0,
          std::to_string(changed) + " of " + std::to_string(compared) + " future-perturbed logits changed (tolerance 0)"};
}

// ---------------------------------------------------------------------------

TokenCorpus token_corpus(const std::vector<std::vector<std::vector<std::uint16_t>>>& sessions, std::uint16_t vocab) {
  TokenCorpus corpus;
  corpus.vocab = vocab;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    TokenTrace tr;
    tr.session_id = "s" + std::to_string(s);
    tr.vocab = vocab;
    tr.channels = sessions[s].size();
    tr.samples = sessions[s][0].size();
    for (const auto& ch : sessions[s]) tr.labels.insert(tr.labels.end(), ch.begin(), ch.end());
    corpus.sessions.push_back(tr);
  }
  return corpus;
}

gpt::GptConfig learner_config() {
  gpt::GptConfig c;
  c.d_z = c.d_c = c.d_p = c.d_s = c.d = 16;
  c.ff = 32;
  c.L = 12;
  c.L_p = 4;
  c.L_u = 3;
  c.L_latent = 5;
  c.L_loss = 5;
  c.heads = 2;
  c.layers = 1;
  c.dropout = 0.0;
  c.batch = 16;
  c.lr = 1e-2;
  c.clip_norm = 1.0;
  return c;
}

Outcome next_token_learning(Context&) {
  Stopwatch clock;
  std::vector<std::vector<std::vector<std::uint16_t>>> cyc(2, std::vector<std::vector<std::uint16_t>>(2));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t t = 0; t < 600; ++t) cyc[s][c].push_back(static_cast<std::uint16_t>((t + c + s) % 4));
  auto cfg = learner_config();
  cfg.epochs = 4;
  cfg.steps_per_epoch = 60;
  Rng rng(41);
  const auto periodic = gpt::train_gpt(token_corpus(cyc, 4), cfg, rng).model;
  const auto pm = gpt::evaluate_corpus(periodic, token_corpus(cyc, 4));
  const double periodic_s = clock.seconds();

  // Quantised AR(2) series: 8 equiprobable bins of a smooth process.
  const std::uint16_t K = 8;
  baselines::ArChannel ar{{1.6, -0.8}, 1.0};
  std::vector<std::vector<std::vector<std::uint16_t>>> arq(3, std::vector<std::vector<std::uint16_t>>(2));
  std::vector<double> all;
  std::vector<std::vector<std::vector<double>>> raw(3, std::vector<std::vector<double>>(2));
  for (auto& sess : raw)
    for (auto& ch : sess) {
      ch = baselines::generate_ar(ar, 4000, rng).values;
      all.insert(all.end(), ch.begin(), ch.end());
    }
  std::sort(all.begin(), all.end());
  std::vector<double> edges;
  for (std::size_t q = 1; q < K; ++q) edges.push_back(all[q * all.size() / K]);
  std::vector<std::size_t> counts(K, 0);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < 2; ++c)
      for (double v : raw[s][c]) {
        const auto bin = static_cast<std::uint16_t>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
        arq[s][c].push_back(bin);
        ++counts[bin];
      }
  const double marginal =
      static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(all.size());
  cfg.epochs = 4;
  cfg.steps_per_epoch = 80;
  const auto ar_result = gpt::train_gpt(token_corpus(arq, K), cfg, rng);
  const double val = ar_result.history.back().val_accuracy, total_s = clock.seconds();
  const bool pass = pm.train_accuracy > 0.95 && pm.train_loss < 0.1 && periodic_s < 300 && val >= marginal + 0.05;
  return {pass, "period-4 accuracy " + fmt("%.3f", pm.train_accuracy) + " (> 0.95), loss " + fmt("%.4f", pm.train_loss) +
                    " (< 0.1), " + fmt("%.0f s", periodic_s) + " (limit 300 s); AR tokens validation accuracy " +
                    fmt("%.3f", val) + " vs marginal " + fmt("%.3f", marginal) + " (margin 0.05); total " +
                    fmt("%.0f s", total_s)};
}

// ---------------------------------------------------------------------------

analysis::Psd channel_mean_psd(const Recording& rec) {
  auto psd = analysis::welch_psd(rec);
  std::vector<double> avg(psd.freqs.size(), 0.0);
  for (const auto& ch : psd.power)
    for (std::size_t f = 0; f < avg.size(); ++f) avg[f] += ch[f] / static_cast<double>(psd.power.size());
  psd.power = {avg};
  return psd;
}

double argmax_hz(const analysis::Psd& psd) {
  const auto& p = psd.power[0];
  return psd.freqs[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())];
}

Outcome generation_fidelity(Context& ctx) {
  Stopwatch clock;
  synth::SynthSpec spec;
  spec.seed = 5;
  spec.subjects = 2;
  spec.channels = 4;
  spec.base_hz = 10;
  spec.step_hz = 0;
  // Narrowband: strong, mostly-on 10 Hz rhythm over the 1/f floor.
  spec.burst_amplitude = 6;
  spec.mean_on_s = 2;
  spec.mean_off_s = 0.5;
  const auto d = synth::synth_dataset(spec);
  auto tc = tk::desk_config();
  tc.steps_per_epoch = 100;
  Rng rng(51);
  const auto tok = tk::train_tokeniser(d.signals, tc, {tc.epochs, tc.temperature}, rng);
  note("10 Hz tokeniser K*=" + std::to_string(tok.vocab_star) + " t=" + fmt("%.0fs", clock.seconds()));
  const auto corpus = tk::tokenise(d.signals, tok);
  auto gc = gpt::desk_config();
  gc.vocab = corpus.vocab;
  gc.channels = spec.channels;
  const auto model = gpt::train_gpt(corpus, gc, rng, [&](const gpt::EpochMetrics& m) {
                       note(gpt::metrics_line(m) + " t=" + fmt("%.0fs", clock.seconds()));
                     }).model;
  sampler::GenerationConfig g;
  g.seed = 52;
  const auto gen = sampler::generate(model, g, tok, sampler::token_frequencies(corpus));
  const auto gen_psd = channel_mean_psd(gen.signal);

  const auto ar = baselines::fit_ar(d.signals, 80);
  Rng ar_rng(53);
  const auto ar_rec = baselines::generate_ar(ar, g.steps, d.signals.fs(), ar_rng);
  const auto ar_psd = channel_mean_psd(ar_rec);
  std::vector<const Recording*> real_ptrs;
  for (const auto& r : d.signals.sessions) real_ptrs.push_back(&r);
  auto real_psd = analysis::welch_psd(real_ptrs);

  std::ofstream tsv(ctx.out / "generation_psd.tsv");
  tsv << "freq_hz\treal\tgenerated\tar\n";
  for (std::size_t f = 0; f < gen_psd.freqs.size(); ++f) {
    double real = 0;
    for (const auto& ch : real_psd.power) real += ch[f] / static_cast<double>(real_psd.power.size());
    tsv << format_real(gen_psd.freqs[f]) << '\t' << format_real(real) << '\t' << format_real(gen_psd.power[0][f]) << '\t'
        << format_real(ar_psd.power[0][f]) << '\n';
  }
  const double peak = argmax_hz(gen_psd), ar_peak = argmax_hz(ar_psd);
  return {peak >= 8.0 && peak <= 12.0, "generated PSD argmax " + fmt("%.2f Hz", peak) + " (band 8-12 Hz); AR(80) argmax " +
                                           fmt("%.2f Hz", ar_peak) + "; PSDs in " + (ctx.out / "generation_psd.tsv").string() +
                                           "; " + fmt("%.0f s", clock.seconds())};
}

// ---------------------------------------------------------------------------

Outcome nucleus_sampling(Context&) {
  Rng rng(61);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t K = 2 + uniform_index(rng, 60);
    std::vector<double> p(K);
    double z = 0;
    for (auto& v : p) z += v = -std::log(1.0 - uniform01(rng));
    for (auto& v : p) v /= z;
    const double top_p = 0.05 + 0.94 * uniform01(rng);
    const auto set = sampler::nucleus(p, top_p);
    std::vector<bool> in(K, false);
    double mass = 0, kept_min = 1, dropped_max = 0;
    for (auto i : set) in[i] = true, mass += p[i], kept_min = std::min(kept_min, p[i]);
    for (std::size_t i = 0; i < K; ++i)
      if (!in[i]) dropped_max = std::max(dropped_max, p[i]);
    // Mass exceeds top_p, kept labels dominate dropped ones, and removing the
    // smallest kept label would fall short.
    if (!(mass > top_p) || !(kept_min > dropped_max) || mass - kept_min > top_p + 1e-12) ++violations;
  }
  const std::vector<double> p{0.35, 0.25, 0.15, 0.1, 0.08, 0.04, 0.02, 0.01};
  const double top_p = 0.9;
  const auto kept = sampler::nucleus(p, top_p);
  double mass = 0;
  for (auto i : kept) mass += p[i];
  const std::size_t n = 100000;
  std::vector<std::size_t> counts(p.size(), 0);
  for (std::size_t i = 0; i < n; ++i) ++counts[sampler::nucleus_sample(p, top_p, rng)];
  double worst_z = 0;
  std::size_t outside = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const bool in = std::find(kept.begin(), kept.end(), k) != kept.end();
    if (!in) {
      outside += counts[k];
      continue;
    }
    const double q = p[k] / mass, sd = std::sqrt(static_cast<double>(n) * q * (1 - q));
    worst_z = std::max(worst_z, std::abs(static_cast<double>(counts[k]) - q * static_cast<double>(n)) / sd);
  }
  return {violations == 0 && worst_z <= 3.0 && outside == 0,
          std::to_string(violations) + " minimality violations over 1000 distributions; worst frequency deviation " +
              fmt("%.2f sigma", worst_z) + " (limit 3) at 1e5 draws; " + std::to_string(outside) +
              " draws outside the nucleus"};
}

// ---------------------------------------------------------------------------

Outcome ar_recovery(Context&) {
  baselines::ArChannel truth{{0.5, -0.25}, 1.0};
  Rng rng(71);
  const auto s = baselines::generate_ar(truth, 100000, rng);
  const std::vector<float> x(s.values.begin(), s.values.end());
  const auto fit = baselines::fit_ar(x, 2);
  const double e1 = std::abs(fit.coeffs[0] - 0.5), e2 = std::abs(fit.coeffs[1] + 0.25);
  return {e1 <= 0.02 && e2 <= 0.02, "a1 " + fmt("%.4f", fit.coeffs[0]) + " (0.5), a2 " + fmt("%.4f", fit.coeffs[1]) +
                                        " (-0.25), tolerance 0.02"};
}

// ---------------------------------------------------------------------------

double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
  std::vector<std::size_t> p(cost.size());
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double c = 0;
    for (std::size_t i = 0; i < p.size(); ++i) c += cost[i][p[i]];
    best = std::min(best, c);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

Outcome burst_analysis(Context&) {
  // Hungarian against exhaustive search.
  Rng rng(81);
  std::size_t mismatches = 0;
  for (std::size_t S = 1; S <= 4; ++S)
    for (int trial = 0; trial < 250; ++trial) {
      std::vector<std::vector<double>> cost(S, std::vector<double>(S));
      for (auto& row : cost)
        for (auto& v : row) v = trial % 5 == 0 ? std::floor(4 * uniform01(rng)) : uniform01(rng);  // ties too
      const auto a = bursts::hungarian(cost);
      double c = 0;
      for (std::size_t i = 0; i < S; ++i) c += cost[i][a[i]];
      if (std::abs(c - brute_force_assignment(cost)) > 1e-12) ++mismatches;
    }

  synth::SynthSpec spec;
  spec.seed = 2;
  spec.subjects = 1;
  spec.channels = 1;
  spec.duration_s = 600;
  spec.base_hz = 10;
  spec.burst_amplitude = 5;
  const auto d = synth::synth_dataset(spec);
  const auto emb = bursts::tde_embed(d.signals.sessions[0].channel(0), bursts::symmetric_lags(4));
  const auto& truth = d.burst_paths[0][0];

  std::size_t runs = 0, non_monotone = 0;
  double worst_drop = 0;
  auto check = [&](const bursts::HmmFit& f) {
    ++runs;
    for (std::size_t i = 1; i < f.log_likelihood.size(); ++i) {
      const double drop = f.log_likelihood[i - 1] - f.log_likelihood[i];
      worst_drop = std::max(worst_drop, drop);
      if (drop > 1e-8) ++non_monotone;
    }
  };
  std::optional<bursts::HmmFit> two;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng r(seed);
    auto f = bursts::hmm_fit(emb, 2, 100, 1e-7, r);
    check(f);
    if (!two) two = std::move(f);
  }
  {
    Rng r(4);
    check(bursts::hmm_fit(emb, 3, 60, 0.0, r));
  }

  const auto tc = bursts::infer_states(two->model, emb);
  std::vector<std::vector<double>> overlap(2, std::vector<double>(2, 0.0));
  for (std::size_t t = 0; t < tc.viterbi.size(); ++t) overlap[truth[t + emb.offset]][static_cast<std::size_t>(tc.viterbi[t])] -= 1;
  const auto match = bursts::hungarian(overlap);  // match[true state] = inferred state
  const double acc = -(overlap[0][match[0]] + overlap[1][match[1]]) / static_cast<double>(tc.viterbi.size());
  const auto stats = bursts::burst_stats(tc.viterbi, 2, spec.fs);
  const double life = stats[match[1]].mean_lifetime_s.value_or(0.0);
  const double expected = spec.mean_on_s, rel = std::abs(life - expected) / expected;
  const bool pass = mismatches == 0 && non_monotone == 0 && acc > 0.9 && rel <= 0.10;
  return {pass, "Hungarian vs brute force " + std::to_string(mismatches) + " mismatches over 1000 problems (S<=4); " +
                    "EM log-likelihood non-monotone in " + std::to_string(non_monotone) + " of " + std::to_string(runs) +
                    " runs (worst drop " + fmt("%.1e", worst_drop) + ", tolerance 1e-8); frame accuracy " +
                    fmt("%.3f", acc) + " (> 0.9); burst lifetime " + fmt("%.3f s", life) + " vs dwell " +
                    fmt("%.3f s", expected) + " (" + fmt("%.1f%%", 100 * rel) + ", limit 10%)"};
}

// ---------------------------------------------------------------------------

// Asymptotic Kolmogorov tail with Stephens' small-sample correction.
double ks_uniform_pvalue(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double D = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    D = std::max({D, (static_cast<double>(i) + 1) / n - x[i], x[i] - static_cast<double>(i) / n});
  const double lam = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * D;
  double q = 0;
  for (int k = 1; k <= 100; ++k) q += 2 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lam * lam);
  return std::clamp(q, 0.0, 1.0);
}

Outcome fingerprinting(Context&) {
  synth::SynthSpec spec;
  spec.seed = 91;
  spec.sessions = 2;
  spec.duration_s = 60;
  const auto d = synth::synth_dataset(spec);
  std::vector<std::vector<double>> first, second;
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    first.push_back(analysis::fingerprint({&d.signals.sessions[2 * s]}, analysis::FingerprintKind::spectral).values);
    second.push_back(analysis::fingerprint({&d.signals.sessions[2 * s + 1]}, analysis::FingerprintKind::spectral).values);
  }
  const double top1 = analysis::topk_identify(first, second, 1).accuracy;
  Rng rng(92);
  const double p_self = analysis::permutation_pvalue(first, first, 10000, rng);

  // Fully random null: independent real and generated fingerprints.
  std::vector<double> ps;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::vector<double>> a(10, std::vector<double>(20)), b = a;
    for (auto& v : a)
      for (auto& x : v) x = normal(rng);
    for (auto& v : b)
      for (auto& x : v) x = normal(rng);
    ps.push_back(analysis::permutation_pvalue(a, b, 999, rng));
  }
  const double ks = ks_uniform_pvalue(ps);
  return {top1 == 1.0 && p_self <= 0.01 && ks > 0.01,
          "top-1 across sessions " + fmt("%.2f", top1) + " (10 subjects, need 1.0); consistency p with gen = real " +
              fmt("%.4f", p_self) + " (<= 0.01); KS p of 200 null p-values " + fmt("%.3f", ks) + " (> 0.01)"};
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd rows(const Eigen::MatrixXd& X, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), X.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

template <class T>
std::vector<T> pick(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

Outcome decoding_harness(Context& ctx) {
  Stopwatch clock;
  namespace dc = meg::decoding;
  synth::SynthSpec spec;
  spec.seed = 101;
  spec.subjects = 4;
  spec.sessions = 2;
  spec.channels = 4;
  spec.duration_s = 90;
  spec.task = true;
  spec.task_profile.trials_per_class = 20;
  const auto d = synth::synth_dataset(spec);
  const std::size_t window = gpt::desk_config().L;
  const auto ep = dc::epoch(d.signals, d.events, window);
  const Eigen::MatrixXd X = dc::baseline_features(ep);
  const auto split = dc::split_protocol(ep.subjects, ep.sessions, dc::SplitMode::within_subject, 3);
  const auto clf = dc::train_classifier(rows(X, split.train), pick(ep.labels, split.train));
  const auto ev = dc::evaluate(clf, rows(X, split.test), pick(ep.labels, split.test), pick(ep.sessions, split.test));
  const auto n_test = static_cast<double>(split.test.size());
  const double correct = std::round(ev.accuracy * n_test);
  const double p_binom = correct > 0 ? boost::math::cdf(boost::math::complement(
                                           boost::math::binomial_distribution<double>(n_test, 0.25), correct - 1))
                                     : 1.0;

  // Zero-shot features from a GptModel on tokenised task data.
  if (!ctx.desk_tokeniser) {
    auto tc = tk::desk_config();
    tc.steps_per_epoch = 60;
    Rng r(102);
    ctx.desk_tokeniser = tk::train_tokeniser(d.signals, tc, {tc.epochs, tc.temperature}, r);
  }
  const auto tokens = tk::tokenise(d.signals, *ctx.desk_tokeniser);
  auto gc = gpt::desk_config();
  gc.vocab = tokens.vocab;
  gc.channels = spec.channels;
  gc.subjects = spec.subjects;
  gc.epochs = 2;
  gc.steps_per_epoch = 40;
  Rng rng(103);
  const auto pre = gpt::train_gpt(tokens, gc, rng).model;
  const auto te = dc::token_epochs(tokens, d.events, gc.L);
  const Eigen::MatrixXd F = dc::model_features(pre, te);
  const bool shape_ok = F.rows() == static_cast<Eigen::Index>(te.labels.size()) &&
                        F.cols() == static_cast<Eigen::Index>(gc.channels * gc.d) && F.allFinite();

  // Split structure: 18 subjects x 6 sessions plus one held out.
  std::vector<int> subj, sess;
  int session = 0;
  for (int s = 0; s < 19; ++s)
    for (int k = 0; k < 6; ++k, ++session)
      for (int t = 0; t < 3; ++t) subj.push_back(s), sess.push_back(session);
  const auto within = dc::split_protocol(subj, sess, dc::SplitMode::within_subject, 18);
  const auto fresh = dc::split_protocol(subj, sess, dc::SplitMode::new_subject, 18);
  bool split_ok = within.train.size() == 18u * 5 * 3 && within.test.size() == 18u * 3 && fresh.train == within.train &&
                  fresh.test.size() == 6u * 3;
  for (auto i : within.test) split_ok = split_ok && sess[i] % 6 == 5 && subj[i] != 18;
  for (auto i : fresh.test) split_ok = split_ok && subj[i] == 18;

  // Canary: no trial or session is shared, and shuffled labels stay at chance.
  std::set<int> train_sessions;
  for (auto i : split.train) train_sessions.insert(ep.sessions[i]);
  bool canary = true;
  for (auto i : split.test) canary = canary && !train_sessions.count(ep.sessions[i]);
  auto shuffled = ep.labels;
  Rng sh(104);
  shuffle(shuffled.begin(), shuffled.end(), sh);
  const auto cclf = dc::train_classifier(rows(X, split.train), pick(shuffled, split.train));
  const auto cev = dc::evaluate(cclf, rows(X, split.test), pick(shuffled, split.test), pick(ep.sessions, split.test));
  const double canary_z = std::abs(cev.accuracy - 0.25) / std::sqrt(0.25 * 0.75 / n_test);
  canary = canary && canary_z <= 3.0;

  gpt::FineTuneConfig ft;
  ft.epochs = 1;
  ft.steps_per_epoch = 10;
  ft.lr = 1e-3;
  const auto post = gpt::fine_tune(pre, tokens, ft, rng).model;
  bool frozen = true;
  for (std::size_t i = 0; i < pre.params.size(); ++i) {
    const auto& name = pre.params.name(i);
    const bool table = name.rfind("emb.token", 0) == 0 || name.rfind("emb.channel", 0) == 0 ||
                       name.rfind("emb.position", 0) == 0 || name.rfind("map.token", 0) == 0 ||
                       name.rfind("map.channel", 0) == 0 || name.rfind("map.position", 0) == 0;
    if (table) frozen = frozen && post.params.contains(name) && post.params.get(name).values == pre.params.get(name).values;
  }
  frozen = frozen && post.params.get("head.w").values != pre.params.get("head.w").values;

  const bool pass = p_binom < 0.01 && shape_ok && split_ok && canary && frozen;
  return {pass, "baseline accuracy " + fmt("%.3f", ev.accuracy) + " on " + std::to_string(split.test.size()) +
                    " trials, binomial p " + fmt("%.2e", p_binom) + " (< 0.01); features " + std::to_string(F.rows()) +
                    "x" + std::to_string(F.cols()) + (shape_ok ? " ok" : " WRONG") + "; split " +
                    (split_ok ? "ok" : "WRONG") + "; canary " + (canary ? "ok" : "FAILED") + " (shuffled " +
                    fmt("%.3f", cev.accuracy) + "); fine-tune tables " + (frozen ? "frozen" : "CHANGED") + "; " +
                    fmt("%.0f s", clock.seconds())};
}

// ---------------------------------------------------------------------------

std::map<std::string, std::vector<unsigned char>> snapshot(const fs::path& root) {
  std::map<std::string, std::vector<unsigned char>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_bytes(e.path());
  return out;
}

Outcome reproducibility(Context& ctx) {
  if (ctx.megpipe.empty() || ctx.pipeline.empty()) return {false, "megpipe or pipeline script not given"};
  std::vector<double> secs;
  std::vector<fs::path> dirs{ctx.out / "pipeline_a", ctx.out / "pipeline_b"};
  for (const auto& dir : dirs) {
    fs::remove_all(dir);
    Stopwatch clock;
    const std::string cmd = "sh '" + ctx.pipeline + "' '" + ctx.megpipe + "' '" + dir.string() + "' > '" + dir.string() +
                            ".log' 2>&1";
    const int rc = std::system(cmd.c_str());
    secs.push_back(clock.seconds());
    note("pipeline run " + dir.filename().string() + " exit " + std::to_string(rc) + " " + fmt("%.0fs", secs.back()));
    if (rc != 0) return {false, "pipeline failed, see " + dir.string() + ".log"};
  }
  const auto a = snapshot(dirs[0]), b = snapshot(dirs[1]);
  std::size_t differ = 0;
  std::string first;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) {
      if (!differ) first = name;
      ++differ;
    }
  }
  differ += b.size() > a.size() ? b.size() - a.size() : 0;
  const double worst = std::max(secs[0], secs[1]);
  return {differ == 0 && worst < 3600.0, std::to_string(a.size()) + " files, " + std::to_string(differ) + " differ" +
                                             (differ ? " (first " + first + ")" : "") + "; slowest run " +
                                             fmt("%.0f s", worst) + " (limit 3600 s)"};
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  ctx.out = fs::current_path() / "acceptance_out";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << a << " needs a value\n";
        std::exit(1);
      }
      return argv[++i];
    };
    if (a == "--only") {
      std::stringstream ss(value());
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else if (a == "--out") {
      ctx.out = value();
    } else if (a == "--megpipe") {
      ctx.megpipe = value();
    } else if (a == "--pipeline") {
      ctx.pipeline = value();
    } else {
      std::cerr << "unknown argument " << a << '\n';
      return 1;
    }
  }
  fs::create_directories(ctx.out);
  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"tokeniser fidelity", tokeniser_fidelity}, {"gradient integrity", gradient_integrity},
      {"causality", causality},                   {"next-token learning", next_token_learning},
      {"generation fidelity", generation_fidelity}, {"nucleus sampling", nucleus_sampling},
      {"AR baseline", ar_recovery},               {"burst analysis", burst_analysis},
      {"fingerprinting", fingerprinting},         {"decoding harness", decoding_harness},
      {"end-to-end reproducibility", reproducibility}};
  std::vector<std::string> lines;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    std::cout << "criterion " << id << " (" << criteria[i].first << ") running" << std::endl;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    lines.push_back("criterion " + std::to_string(id) + " " + (o.pass ? "PASS" : "FAIL") + " " + criteria[i].first + ": " +
                    o.detail);
    std::cout << lines.back() << std::endl;
  }
  std::cout << "\nsummary\n";
  std::ofstream summary(ctx.out / "summary.txt");
  for (const auto& l : lines) {
    std::cout << l << '\n';
    summary << l << '\n';
  }
  return all ? 0 : 1;
}
