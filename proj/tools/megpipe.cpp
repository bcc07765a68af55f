#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "meg/analysis.hpp"
#include "meg/baselines.hpp"
#include "meg/config.hpp"
#include "meg/decoding.hpp"
#include "meg/errors.hpp"
#include "meg/gpt.hpp"
#include "meg/io.hpp"
#include "meg/report.hpp"
#include "meg/sampler.hpp"
#include "meg/synth.hpp"
#include "meg/tokeniser.hpp"

namespace fs = std::filesystem;
using namespace meg;

namespace {

struct Run {
  std::string command;
  Config config;
  std::uint64_t seed = 1;
  fs::path out;
  EvalReport report;
};

std::set<std::string> keys(std::initializer_list<std::string> base, const std::vector<std::string>& extra = {}) {
  std::set<std::string> out(base);
  out.insert(extra.begin(), extra.end());
  out.insert("seed");
  return out;
}

fs::path input(const Run& run, const std::string& key) {
  const std::string v = run.config.str(key, "");
  if (v.empty()) throw ConfigError(run.command + " needs " + key);
  return v;
}

std::size_t count(const Config& cfg, const std::string& key, std::size_t fallback) {
  const long long v = cfg.integer(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

// Mean PSD over channels and sessions.
analysis::Psd mean_psd(const SignalSet& set) {
  std::vector<const Recording*> ptrs;
  for (const auto& r : set.sessions) ptrs.push_back(&r);
  analysis::Psd psd = analysis::welch_psd(ptrs);
  std::vector<double> avg(psd.freqs.size(), 0.0);
  for (const auto& ch : psd.power)
    for (std::size_t f = 0; f < avg.size(); ++f) avg[f] += ch[f] / static_cast<double>(psd.channels());
  psd.power = {avg};
  return psd;
}

double peak_hz(const analysis::Psd& psd, double fmin) {
  std::size_t best = 0;
  for (std::size_t f = 0; f < psd.freqs.size(); ++f)
    if (psd.freqs[f] >= fmin && (psd.freqs[best] < fmin || psd.power[0][f] > psd.power[0][best])) best = f;
  return psd.freqs[best];
}

// --- synth-data --------------------------------------------------------------

void synth_data(Run& run) {
  const Config& c = run.config;
  c.allow(keys({"synth.subjects", "synth.sessions", "synth.channels", "synth.duration", "synth.fs", "synth.exponent",
                "synth.base_hz", "synth.step_hz", "synth.burst_amplitude", "synth.mean_on", "synth.mean_off",
                "synth.task", "synth.trials_per_class", "synth.evoked_amplitude", "synth.evoked_duration"}));
  synth::SynthSpec s;
  s.subjects = count(c, "synth.subjects", s.subjects);
  s.sessions = count(c, "synth.sessions", s.sessions);
  s.channels = count(c, "synth.channels", s.channels);
  s.duration_s = c.real("synth.duration", s.duration_s);
  s.fs = static_cast<std::uint32_t>(count(c, "synth.fs", s.fs));
  s.aperiodic_exponent = c.real("synth.exponent", s.aperiodic_exponent);
  s.base_hz = c.real("synth.base_hz", s.base_hz);
  s.step_hz = c.real("synth.step_hz", s.step_hz);
  s.burst_amplitude = c.real("synth.burst_amplitude", s.burst_amplitude);
  s.mean_on_s = c.real("synth.mean_on", s.mean_on_s);
  s.mean_off_s = c.real("synth.mean_off", s.mean_off_s);
  s.task = c.flag("synth.task", s.task);
  s.task_profile.trials_per_class = count(c, "synth.trials_per_class", s.task_profile.trials_per_class);
  s.task_profile.evoked_amplitude = c.real("synth.evoked_amplitude", s.task_profile.evoked_amplitude);
  s.task_profile.evoked_duration_s = c.real("synth.evoked_duration", s.task_profile.evoked_duration_s);
  if (s.subjects == 0 || s.sessions == 0 || s.channels == 0) throw ConfigError("synth sizes must be positive");
  s.seed = run.seed;
  const auto data = synth::synth_dataset(s);
  io::write_signal_set(run.out / "signals", data.signals);
  if (s.task) io::write_events(run.out / "events.tsv", data.events);
  std::ostringstream paths;
  paths << "session\tchannel\tonset\tlength\n";
  for (std::size_t r = 0; r < data.burst_paths.size(); ++r)
    for (std::size_t ch = 0; ch < data.burst_paths[r].size(); ++ch) {
      const auto& p = data.burst_paths[r][ch];
      for (std::size_t t = 0; t < p.size();) {
        if (!p[t]) {
          ++t;
          continue;
        }
        std::size_t e = t;
        while (e < p.size() && p[e]) ++e;
        paths << r << '\t' << ch << '\t' << t << '\t' << e - t << '\n';
        t = e;
      }
    }
  write_text(run.out / "bursts.tsv", paths.str());
  run.report.put("synth", "sessions", static_cast<double>(data.signals.sessions.size()));
  run.report.put("synth", "channels", static_cast<double>(s.channels));
  run.report.put("synth", "samples", static_cast<double>(data.signals.total_samples()));
  run.report.put("synth", "events", static_cast<double>(data.events.size()));
}

// --- tokeniser ---------------------------------------------------------------

void train_tokeniser(Run& run) {
  run.config.allow(keys({"input.signals"}, tokeniser::config_keys()));
  const auto cfg = tokeniser::config_from(run.config, tokeniser::desk_config());
  const SignalSet signals = io::read_signal_set(input(run, "input.signals"));
  Rng rng(run.seed);
  std::ofstream log(run.out / "metrics.log", std::ios::binary);
  const auto model = tokeniser::train_tokeniser(signals, cfg, {cfg.epochs, cfg.temperature}, rng, nullptr,
                                                [&](const tokeniser::EpochLog& e) {
                                                  log << "epoch=" << e.epoch << " kappa=" << format_real(e.kappa)
                                                      << " train_loss=" << format_real(e.loss) << '\n';
                                                  log.flush();
                                                });
  tokeniser::save_model(run.out / "tokeniser.megck", model);
  const auto recon = tokeniser::detokenise(tokeniser::tokenise(signals, model), model, signals.fs());
  run.report.put("tokeniser", "vocab", static_cast<double>(cfg.vocab));
  run.report.put("tokeniser", "vocab_star", static_cast<double>(model.vocab_star));
  if (const auto p = tokeniser::pve(signals, recon)) run.report.put("tokeniser", "train_pve", *p);
}

void tokenise(Run& run) {
  run.config.allow(keys({"input.signals", "input.tokeniser"}));
  const auto model = tokeniser::load_model(input(run, "input.tokeniser"));
  const SignalSet signals = io::read_signal_set(input(run, "input.signals"));
  const auto tokens = tokeniser::tokenise(signals, model);
  io::write_token_corpus(run.out / "tokens", tokens);
  run.report.put("tokenise", "sessions", static_cast<double>(tokens.sessions.size()));
  run.report.put("tokenise", "vocab", static_cast<double>(tokens.vocab));
}

void detokenise(Run& run) {
  run.config.allow(keys({"input.tokens", "input.tokeniser", "detokenise.fs"}));
  const auto model = tokeniser::load_model(input(run, "input.tokeniser"));
  const auto tokens = io::read_token_corpus(input(run, "input.tokens"));
  const auto fs_hz = static_cast<std::uint32_t>(count(run.config, "detokenise.fs", 250));
  const SignalSet signals = tokeniser::detokenise(tokens, model, fs_hz);
  io::write_signal_set(run.out / "signals", signals);
  run.report.put("detokenise", "sessions", static_cast<double>(signals.sessions.size()));
}

// --- gpt ---------------------------------------------------------------------

void metrics_sink(std::ofstream& log, const gpt::EpochMetrics& m) {
  log << gpt::metrics_line(m) << '\n';
  log.flush();
}

void put_history(EvalReport& report, const std::string& section, const std::vector<gpt::EpochMetrics>& h) {
  if (h.empty()) return;
  report.put(section, "epochs", static_cast<double>(h.size()));
  report.put(section, "train_loss", h.back().train_loss);
  report.put(section, "train_accuracy", h.back().train_accuracy);
  report.put(section, "val_loss", h.back().val_loss);
  report.put(section, "val_accuracy", h.back().val_accuracy);
}

void train_gpt(Run& run) {
  run.config.allow(keys({"input.tokens"}, gpt::config_keys()));
  auto cfg = gpt::config_from(run.config, gpt::desk_config());
  const auto corpus = io::read_token_corpus(input(run, "input.tokens"));
  Rng rng(run.seed);
  std::ofstream log(run.out / "metrics.log", std::ios::binary);
  const auto result = gpt::train_gpt(corpus, cfg, rng, [&](const gpt::EpochMetrics& m) { metrics_sink(log, m); });
  gpt::save_model(run.out / "gpt.megck", result.model);
  run.report.put("gpt", "parameters", static_cast<double>(result.model.params.count()));
  put_history(run.report, "gpt", result.history);
}

void fine_tune(Run& run) {
  run.config.allow(keys({"input.tokens", "input.gpt", "finetune.batch", "finetune.epochs", "finetune.lr",
                         "finetune.steps_per_epoch", "finetune.val_fraction", "finetune.new_subjects"}));
  const auto ft = gpt::fine_tune_config_from(run.config, {});
  const auto model = gpt::load_model(input(run, "input.gpt"));
  const auto corpus = io::read_token_corpus(input(run, "input.tokens"));
  Rng rng(run.seed);
  std::ofstream log(run.out / "metrics.log", std::ios::binary);
  const auto result = gpt::fine_tune(model, corpus, ft, rng, [&](const gpt::EpochMetrics& m) { metrics_sink(log, m); });
  gpt::save_model(run.out / "gpt.megck", result.model);
  put_history(run.report, "finetune", result.history);
}

// --- generation ----------------------------------------------------------------

void generate(Run& run) {
  run.config.allow(keys({"input.gpt", "input.tokeniser", "input.tokens", "input.signals", "generate.top_p",
                         "generate.steps", "generate.subject", "generate.all_subjects", "generate.fs",
                         "generate.ar_order"}));
  const Config& c = run.config;
  const auto model = gpt::load_model(input(run, "input.gpt"));
  const auto tok = tokeniser::load_model(input(run, "input.tokeniser"));
  const auto corpus = io::read_token_corpus(input(run, "input.tokens"));
  const auto freqs = sampler::token_frequencies(corpus);
  sampler::GenerationConfig g;
  g.top_p = c.real("generate.top_p", g.top_p);
  g.steps = count(c, "generate.steps", g.steps);
  g.seed = run.seed;
  const auto fs_hz = static_cast<std::uint32_t>(count(c, "generate.fs", 250));
  std::vector<int> subjects{static_cast<int>(c.integer("generate.subject", -1))};
  if (c.flag("generate.all_subjects", false)) {
    if (!model.has_subjects()) throw ConfigError("generate.all_subjects needs a model with a subject table");
    subjects.clear();
    for (std::size_t s = 0; s < model.config.subjects; ++s) subjects.push_back(static_cast<int>(s));
  }
  SignalSet generated;
  TokenCorpus tokens;
  tokens.vocab = static_cast<std::uint16_t>(model.config.vocab);
  for (int s : subjects) {
    g.subject_id = s;
    g.seed = run.seed + static_cast<std::uint64_t>(s + 1);
    auto out = sampler::generate(model, g, tok, freqs, fs_hz);
    const std::string id = s < 0 ? "gen" : "gen-sub-" + std::to_string(s);
    out.signal.session_id = id;
    out.signal.subject_id = std::max(s, 0);
    TokenTrace tr;
    tr.session_id = id;
    tr.subject_id = std::max(s, 0);
    tr.vocab = tokens.vocab;
    tr.channels = out.tokens.size();
    tr.samples = g.steps;
    for (const auto& ch : out.tokens) tr.labels.insert(tr.labels.end(), ch.begin(), ch.end());
    tokens.sessions.push_back(std::move(tr));
    generated.sessions.push_back(std::move(out.signal));
  }
  io::write_signal_set(run.out / "generated", generated);
  io::write_token_corpus(run.out / "generated_tokens", tokens);
  const auto gen_psd = mean_psd(generated);
  run.report.put("generate", "sessions", static_cast<double>(generated.sessions.size()));
  run.report.put("generate", "steps", static_cast<double>(g.steps));
  run.report.put("generate", "peak_hz", peak_hz(gen_psd, 1.0));

  std::ostringstream psd;
  const std::size_t order = count(c, "generate.ar_order", 0);
  if (order > 0) {
    const SignalSet real = io::read_signal_set(input(run, "input.signals"));
    const auto ar = baselines::fit_ar(real, order);
    Rng rng(run.seed);
    std::vector<std::string> warnings;
    SignalSet ar_set;
    ar_set.sessions.push_back(baselines::generate_ar(ar, g.steps, real.fs(), rng, &warnings));
    ar_set.sessions.back().session_id = "ar";
    io::write_signal_set(run.out / "ar", ar_set);
    write_text(run.out / "ar_coefficients.tsv", baselines::coefficient_table(ar));
    const auto ar_psd = mean_psd(ar_set);
    run.report.put("ar", "order", static_cast<double>(order));
    run.report.put("ar", "unstable_channels", static_cast<double>(warnings.size()));
    run.report.put("ar", "peak_hz", peak_hz(ar_psd, 1.0));
    psd << "freq_hz\tgenerated\tar\n";
    for (std::size_t f = 0; f < gen_psd.freqs.size(); ++f)
      psd << format_real(gen_psd.freqs[f]) << '\t' << format_real(gen_psd.power[0][f]) << '\t'
          << format_real(f < ar_psd.freqs.size() ? ar_psd.power[0][f] : 0.0) << '\n';
  } else {
    psd << "freq_hz\tgenerated\n";
    for (std::size_t f = 0; f < gen_psd.freqs.size(); ++f)
      psd << format_real(gen_psd.freqs[f]) << '\t' << format_real(gen_psd.power[0][f]) << '\n';
  }
  write_text(run.out / "psd.tsv", psd.str());
}

// --- decoding ------------------------------------------------------------------

void extract_features(Run& run) {
  run.config.allow(keys({"input.gpt", "input.tokens", "input.events", "decode.window"}));
  const auto model = gpt::load_model(input(run, "input.gpt"));
  const auto corpus = io::read_token_corpus(input(run, "input.tokens"));
  const auto events = io::read_events(input(run, "input.events"));
  const std::size_t window = count(run.config, "decode.window", model.config.L);
  if (window != model.config.L) throw ConfigError("decode.window must equal the model's L");
  const auto epochs = decoding::token_epochs(corpus, events, window);
  const auto X = decoding::model_features(model, epochs);
  std::ostringstream out;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    out << epochs.sessions[k] << '\t' << epochs.subjects[k] << '\t' << epochs.labels[k];
    for (Eigen::Index j = 0; j < X.cols(); ++j) out << '\t' << format_real(X(i, j));
    out << '\n';
  }
  write_text(run.out / "features.tsv", out.str());
  run.report.put("features", "trials", static_cast<double>(X.rows()));
  run.report.put("features", "dimension", static_cast<double>(X.cols()));
  run.report.put("features", "dropped", static_cast<double>(epochs.dropped));
}

struct FeatureTable {
  Eigen::MatrixXd X;
  std::vector<int> sessions, subjects, labels;
};

FeatureTable read_features(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read " + path.string());
  FeatureTable t;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    std::istringstream in(line);
    int s, sub, lab;
    if (!(in >> s >> sub >> lab)) throw FormatError(path.string() + ":" + std::to_string(n) + ": malformed row");
    std::vector<double> r;
    for (double v; in >> v;) r.push_back(v);
    if (!rows.empty() && r.size() != rows.front().size())
      throw FormatError(path.string() + ":" + std::to_string(n) + ": row length differs");
    rows.push_back(std::move(r));
    t.sessions.push_back(s);
    t.subjects.push_back(sub);
    t.labels.push_back(lab);
  }
  if (rows.empty()) throw InputError(path.string() + " holds no trials");
  t.X.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return t;
}

Eigen::MatrixXd rows_of(const Eigen::MatrixXd& X, const std::vector<std::size_t>& idx) {
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

void decode(Run& run) {
  run.config.allow(keys({"input.signals", "input.events", "input.features", "decode.features", "decode.window",
                         "decode.mode", "decode.held_out_subject", "decode.lambda", "decode.max_iter"}));
  const Config& c = run.config;
  FeatureTable t;
  const std::string source = c.str("decode.features", "baseline");
  if (source == "baseline") {
    const SignalSet signals = io::read_signal_set(input(run, "input.signals"));
    const auto events = io::read_events(input(run, "input.events"));
    const auto epochs = decoding::epoch(signals, events, count(c, "decode.window", 40));
    t.X = decoding::baseline_features(epochs);
    t.sessions = epochs.sessions;
    t.subjects = epochs.subjects;
    t.labels = epochs.labels;
    run.report.put("decode", "dropped", static_cast<double>(epochs.dropped));
  } else if (source == "file") {
    t = read_features(input(run, "input.features"));
  } else {
    throw ConfigError("decode.features must be 'baseline' or 'file'");
  }
  const auto mode = decoding::parse_mode(c.str("decode.mode", "within"));
  const int held = static_cast<int>(c.integer("decode.held_out_subject", *std::max_element(t.subjects.begin(), t.subjects.end())));
  const auto split = decoding::split_protocol(t.subjects, t.sessions, mode, held);
  if (split.train.empty() || split.test.empty()) throw InputError("decode: empty train or test set");
  const auto clf = decoding::train_classifier(rows_of(t.X, split.train), pick(t.labels, split.train),
                                              c.real("decode.lambda", 1.0), count(c, "decode.max_iter", 500));
  const auto ev = decoding::evaluate(clf, rows_of(t.X, split.test), pick(t.labels, split.test), pick(t.sessions, split.test));
  run.report.put("decode", "features", source);
  run.report.put("decode", "mode", mode == decoding::SplitMode::within_subject ? "within-subject" : "new-subject");
  run.report.put("decode", "train_trials", static_cast<double>(split.train.size()));
  run.report.put("decode", "test_trials", static_cast<double>(split.test.size()));
  run.report.put("decode", "iterations", static_cast<double>(clf.objective.size() - 1));
  run.report.put("decode", "accuracy", ev.accuracy);
  run.report.put("decode", "session_mean", ev.session_mean);
  run.report.put("decode", "ci95", std::vector<double>{ev.ci_low, ev.ci_high});
  for (std::size_t k = 0; k < ev.confusion.size(); ++k) {
    std::vector<double> row(ev.confusion[k].begin(), ev.confusion[k].end());
    run.report.put("confusion", "true_" + std::to_string(k), row);
  }
  for (const auto& s : ev.per_session) run.report.put("sessions", "session_" + std::to_string(s.session), s.accuracy);
}

// --- evaluate ------------------------------------------------------------------

std::map<int, std::vector<const Recording*>> by_subject(const SignalSet& set) {
  std::map<int, std::vector<const Recording*>> out;
  for (const auto& r : set.sessions) out[r.subject_id].push_back(&r);
  return out;
}

void evaluate(Run& run) {
  run.config.allow(keys({"input.signals", "input.reconstruction", "input.generated", "evaluate.kind",
                         "evaluate.permutations"}));
  const Config& c = run.config;
  const SignalSet real = io::read_signal_set(input(run, "input.signals"));
  const auto real_psd = mean_psd(real);
  run.report.put("real", "sessions", static_cast<double>(real.sessions.size()));
  run.report.put("real", "peak_hz", peak_hz(real_psd, 1.0));
  bool any = false;
  if (c.has("input.reconstruction")) {
    any = true;
    const SignalSet recon = io::read_signal_set(input(run, "input.reconstruction"));
    const auto p = tokeniser::pve(real, recon);
    if (!p) throw InputError("evaluate: PVE undefined for a zero-variance signal");
    run.report.put("reconstruction", "pve", *p);
  }
  if (c.has("input.generated")) {
    any = true;
    const SignalSet gen = io::read_signal_set(input(run, "input.generated"));
    const auto gen_psd = mean_psd(gen);
    run.report.put("generated", "sessions", static_cast<double>(gen.sessions.size()));
    run.report.put("generated", "peak_hz", peak_hz(gen_psd, 1.0));
    const auto bands = analysis::canonical_bands();
    const auto rb = analysis::band_power_maps(real_psd, bands), gb = analysis::band_power_maps(gen_psd, bands);
    for (std::size_t b = 0; b < bands.size(); ++b)
      run.report.put("band_power", bands[b].name, std::vector<double>{rb[b][0], gb[b][0]});
    const auto rs = by_subject(real), gs = by_subject(gen);
    std::vector<std::vector<double>> rf, gf;
    const auto kind = analysis::parse_kind(c.str("evaluate.kind", "spectral"));
    for (const auto& [subject, sessions] : gs) {
      const auto it = rs.find(subject);
      if (it == rs.end()) continue;
      rf.push_back(analysis::fingerprint(it->second, kind).values);
      gf.push_back(analysis::fingerprint(sessions, kind).values);
    }
    run.report.put("fingerprint", "kind", analysis::kind_name(kind));
    run.report.put("fingerprint", "subjects", static_cast<double>(rf.size()));
    if (rf.size() >= 2) run.report.put("fingerprint", "top1", analysis::topk_identify(rf, gf, 1).accuracy);
    if (rf.size() >= 3) {
      if (const auto s = analysis::consistency_score(rf, gf)) {
        Rng rng(run.seed);
        run.report.put("fingerprint", "consistency", *s);
        run.report.put("fingerprint", "p_value",
                       analysis::permutation_pvalue(rf, gf, count(c, "evaluate.permutations", 10000), rng));
      }
    }
  }
  if (!any) throw ConfigError("evaluate needs input.reconstruction or input.generated");
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return 1;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MEG tokeniser / GPT pipeline"};
  app.require_subcommand(1);
  Run run;
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;
  const std::map<std::string, void (*)(Run&)> commands{
      {"synth-data", synth_data}, {"train-tokeniser", train_tokeniser}, {"tokenise", tokenise},
      {"detokenise", detokenise}, {"train-gpt", train_gpt},           {"generate", generate},
      {"fine-tune", fine_tune},   {"extract-features", extract_features}, {"decode", decode},
      {"evaluate", evaluate}};
  for (const auto& [name, fn] : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--seed", run.seed, "random seed (overrides the config's seed key)");
    sub->add_option("--out", run.out, "output directory")->required();
    sub->add_option("--threads", threads, "OpenMP threads (0 = runtime default)");
    sub->add_option("--set", overrides, "extra key=value entries");
    sub->callback([&run, name]() { run.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (!config_path.empty()) run.config = Config::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      run.config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (app.get_subcommand(run.command)->count("--seed") == 0)
      run.seed = static_cast<std::uint64_t>(run.config.integer("seed", 1));
    if (threads > 0) omp_set_num_threads(threads);
    fs::create_directories(run.out);
    commands.at(run.command)(run);
    run.report.write(run.out / "report.txt");
    std::cout << run.report.text();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << run.command << ": " << e.what() << '\n';
    return exit_code(e);
  }
}
