// Command-line front end: masker synthesis, mixing, synthetic corpora,
// training, calibration, baselines and reports.
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "selcal/audio.hpp"
#include "selcal/baselines.hpp"
#include "selcal/calibrator.hpp"
#include "selcal/config.hpp"
#include "selcal/dataset.hpp"
#include "selcal/error.hpp"
#include "selcal/fileio.hpp"
#include "selcal/metrics.hpp"
#include "selcal/model.hpp"
#include "selcal/noise.hpp"
#include "selcal/report_io.hpp"
#include "selcal/rng.hpp"
#include "selcal/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace selcal;

namespace {

std::vector<fs::path> wav_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

fs::path manifest_path(const fs::path& corpus) {
  return fs::is_directory(corpus) ? corpus / "corpus.json" : corpus;
}

std::string snr_tag(double snr) {
  std::ostringstream s;
  s << (snr < 0 ? "m" : "p") << format_double(std::abs(snr));
  return s.str();
}

// --- make-masker ------------------------------------------------------------

struct MaskerArgs {
  std::string corpus, out;
  int ltas_count = 500, env_count = 500;
  double duration = 60.0;
  std::uint64_t seed = 0;
};

void cmd_make_masker(const MaskerArgs& a) {
  const auto files = wav_files(a.corpus);
  if (a.ltas_count < 1 || a.env_count < 1) throw ValidationError("--ltas-count and --env-count must be >= 1");
  const std::size_t need = static_cast<std::size_t>(a.ltas_count) + static_cast<std::size_t>(a.env_count);
  if (files.size() < need) {
    throw ValidationError("corpus has " + std::to_string(files.size()) + " WAVE files, need " +
                          std::to_string(a.ltas_count) + " + " + std::to_string(a.env_count));
  }
  if (!(a.duration > 0.0)) throw ValidationError("--duration must be positive");
  std::vector<std::size_t> order(files.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(a.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Audio> ltas_set, env_set;
  json ltas_list = json::array(), env_list = json::array();
  for (std::size_t i = 0; i < need; ++i) {
    const fs::path& f = files[order[i]];
    const bool for_ltas = i < static_cast<std::size_t>(a.ltas_count);
    (for_ltas ? ltas_set : env_set).push_back(read_wav(f));
    (for_ltas ? ltas_list : env_list).push_back(f.filename().string());
  }
  NoiseRecipe recipe{compute_ltas(ltas_set), build_average_envelope(env_set), a.seed};
  const Audio masker = synthesize_masker(recipe, a.duration);
  json sidecar = {{"seed", a.seed},         {"duration_s", a.duration},
                  {"fft_size", recipe.ltas.fft_size}, {"ltas_files", ltas_list},
                  {"envelope_files", env_list}};
  fs::path sidecar_path = a.out;
  sidecar_path += ".recipe.json";
  write_wav(a.out, masker, WavEncoding::Float32);
  write_text_atomically(sidecar_path, sidecar.dump(2) + "\n");
  std::cerr << "masker: " << a.out << " (" << masker.duration_s() << " s)\n";
}

// --- mix --------------------------------------------------------------------

struct MixArgs {
  std::string speech, masker, out, mode = "random-one";
  double snr_lo = -18.0, snr_hi = 10.0, snr_step = 1.0, min_dur = 3.0, max_dur = 10.0;
  std::uint64_t seed = 0;
};

void cmd_mix(const MixArgs& a) {
  if (!(a.snr_step > 0.0) || a.snr_lo > a.snr_hi) throw ValidationError("bad SNR range");
  std::vector<double> levels;
  for (int i = 0;; ++i) {
    const double snr = a.snr_lo + i * a.snr_step;
    if (snr > a.snr_hi + 1e-9) break;
    levels.push_back(std::round(snr * 1e6) / 1e6);
  }
  const Audio masker = read_wav(a.masker);
  std::vector<std::pair<fs::path, Audio>> speech;
  for (const auto& f : wav_files(a.speech)) {
    Audio s = read_wav(f);
    const double d = s.duration_s();
    if (d < a.min_dur || d > a.max_dur) {
      std::cerr << "skip " << f.filename().string() << ": duration " << d << " s outside [" << a.min_dur << ", "
                << a.max_dur << "]\n";
      continue;
    }
    speech.emplace_back(f, std::move(s));
  }
  if (speech.empty()) throw ValidationError("no speech files left after the duration filter");
  write_directory_atomically(a.out, [&](const fs::path& stage) {
    std::ostringstream manifest;
    for (std::size_t u = 0; u < speech.size(); ++u) {
      const auto& [path, audio] = speech[u];
      std::vector<std::size_t> chosen;
      if (a.mode == "all") {
        for (std::size_t l = 0; l < levels.size(); ++l) chosen.push_back(l);
      } else {
        std::mt19937_64 rng(derive_seed(a.seed, u));
        chosen.push_back(std::uniform_int_distribution<std::size_t>(0, levels.size() - 1)(rng));
      }
      for (std::size_t l : chosen) {
        const MixResult mix = mix_at_snr(audio, masker, levels[l], derive_seed(a.seed, 1'000'000 + u * 1000 + l));
        const std::string id = path.stem().string() + "_snr" + snr_tag(levels[l]);
        write_wav(stage / (id + ".wav"), mix.mix, WavEncoding::Float32);
        json row = {{"utt_id", id},          {"source", path.filename().string()}, {"snr_db", levels[l]},
                    {"onset", mix.onset},    {"end", mix.end},                       {"path", id + ".wav"}};
        manifest << row.dump() << '\n';
      }
    }
    write_text_atomically(stage / "manifest.jsonl", manifest.str());
  });
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int n_utts = 500;
  double snr_lo = -18.0, snr_hi = 10.0;
  std::uint64_t seed = 42;
  SynthConfig cfg;
};

void cmd_synth(const SynthArgs& a) {
  const Dataset data = generate_synthetic_corpus(a.n_utts, a.snr_lo, a.snr_hi, a.cfg, a.seed);
  save_dataset(data, a.out);
  std::cerr << "synth: " << data.utterances.size() << " utterances, " << data.records.size() << " tokens -> "
            << a.out << "\n";
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> corpus, out, selector, granularity;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> snr_lo, snr_hi;
  bool all_snr = false;
  std::vector<std::string> mask;
};

void cmd_train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  json flags = json::object();
  if (a.corpus) flags["corpus"] = *a.corpus;
  if (a.out) flags["out"] = *a.out;
  if (a.selector) flags["selector"] = *a.selector;
  if (a.granularity) flags["granularity"] = *a.granularity;
  if (a.epochs) flags["epochs"] = *a.epochs;
  if (a.seed) flags["seed"] = *a.seed;
  if (a.snr_lo) flags["snr_lo"] = *a.snr_lo;
  if (a.snr_hi) flags["snr_hi"] = *a.snr_hi;
  if (a.all_snr) {
    flags["snr_lo"] = kSynthSnrMin;
    flags["snr_hi"] = kSynthSnrMax;
  }
  if (!a.mask.empty()) flags["ablation_mask"] = a.mask;
  rc = run_config_from_json(flags, rc);
  for (const auto& s : a.sets) apply_override(rc, s);
  rc.validate();
  if (rc.corpus.empty() || rc.out.empty()) throw ValidationError("train needs a corpus and an output path");

  const Dataset all = load_dataset(manifest_path(rc.corpus));
  const Dataset band = filter_snr(all, rc.snr_lo, rc.snr_hi);
  if (band.records.empty()) throw ValidationError("no tokens in the SNR band [" + format_double(rc.snr_lo) + ", " +
                                                  format_double(rc.snr_hi) + "]");
  auto [train_set, val_set] = split_validation(band, rc.validation_fraction, rc.train.seed);
  std::optional<ModelFile> selector;
  if (!rc.selector.empty()) selector = load_model(rc.selector);
  const ModelParams init = ModelParams::initialize(rc.features, rc.init_seed);
  TrainOptions opts;
  opts.granularity = rc.granularity;
  opts.selector = selector ? &selector->params : nullptr;
  const TrainResult result =
      train(train_set, val_set.records.empty() ? nullptr : &val_set, init, rc.train, opts);

  fs::path config_path = rc.out, report_path = rc.out;
  config_path += ".config.json";
  report_path += ".report.json";
  save_model({result.params, rc.granularity}, rc.out);
  write_text_atomically(config_path, to_json(rc).dump(2) + "\n");
  write_text_atomically(report_path, to_json(result.report).dump(2) + "\n");
  for (const auto& e : result.report.epochs) {
    std::cerr << "epoch " << e.epoch << " loss " << e.total << " flagged " << e.flagged_fraction;
    if (e.validation_ece) std::cerr << " val_ece " << *e.validation_ece;
    std::cerr << "\n";
  }
  std::cerr << "classifier precision " << result.report.precision << " recall " << result.report.recall << " f1 "
            << result.report.f1 << "\n";
}

// --- calibrate --------------------------------------------------------------

struct CalibrateArgs {
  std::string corpus, model, selector, out;
  double threshold = 0.5;
};

void cmd_calibrate(const CalibrateArgs& a) {
  const ModelFile model = load_model(a.model);
  const Dataset data = load_dataset(manifest_path(a.corpus));
  // Shape checks happen here, before anything is written.
  PreparedCorpus pc = prepare_corpus(data, model.params.config, false);
  LossOptions opts;
  opts.granularity = model.granularity;
  if (model.granularity == TemperatureGranularity::Utterance) {
    if (a.selector.empty()) throw ValidationError("utterance-level model needs --selector");
    attach_selector(pc, load_model(a.selector).params);
    opts.use_frozen_selector = true;
  }
  if (!(a.threshold > 0.0 && a.threshold < 1.0)) throw ValidationError("--threshold must be in (0,1)");
  const auto calibrated = calibrate_corpus(pc, model.params, a.threshold, opts);
  save_calibrated(data.records, calibrated, a.out);
  const auto flagged = std::count_if(calibrated.begin(), calibrated.end(), [](const auto& c) { return c.flagged; });
  std::cerr << "calibrate: " << flagged << " of " << calibrated.size() << " tokens flagged\n";
}

// --- baseline ---------------------------------------------------------------

struct BaselineArgs {
  std::string corpus, eval, table_out, out;
};

void cmd_baseline(const BaselineArgs& a) {
  const Dataset fit = load_dataset(manifest_path(a.corpus));
  const SnrTemperatureTable table = snr_grid_search(fit);
  for (int level : table.low_count) {
    std::cerr << "baseline: SNR level " << level << " dB has fewer than " << kMinLevelTokens
              << " tokens; using T = 1\n";
  }
  save_snr_table(table, a.table_out);
  if (a.out.empty()) return;
  const Dataset target = a.eval.empty() ? fit : load_dataset(manifest_path(a.eval));
  const auto conf = apply_snr_baseline(target, table);
  std::vector<CalibratedToken> cal(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const double t = table.temperature.at(snr_level(*target.utterances[target.utterance_of(i)].snr_db));
    cal[i] = {conf[i], t != 1.0, 0.0, t};
  }
  save_calibrated(target.records, cal, a.out);
}

// --- report -----------------------------------------------------------------

struct ReportArgs {
  std::string corpus, out;
  std::vector<std::string> methods;
  int bins = 10;
};

void cmd_report(const ReportArgs& a) {
  const Dataset data = load_dataset(manifest_path(a.corpus));
  std::vector<std::pair<std::string, std::vector<ScoredToken>>> conditions;
  conditions.emplace_back("uncalibrated", scored_tokens(data));
  for (const auto& m : a.methods) {
    const auto eq = m.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--method expects name=path, got '" + m + "'");
    const std::string name = m.substr(0, eq);
    if (name.find_first_of("/\\,\" ") != std::string::npos) throw ValidationError("bad method name '" + name + "'");
    conditions.emplace_back(name, scored_tokens(data, load_calibrated_confidences(m.substr(eq + 1), data)));
  }
  const auto bands = default_snr_bands();
  std::vector<std::pair<std::string, CalibrationReport>> reports;
  for (const auto& [name, tokens] : conditions) reports.emplace_back(name, snr_stratified_report(tokens, bands, a.bins));
  write_directory_atomically(a.out, [&](const fs::path& stage) {
    write_text_atomically(stage / "metrics.csv", metrics_csv(reports));
    for (const auto& [name, tokens] : conditions) {
      std::vector<ScoredToken> low, high;
      for (const auto& t : tokens) (*t.snr_db <= -5.0 ? low : high).push_back(t);
      if (!low.empty()) write_text_atomically(stage / ("reliability_" + name + "_low.csv"), reliability_csv(reliability_bins(low, a.bins)));
      if (!high.empty()) write_text_atomically(stage / ("reliability_" + name + "_high.csv"), reliability_csv(reliability_bins(high, a.bins)));
      write_text_atomically(stage / ("heatmap_" + name + ".csv"),
                            heatmap_csv(confidence_accuracy_heatmap(tokens, a.bins, bands), bands));
    }
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective token-level confidence calibration toolkit"};
  app.require_subcommand(1);

  MaskerArgs masker;
  auto* mk = app.add_subcommand("make-masker", "Speech-shaped, envelope-modulated masker from a WAVE corpus");
  mk->add_option("--corpus", masker.corpus, "Directory of WAVE files")->required();
  mk->add_option("--ltas-count", masker.ltas_count, "Utterances for the long-term spectrum");
  mk->add_option("--env-count", masker.env_count, "Further utterances for the average envelope");
  mk->add_option("--duration", masker.duration, "Masker length in seconds");
  mk->add_option("--out", masker.out, "Output WAVE")->required();
  mk->add_option("--seed", masker.seed);

  MixArgs mix;
  auto* mx = app.add_subcommand("mix", "Mix speech with the masker at controlled SNRs");
  mx->add_option("--speech", mix.speech)->required();
  mx->add_option("--masker", mix.masker)->required();
  mx->add_option("--snr-lo", mix.snr_lo);
  mx->add_option("--snr-hi", mix.snr_hi);
  mx->add_option("--snr-step", mix.snr_step);
  mx->add_option("--mode", mix.mode)->check(CLI::IsMember({"random-one", "all"}));
  mx->add_option("--min-dur", mix.min_dur);
  mx->add_option("--max-dur", mix.max_dur);
  mx->add_option("--out", mix.out)->required();
  mx->add_option("--seed", mix.seed);

  SynthArgs synth;
  auto* sy = app.add_subcommand("synth", "Generate a synthetic labeled corpus");
  sy->add_option("--n-utts", synth.n_utts);
  sy->add_option("--snr-lo", synth.snr_lo);
  sy->add_option("--snr-hi", synth.snr_hi);
  sy->add_option("--seed", synth.seed);
  sy->add_option("--vocab-size", synth.cfg.vocab_size);
  sy->add_option("--k", synth.cfg.k, "Stored logits per token");
  sy->add_option("--out", synth.out)->required();

  TrainArgs tr;
  auto* tc = app.add_subcommand("train", "Train the selective calibrator");
  tc->add_option("--config", tr.config, "JSON run configuration");
  tc->add_option("--corpus", tr.corpus);
  tc->add_option("--out", tr.out, "Model file");
  tc->add_option("--selector", tr.selector, "Frozen token-level model (utterance granularity)");
  tc->add_option("--granularity", tr.granularity)->check(CLI::IsMember({"token", "utterance"}));
  tc->add_option("--epochs", tr.epochs);
  tc->add_option("--seed", tr.seed);
  tc->add_option("--snr-lo", tr.snr_lo);
  tc->add_option("--snr-hi", tr.snr_hi);
  tc->add_flag("--all-snr", tr.all_snr, "Train on the full -18..+10 dB range");
  tc->add_option("--mask", tr.mask, "Feature group to disable (repeatable)");
  tc->add_option("--set", tr.sets, "key=value override (repeatable)");

  CalibrateArgs cal;
  auto* ca = app.add_subcommand("calibrate", "Apply a trained model to a corpus");
  ca->add_option("--corpus", cal.corpus)->required();
  ca->add_option("--model", cal.model)->required();
  ca->add_option("--selector", cal.selector);
  ca->add_option("--threshold", cal.threshold);
  ca->add_option("--out", cal.out)->required();

  BaselineArgs base;
  auto* ba = app.add_subcommand("baseline", "Per-SNR grid-searched temperature baseline");
  ba->add_option("--corpus", base.corpus, "Corpus the table is fitted on")->required();
  ba->add_option("--eval", base.eval, "Corpus to calibrate (default: the fitting corpus)");
  ba->add_option("--table-out", base.table_out)->required();
  ba->add_option("--out", base.out, "Calibrated records");

  ReportArgs rep;
  auto* re = app.add_subcommand("report", "Metric, reliability and heatmap CSVs");
  re->add_option("--corpus", rep.corpus)->required();
  re->add_option("--method", rep.methods, "name=calibrated records file (repeatable)");
  re->add_option("--bins", rep.bins);
  re->add_option("--out", rep.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*mk) cmd_make_masker(masker);
    else if (*mx) cmd_mix(mix);
    else if (*sy) cmd_synth(synth);
    else if (*tc) cmd_train(tr);
    else if (*ca) cmd_calibrate(cal);
    else if (*ba) cmd_baseline(base);
    else if (*re) cmd_report(rep);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
