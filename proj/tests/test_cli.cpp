#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "selcal/audio.hpp"
#include "selcal/dataset.hpp"
#include "selcal/fileio.hpp"
#include "selcal/noise.hpp"
#include "selcal/records.hpp"
#include "selcal/report_io.hpp"
#include "selcal/synth.hpp"
#include "support.hpp"

using namespace selcal;
using namespace selcal::testing;
namespace fs = std::filesystem;

namespace {

// Runs the command-line tool and returns its exit status; output goes to `log`.
int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + SELCAL_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

std::size_t wav_count(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".wav";
  return n;
}

void write_speech_corpus(const fs::path& dir, int n, double seconds, std::uint64_t seed) {
  fs::create_directories(dir);
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "s%03d.wav", i);
    write_wav(dir / name, synthesize_speech_proxy(seconds, seed + i), WavEncoding::Pcm16);
  }
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors") {
  TempDir dir("cli_usage");
  const fs::path log = dir / "log";
  CHECK(run("", log) == 1);
  CHECK(run("--help", log) == 0);
  CHECK(run("frobnicate", log) == 1);
  CHECK(run("synth", log) == 1);  // --out is required
  CHECK(run("mix --speech a --masker b --out c --mode sometimes", log) == 1);
}

TEST_CASE("masker synthesis and mixing") {
  TempDir dir("cli_audio");
  const fs::path log = dir / "log";
  write_speech_corpus(dir / "corpus", 20, 2.0, 10);

  const std::string mk = "make-masker --corpus " + q(dir / "corpus") + " --ltas-count 10 --env-count 10 --duration 5";
  REQUIRE(run(mk + " --seed 3 --out " + q(dir / "m1.wav"), log) == 0);
  REQUIRE(run(mk + " --seed 3 --out " + q(dir / "m2.wav"), log) == 0);
  REQUIRE(run(mk + " --seed 4 --out " + q(dir / "m3.wav"), log) == 0);
  const Audio m1 = read_wav(dir / "m1.wav");
  CHECK(m1.duration_s() == doctest::Approx(5.0));
  CHECK(rms(m1.samples) == doctest::Approx(kShapedNoiseRms).epsilon(1e-3));
  CHECK(read_text_file(dir / "m1.wav") == read_text_file(dir / "m2.wav"));
  CHECK(read_text_file(dir / "m1.wav") != read_text_file(dir / "m3.wav"));

  const auto recipe = nlohmann::json::parse(read_text_file(dir / "m1.wav.recipe.json"));
  CHECK(recipe["ltas_files"].size() == 10);
  CHECK(recipe["envelope_files"].size() == 10);
  std::set<std::string> used;
  for (const auto& f : recipe["ltas_files"]) used.insert(f.get<std::string>());
  for (const auto& f : recipe["envelope_files"]) used.insert(f.get<std::string>());
  CHECK(used.size() == 20);

  CHECK(run("make-masker --corpus " + q(dir / "corpus") + " --ltas-count 15 --env-count 10 --out " +
                q(dir / "m4.wav"),
            log) == 1);
  CHECK_FALSE(fs::exists(dir / "m4.wav"));
  CHECK(run("make-masker --corpus " + q(dir / "absent") + " --out " + q(dir / "m5.wav"), log) == 2);

  // five 3 s utterances plus one too short to use
  write_speech_corpus(dir / "speech", 5, 3.0, 50);
  write_wav(dir / "speech" / "short.wav", synthesize_speech_proxy(1.0, 99));
  REQUIRE(run("mix --speech " + q(dir / "speech") + " --masker " + q(dir / "m1.wav") +
                  " --mode all --snr-lo -2 --snr-hi 0 --min-dur 2 --seed 1 --out " + q(dir / "mixed"),
              log) == 0);
  CHECK(wav_count(dir / "mixed") == 15);
  CHECK(line_count(dir / "mixed" / "manifest.jsonl") == 15);
  CHECK(read_text_file(log).find("skip short.wav") != std::string::npos);

  std::ifstream manifest(dir / "mixed" / "manifest.jsonl");
  for (std::string line; std::getline(manifest, line);) {
    const auto row = nlohmann::json::parse(line);
    const Audio speech = read_wav(dir / "speech" / row["source"].get<std::string>());
    const Audio mix = read_wav(dir / "mixed" / row["path"].get<std::string>());
    REQUIRE(mix.samples.size() == speech.samples.size());
    // mix is written as float32; the added masker is recovered to that precision
    std::vector<double> added(mix.samples.size());
    for (std::size_t i = 0; i < added.size(); ++i) added[i] = mix.samples[i] - speech.samples[i];
    CHECK(std::abs(measure_snr(speech.samples, added) - row["snr_db"].get<double>()) < 0.1);
    CHECK(row["end"].get<std::size_t>() - row["onset"].get<std::size_t>() == speech.samples.size());
  }

  REQUIRE(run("mix --speech " + q(dir / "speech") + " --masker " + q(dir / "m1.wav") +
                  " --min-dur 2 --seed 1 --out " + q(dir / "one"),
              log) == 0);
  CHECK(wav_count(dir / "one") == 5);
  CHECK(run("mix --speech " + q(dir / "speech") + " --masker " + q(dir / "m1.wav") + " --min-dur 5 --out " +
                q(dir / "none"),
            log) == 1);
  CHECK_FALSE(fs::exists(dir / "none"));
  // a masker shorter than the speech cannot supply a segment
  write_wav(dir / "tiny.wav", synthesize_speech_proxy(1.0, 7));
  CHECK(run("mix --speech " + q(dir / "speech") + " --masker " + q(dir / "tiny.wav") + " --min-dur 2 --out " +
                q(dir / "bad"),
            log) == 1);
}

TEST_CASE("corpus, training, calibration, baseline and report") {
  TempDir dir("cli_pipeline");
  const fs::path log = dir / "log";
  REQUIRE(run("synth --n-utts 40 --seed 11 --out " + q(dir / "corpus"), log) == 0);
  const Dataset corpus = load_dataset(dir / "corpus" / "corpus.json");
  CHECK(corpus.utterances.size() == 40);

  REQUIRE(run("train --corpus " + q(dir / "corpus") + " --all-snr --epochs 2 --out " + q(dir / "model.json"), log) ==
          0);
  CHECK(fs::exists(dir / "model.json.config.json"));
  const auto report = nlohmann::json::parse(read_text_file(dir / "model.json.report.json"));
  CHECK(report["epochs"].size() == 2);

  REQUIRE(run("calibrate --corpus " + q(dir / "corpus") + " --model " + q(dir / "model.json") + " --out " +
                  q(dir / "cal.jsonl"),
              log) == 0);
  CHECK(line_count(dir / "cal.jsonl") == corpus.records.size());
  const auto conf = load_calibrated_confidences(dir / "cal.jsonl", corpus);
  for (std::size_t i = 0; i < conf.size(); ++i) CHECK(conf[i] <= corpus.records[i].confidence);

  REQUIRE(run("baseline --corpus " + q(dir / "corpus") + " --table-out " + q(dir / "table.csv") + " --out " +
                  q(dir / "base.jsonl"),
              log) == 0);
  CHECK(line_count(dir / "base.jsonl") == corpus.records.size());
  CHECK(line_count(dir / "table.csv") >= 2);

  REQUIRE(run("report --corpus " + q(dir / "corpus") + " --method " + "selective=" + q(dir / "cal.jsonl") +
                  " --method grid=" + q(dir / "base.jsonl") + " --out " + q(dir / "rep"),
              log) == 0);
  CHECK(line_count(dir / "rep" / "metrics.csv") == 1 + 6 * 3);
  CHECK(line_count(dir / "rep" / "heatmap_selective.csv") == 1 + 6 * 10);
  CHECK(fs::exists(dir / "rep" / "reliability_grid_low.csv"));
  CHECK(fs::exists(dir / "rep" / "reliability_uncalibrated_high.csv"));
  CHECK(run("report --corpus " + q(dir / "corpus") + " --method nameless --out " + q(dir / "rep2"), log) == 1);

  // training flags override the config file; unknown keys are rejected
  write_text_atomically(dir / "run.json", R"({"epochs": 1, "lambda_ece": 5.0})");
  REQUIRE(run("train --config " + q(dir / "run.json") + " --corpus " + q(dir / "corpus") +
                  " --all-snr --set lambda_ce=0.5 --out " + q(dir / "m2.json"),
              log) == 0);
  const auto saved = nlohmann::json::parse(read_text_file(dir / "m2.json.config.json"));
  CHECK(saved["epochs"] == 1);
  CHECK(saved["lambda_ece"] == 5.0);
  CHECK(saved["lambda_ce"] == 0.5);
  write_text_atomically(dir / "bad.json", R"({"epochz": 1})");
  CHECK(run("train --config " + q(dir / "bad.json") + " --corpus " + q(dir / "corpus") + " --out " +
                q(dir / "m3.json"),
            log) == 1);
  CHECK_FALSE(fs::exists(dir / "m3.json"));
  CHECK(run("train --corpus " + q(dir / "corpus") + " --granularity utterance --out " + q(dir / "m4.json"), log) == 1);

  // a model whose feature shapes do not fit the corpus fails before writing
  REQUIRE(run("synth --n-utts 3 --k 4 --seed 12 --out " + q(dir / "k4"), log) == 0);
  CHECK(run("calibrate --corpus " + q(dir / "k4") + " --model " + q(dir / "model.json") + " --out " +
                q(dir / "k4.jsonl"),
            log) == 1);
  CHECK_FALSE(fs::exists(dir / "k4.jsonl"));
  CHECK(run("calibrate --corpus " + q(dir / "absent") + " --model " + q(dir / "model.json") + " --out " +
                q(dir / "x.jsonl"),
            log) == 2);
  CHECK(run("calibrate --corpus " + q(dir / "corpus") + " --model " + q(dir / "model.json") +
                " --threshold 1.5 --out " + q(dir / "x.jsonl"),
            log) == 1);
}

}  // TEST_SUITE
