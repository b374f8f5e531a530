#include "selcal/synth.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <unordered_set>

#include "selcal/error.hpp"
#include "selcal/mel.hpp"
#include "selcal/noise.hpp"
#include "selcal/rng.hpp"

namespace selcal {

namespace {

// Seed streams; disjoint ranges keep per-utterance draws independent of n_utts.
constexpr std::uint64_t kMaskerStream = 1;
constexpr std::uint64_t kTokenStream = 1'000'000;
constexpr std::uint64_t kSpeechStream = 2'000'000;
constexpr std::uint64_t kMixStream = 3'000'000;

constexpr double kMinConfidence = 1e-6;
constexpr double kMaxConfidence = 1.0 - 1e-9;
constexpr double kProxyRms = 0.05;

double sample_beta(std::mt19937_64& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

int draw_unused_id(std::mt19937_64& rng, std::int64_t vocab_size, std::unordered_set<int>& used) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab_size - 1));
  for (;;) {
    const int id = pick(rng);
    if (used.insert(id).second) return id;
  }
}

}  // namespace

double synthetic_overconfidence_gap(double snr_db) {
  if (snr_db >= -5.0) return 0.05;
  const double t = std::min(1.0, (-5.0 - snr_db) / 13.0);
  return 0.05 + 0.30 * t;
}

double sample_target_confidence(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double c = u(rng) < 0.65 ? sample_beta(rng, 8.0, 1.0) : sample_beta(rng, 2.0, 2.0);
  return std::clamp(c, kMinConfidence, kMaxConfidence);
}

TokenRecord make_synthetic_record(double confidence, int token_id, std::span<const int> other_ids,
                                  std::int64_t vocab_size) {
  const int k = static_cast<int>(other_ids.size()) + 1;
  if (vocab_size <= k) throw ValidationError("vocab_size must exceed K");
  const double c = std::clamp(confidence, kMinConfidence, kMaxConfidence);
  // Geometric ratio 0.5, lowered for small c so that slot 1 stays below slot 0.
  const double rho = c < 0.4 ? 1.0 - 0.75 * c / (1.0 - c) : 0.5;
  TokenRecord r;
  r.token_id = token_id;
  r.topk_ids.reserve(k);
  r.topk_ids.push_back(token_id);
  r.topk_ids.insert(r.topk_ids.end(), other_ids.begin(), other_ids.end());
  r.topk_logits.reserve(k);
  r.topk_logits.push_back(std::log(c));
  const double rest = 1.0 - c;
  for (int j = 1; j < k; ++j) {
    r.topk_logits.push_back(std::log(rest * (1.0 - rho)) + (j - 1) * std::log(rho));
  }
  r.tail_lse = std::log(rest) + (k - 1) * std::log(rho);
  r.tail_count = vocab_size - k;
  r.confidence = std::exp(r.topk_logits[0] - log_partition(r));
  return r;
}

Audio synthesize_speech_proxy(double duration_s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> f0_dist(100.0, 220.0), fm_dist(3.0, 6.0), phase(0.0, 2.0 * std::numbers::pi);
  const double f0 = f0_dist(rng);
  const double fm = fm_dist(rng);
  const double env_phase = phase(rng);
  Audio a;
  const auto n = static_cast<std::size_t>(std::llround(duration_s * a.sample_rate));
  a.samples.assign(n, 0.0);
  const int harmonics = static_cast<int>(4000.0 / f0);
  for (int h = 1; h <= harmonics; ++h) {
    const double w = 2.0 * std::numbers::pi * f0 * h / a.sample_rate;
    const std::complex<double> step = std::polar(1.0, w);
    std::complex<double> z = std::polar(1.0 / h, phase(rng));
    for (std::size_t i = 0; i < n; ++i) {
      a.samples[i] += z.imag();
      z *= step;
      // Renormalize occasionally so rounding does not drift the amplitude.
      if ((i & 1023) == 1023) z *= (1.0 / h) / std::abs(z);
    }
  }
  // Broadband breath noise 26 dB below the voicing keeps energy in every band
  // up to Nyquist, as aspiration and frication do in real speech.
  const double breath = 0.05 * rms(a.samples);
  std::normal_distribution<double> gauss(0.0, breath);
  for (double& s : a.samples) s += gauss(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / a.sample_rate;
    a.samples[i] *= 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * fm * t + env_phase);
  }
  const double r = rms(a.samples);
  for (double& s : a.samples) s *= kProxyRms / r;
  return a;
}

Dataset generate_synthetic_corpus(int n_utts, double snr_lo, double snr_hi, const SynthConfig& cfg,
                                  std::uint64_t seed) {
  if (n_utts < 1) throw ValidationError("n_utts must be >= 1");
  if (!(snr_lo <= snr_hi) || snr_lo < kSynthSnrMin || snr_hi > kSynthSnrMax) {
    throw ValidationError("snr range must lie within [-18, +10] dB");
  }
  if (cfg.k < 1 || cfg.vocab_size <= cfg.k) throw ValidationError("synth: need vocab_size > K >= 1");
  if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens) throw ValidationError("synth: bad token count range");
  if (cfg.max_tokens + cfg.k >= cfg.vocab_size / 2) throw ValidationError("synth: vocabulary too small");
  if (cfg.masker_duration_s <= cfg.duration_s) throw ValidationError("synth: masker must outlast utterances");

  std::vector<Audio> ltas_set, env_set;
  for (int i = 0; i < cfg.masker_ltas_count + cfg.masker_env_count; ++i) {
    Audio a = synthesize_speech_proxy(cfg.duration_s, derive_seed(seed, kMaskerStream + 1 + i));
    (i < cfg.masker_ltas_count ? ltas_set : env_set).push_back(std::move(a));
  }
  NoiseRecipe recipe{compute_ltas(ltas_set), build_average_envelope(env_set),
                     derive_seed(seed, kMaskerStream)};
  const Audio masker = synthesize_masker(recipe, cfg.masker_duration_s);

  // Token frequencies follow a Zipf law, so frequent ids recur across utterances.
  std::vector<double> weights(static_cast<std::size_t>(cfg.vocab_size));
  for (std::size_t r = 0; r < weights.size(); ++r) weights[r] = 1.0 / static_cast<double>(r + 1);
  std::discrete_distribution<int> zipf(weights.begin(), weights.end());

  Dataset data;
  data.manifest.vocab_size = cfg.vocab_size;
  data.manifest.k = cfg.k;
  data.manifest.seed = seed;
  for (int u = 0; u < n_utts; ++u) {
    std::mt19937_64 rng(derive_seed(seed, kTokenStream + u));
    UtteranceRecord utt;
    char id[32];
    std::snprintf(id, sizeof id, "utt%05d", u);
    utt.utt_id = id;
    utt.snr_db = std::uniform_real_distribution<double>(snr_lo, snr_hi)(rng);
    const double gap = synthetic_overconfidence_gap(*utt.snr_db);
    const int n_tok = std::uniform_int_distribution<int>(cfg.min_tokens, cfg.max_tokens)(rng);

    std::unordered_set<int> used;
    std::vector<double> conf(n_tok);
    std::vector<int> correct(n_tok);
    for (int i = 0; i < n_tok; ++i) {
      utt.hyp_token_ids.push_back(zipf(rng));
      used.insert(utt.hyp_token_ids.back());
      conf[i] = sample_target_confidence(rng);
      correct[i] = std::bernoulli_distribution(std::max(0.0, conf[i] - gap))(rng) ? 1 : 0;
    }
    utt.ref_token_ids = utt.hyp_token_ids;
    for (int i = 0; i < n_tok; ++i) {
      if (!correct[i]) utt.ref_token_ids[i] = draw_unused_id(rng, cfg.vocab_size, used);
    }
    const std::vector<int> labels = align_and_label(utt.hyp_token_ids, utt.ref_token_ids);

    for (int i = 0; i < n_tok; ++i) {
      std::unordered_set<int> row{utt.hyp_token_ids[i]};
      std::vector<int> others;
      for (int j = 1; j < cfg.k; ++j) others.push_back(draw_unused_id(rng, cfg.vocab_size, row));
      TokenRecord r = make_synthetic_record(conf[i], utt.hyp_token_ids[i], others, cfg.vocab_size);
      r.utt_id = utt.utt_id;
      r.token_index = i;
      r.y = labels[i];
      r.o = label_overconfident(r);
      data.records.push_back(std::move(r));
    }

    const Audio speech = synthesize_speech_proxy(cfg.duration_s, derive_seed(seed, kSpeechStream + u));
    const MixResult mix = mix_at_snr(speech, masker, *utt.snr_db, derive_seed(seed, kMixStream + u));
    // Stored at float precision so in-memory and on-disk corpora agree.
    Matrix mel = mel_spectrogram(mix.mix).cast<float>().cast<double>();
    utt.n_frames = static_cast<int>(mel.rows());
    utt.n_mel_bins = static_cast<int>(mel.cols());
    utt.mel_path = "mel/" + utt.utt_id + ".mel";
    data.utterances.push_back(std::move(utt));
    data.mels.push_back(std::move(mel));
  }
  data.index();
  return data;
}

}  // namespace selcal
