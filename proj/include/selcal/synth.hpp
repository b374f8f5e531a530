#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "selcal/audio.hpp"
#include "selcal/dataset.hpp"

namespace selcal {

inline constexpr double kSynthSnrMin = -18.0;
inline constexpr double kSynthSnrMax = 10.0;

struct SynthConfig {
  std::int64_t vocab_size = 51865;
  int k = 32;
  int min_tokens = 5;
  int max_tokens = 25;
  double duration_s = 3.0;
  int masker_ltas_count = 8;
  int masker_env_count = 8;
  double masker_duration_s = 12.0;
};

// Gap between target confidence and correctness probability: 0.05 at and
// above -5 dB, rising linearly to 0.35 at -18 dB.
double synthetic_overconfidence_gap(double snr_db);

// Draws a target confidence from 0.65 Beta(8,1) + 0.35 Beta(2,2).
double sample_target_confidence(std::mt19937_64& rng);

// Logits realizing top-1 probability `confidence` over vocab_size entries:
// x_0 = ln c, the remainder split geometrically over the next K-1 slots and
// the tail. The record's confidence is recomputed from the stored logits.
TokenRecord make_synthetic_record(double confidence, int token_id, std::span<const int> other_ids,
                                  std::int64_t vocab_size);

// Speech stand-in: harmonic complex up to 4 kHz plus broadband breath noise,
// under a slow amplitude envelope.
Audio synthesize_speech_proxy(double duration_s, std::uint64_t seed);

// Deterministic given seed. Mel paths are set to mel/<utt_id>.mel.
Dataset generate_synthetic_corpus(int n_utts, double snr_lo, double snr_hi, const SynthConfig& cfg,
                                  std::uint64_t seed);

}  // namespace selcal
