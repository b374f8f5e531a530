#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "selcal/audio.hpp"

namespace selcal {

// Per-bin RMS magnitude over all Hann-windowed frames of a corpus.
struct Ltas {
  std::vector<double> magnitudes;  // fft_size / 2 + 1 bins
  int fft_size = 0;
  int sample_rate = kSampleRate;
};

// Amplitude envelope sampled at frame_rate, mean-normalized to 1.
struct EnvelopeProfile {
  std::vector<double> samples;
  double frame_rate = 100.0;
};

struct NoiseRecipe {
  Ltas ltas;
  EnvelopeProfile envelope;
  std::uint64_t seed = 0;
};

inline constexpr double kEnvelopeCutoffHz = 32.0;
inline constexpr double kEnvelopeFrameRate = 100.0;
inline constexpr double kShapedNoiseRms = 0.1;

void validate(const Ltas& ltas);
void validate(const EnvelopeProfile& envelope);

Ltas compute_ltas(std::span<const Audio> utterances, int fft_size = 512, int hop = 256);

// White Gaussian noise shaped by zero-phase multiplication with `ltas` in
// Hann-windowed, 50%-overlapped blocks. Output RMS is kShapedNoiseRms.
Audio shape_noise(double duration_s, const Ltas& ltas, std::uint64_t seed);

// Analytic-signal magnitude, low-passed at 32 Hz, sampled at 100 Hz, mean 1.
EnvelopeProfile extract_envelope(const Audio& audio);
EnvelopeProfile build_average_envelope(std::span<const Audio> utterances);

// Multiplies by the linearly interpolated envelope (tiled when shorter) and
// restores the input RMS.
Audio apply_modulation(const Audio& noise, const EnvelopeProfile& envelope);

// Full two-step masker: speech-shaped noise, then envelope modulation.
Audio synthesize_masker(const NoiseRecipe& recipe, double duration_s);

struct MixResult {
  Audio mix;
  std::vector<double> scaled_masker;  // the masker segment as added to speech
  std::size_t onset = 0;              // [onset, end) within the masker
  std::size_t end = 0;
};

// Picks a uniformly random masker segment of speech length and scales it so
// the speech-to-masker RMS ratio equals snr_db. No clipping protection.
MixResult mix_at_snr(const Audio& speech, const Audio& masker, double snr_db, std::uint64_t seed);

double measure_snr(std::span<const double> speech, std::span<const double> masker);

struct BandLevel {
  double center_hz = 0.0;
  double level_db = 0.0;  // 10 log10 of summed squared magnitude
  int bins = 0;
};

// Third-octave band levels (centers 1000 * 2^(n/3)) within [f_lo, f_hi];
// bands containing no FFT bin are omitted.
std::vector<BandLevel> third_octave_levels(const Ltas& ltas, double f_lo = 100.0,
                                           double f_hi = 6300.0);

}  // namespace selcal
