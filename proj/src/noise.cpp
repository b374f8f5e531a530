#include "selcal/noise.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <random>

#include "fft.hpp"
#include "selcal/error.hpp"

namespace selcal {

using detail::ComplexFft;
using detail::RealFft;
using cplx = std::complex<double>;

void validate(const Ltas& ltas) {
  if (ltas.fft_size < 2 || (ltas.fft_size & (ltas.fft_size - 1)) != 0) {
    throw ValidationError("ltas: fft_size must be a power of two");
  }
  if (ltas.magnitudes.size() != static_cast<std::size_t>(ltas.fft_size / 2 + 1)) {
    throw ValidationError("ltas: expected fft_size/2+1 magnitudes");
  }
  for (double m : ltas.magnitudes) {
    if (!std::isfinite(m) || m < 0.0) throw ValidationError("ltas: magnitudes must be finite, >= 0");
  }
}

void validate(const EnvelopeProfile& env) {
  if (env.samples.empty()) throw ValidationError("envelope: empty");
  if (!(env.frame_rate > 0.0)) throw ValidationError("envelope: frame_rate must be positive");
  for (double v : env.samples) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("envelope: samples must be finite, >= 0");
  }
}

Ltas compute_ltas(std::span<const Audio> utterances, int fft_size, int hop) {
  if (utterances.empty()) throw ValidationError("compute_ltas: empty corpus");
  if (fft_size < 2 || (fft_size & (fft_size - 1)) != 0) {
    throw ValidationError("compute_ltas: fft_size must be a power of two");
  }
  if (hop < 1) throw ValidationError("compute_ltas: hop must be positive");
  const int rate = utterances.front().sample_rate;
  for (const Audio& a : utterances) {
    if (a.sample_rate != rate) throw ValidationError("compute_ltas: mixed sample rates");
  }

  RealFft fft(fft_size);
  const auto window = detail::hann_window(fft_size);
  std::vector<double> power(fft.bins(), 0.0);
  std::vector<double> frame(fft_size);
  std::vector<cplx> spec(fft.bins());
  std::size_t frames = 0;
  for (const Audio& a : utterances) {
    const std::size_t n = a.samples.size();
    std::size_t start = 0;
    do {
      for (int i = 0; i < fft_size; ++i) {
        const std::size_t idx = start + i;
        frame[i] = idx < n ? a.samples[idx] * window[i] : 0.0;
      }
      fft.forward(frame.data(), spec.data());
      for (int k = 0; k < fft.bins(); ++k) power[k] += std::norm(spec[k]);
      ++frames;
      start += hop;
    } while (start + fft_size <= n);
  }

  Ltas ltas;
  ltas.fft_size = fft_size;
  ltas.sample_rate = rate;
  ltas.magnitudes.resize(power.size());
  for (std::size_t k = 0; k < power.size(); ++k) {
    ltas.magnitudes[k] = std::sqrt(power[k] / static_cast<double>(frames));
  }
  return ltas;
}

Audio shape_noise(double duration_s, const Ltas& ltas, std::uint64_t seed) {
  if (!(duration_s > 0.0)) throw ValidationError("shape_noise: duration must be positive");
  validate(ltas);
  const int n_fft = ltas.fft_size;
  const int hop = n_fft / 2;
  const auto n = static_cast<std::size_t>(std::llround(duration_s * ltas.sample_rate));

  // Pad half a block on each side so every output sample is covered by two
  // windows summing to one.
  const std::size_t padded = n + static_cast<std::size_t>(n_fft);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> white(padded + n_fft);
  for (double& v : white) v = gauss(rng);

  RealFft fft(n_fft);
  const auto window = detail::hann_window(n_fft);
  std::vector<double> out(padded + n_fft, 0.0);
  std::vector<double> frame(n_fft);
  std::vector<cplx> spec(fft.bins());
  for (std::size_t start = 0; start + n_fft <= white.size(); start += hop) {
    for (int i = 0; i < n_fft; ++i) frame[i] = white[start + i] * window[i];
    fft.forward(frame.data(), spec.data());
    for (int k = 0; k < fft.bins(); ++k) spec[k] *= ltas.magnitudes[k];
    fft.inverse(spec.data(), frame.data());
    for (int i = 0; i < n_fft; ++i) out[start + i] += frame[i];
  }

  Audio result;
  result.sample_rate = ltas.sample_rate;
  result.samples.assign(out.begin() + hop, out.begin() + hop + static_cast<std::ptrdiff_t>(n));
  const double r = rms(result.samples);
  if (r > 0.0) {
    for (double& v : result.samples) v *= kShapedNoiseRms / r;
  }
  return result;
}

EnvelopeProfile extract_envelope(const Audio& audio) {
  if (audio.samples.empty()) throw ValidationError("extract_envelope: empty audio");
  if (std::all_of(audio.samples.begin(), audio.samples.end(), [](double v) { return v == 0.0; })) {
    throw ValidationError("zero envelope");
  }
  const std::size_t n = audio.samples.size();
  const double rate = audio.sample_rate;
  // Zero padding keeps the circular low-pass from mixing the two ends.
  const auto len = static_cast<int>(n + static_cast<std::size_t>(rate / 4.0));

  std::vector<cplx> z(len, 0.0);
  for (std::size_t i = 0; i < n; ++i) z[i] = audio.samples[i];
  ComplexFft cfft(len);
  cfft.forward(z.data());
  // Analytic signal: keep DC (and Nyquist), double positive, drop negative.
  const int half = len / 2;
  for (int k = 1; k < len; ++k) {
    if (k < (len + 1) / 2) {
      z[k] *= 2.0;
    } else if (!(len % 2 == 0 && k == half)) {
      z[k] = 0.0;
    }
  }
  cfft.inverse(z.data());

  std::vector<double> mag(len);
  for (int i = 0; i < len; ++i) mag[i] = std::abs(z[i]);

  // Zero-phase low-pass with a raised-cosine edge, half amplitude at the cutoff.
  RealFft rfft(len);
  std::vector<cplx> spec(rfft.bins());
  rfft.forward(mag.data(), spec.data());
  const double lo = 0.75 * kEnvelopeCutoffHz;
  const double hi = 1.25 * kEnvelopeCutoffHz;
  for (int k = 0; k < rfft.bins(); ++k) {
    const double f = k * rate / len;
    double g = 1.0;
    if (f >= hi) {
      g = 0.0;
    } else if (f > lo) {
      g = 0.5 * (1.0 + std::cos(std::numbers::pi * (f - lo) / (hi - lo)));
    }
    spec[k] *= g;
  }
  rfft.inverse(spec.data(), mag.data());

  EnvelopeProfile env;
  env.frame_rate = kEnvelopeFrameRate;
  const double step = rate / kEnvelopeFrameRate;
  for (double t = 0.0; t < static_cast<double>(n); t += step) {
    env.samples.push_back(std::max(0.0, mag[static_cast<std::size_t>(t)]));
  }
  const double mean = std::accumulate(env.samples.begin(), env.samples.end(), 0.0) /
                      static_cast<double>(env.samples.size());
  if (!(mean > 0.0)) throw ValidationError("zero envelope");
  for (double& v : env.samples) v /= mean;
  return env;
}

namespace {

std::vector<double> resample_linear(const std::vector<double>& x, std::size_t target) {
  std::vector<double> out(target);
  if (x.size() == 1 || target == 1) {
    std::fill(out.begin(), out.end(), x.front());
    return out;
  }
  const double scale = static_cast<double>(x.size() - 1) / static_cast<double>(target - 1);
  for (std::size_t i = 0; i < target; ++i) {
    const double p = i * scale;
    const auto i0 = std::min(static_cast<std::size_t>(p), x.size() - 1);
    const std::size_t i1 = std::min(i0 + 1, x.size() - 1);
    const double frac = p - static_cast<double>(i0);
    out[i] = x[i0] + (x[i1] - x[i0]) * frac;
  }
  return out;
}

}  // namespace

EnvelopeProfile build_average_envelope(std::span<const Audio> utterances) {
  if (utterances.empty()) throw ValidationError("build_average_envelope: empty corpus");
  std::vector<EnvelopeProfile> envs;
  envs.reserve(utterances.size());
  for (const Audio& a : utterances) envs.push_back(extract_envelope(a));

  std::vector<std::size_t> lengths;
  for (const auto& e : envs) lengths.push_back(e.samples.size());
  std::sort(lengths.begin(), lengths.end());
  const std::size_t target = lengths[(lengths.size() - 1) / 2];

  EnvelopeProfile avg;
  avg.frame_rate = kEnvelopeFrameRate;
  avg.samples.assign(target, 0.0);
  for (const auto& e : envs) {
    const auto r = resample_linear(e.samples, target);
    for (std::size_t i = 0; i < target; ++i) avg.samples[i] += r[i];
  }
  const double mean =
      std::accumulate(avg.samples.begin(), avg.samples.end(), 0.0) / static_cast<double>(target);
  for (double& v : avg.samples) v /= mean;
  return avg;
}

Audio apply_modulation(const Audio& noise, const EnvelopeProfile& envelope) {
  validate(envelope);
  const auto& env = envelope.samples;
  const std::size_t len = env.size();
  Audio out;
  out.sample_rate = noise.sample_rate;
  out.samples.resize(noise.samples.size());
  const double frames_per_sample = envelope.frame_rate / noise.sample_rate;
  for (std::size_t i = 0; i < noise.samples.size(); ++i) {
    double p = static_cast<double>(i) * frames_per_sample;
    std::size_t i0, i1;
    if (p <= static_cast<double>(len - 1)) {
      i0 = static_cast<std::size_t>(p);
      i1 = std::min(i0 + 1, len - 1);
    } else {
      p = std::fmod(p, static_cast<double>(len));
      i0 = static_cast<std::size_t>(p);
      i1 = (i0 + 1) % len;
    }
    const double frac = p - std::floor(p);
    out.samples[i] = noise.samples[i] * (env[i0] + (env[i1] - env[i0]) * frac);
  }
  const double in_rms = rms(noise.samples);
  const double out_rms = rms(out.samples);
  if (out_rms > 0.0 && in_rms != out_rms) {
    const double g = in_rms / out_rms;
    for (double& v : out.samples) v *= g;
  }
  return out;
}

Audio synthesize_masker(const NoiseRecipe& recipe, double duration_s) {
  return apply_modulation(shape_noise(duration_s, recipe.ltas, recipe.seed), recipe.envelope);
}

MixResult mix_at_snr(const Audio& speech, const Audio& masker, double snr_db, std::uint64_t seed) {
  const std::size_t ls = speech.samples.size();
  const std::size_t lm = masker.samples.size();
  if (lm <= ls) throw ValidationError("mix_at_snr: masker must be longer than speech");
  if (speech.sample_rate != masker.sample_rate) {
    throw ValidationError("mix_at_snr: sample rate mismatch");
  }
  const double speech_rms = rms(speech.samples);
  if (!(speech_rms > 0.0)) throw ValidationError("mix_at_snr: zero-RMS speech");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, lm - ls);
  MixResult r;
  r.onset = pick(rng);
  r.end = r.onset + ls;
  const std::span<const double> segment(masker.samples.data() + r.onset, ls);
  const double seg_rms = rms(segment);
  if (!(seg_rms > 0.0)) throw ValidationError("mix_at_snr: zero-RMS masker segment");

  const double gain = speech_rms / (seg_rms * std::pow(10.0, snr_db / 20.0));
  r.scaled_masker.resize(ls);
  r.mix.sample_rate = speech.sample_rate;
  r.mix.samples.resize(ls);
  for (std::size_t i = 0; i < ls; ++i) {
    r.scaled_masker[i] = segment[i] * gain;
    r.mix.samples[i] = speech.samples[i] + r.scaled_masker[i];
  }
  return r;
}

double measure_snr(std::span<const double> speech, std::span<const double> masker) {
  if (speech.size() != masker.size()) throw ValidationError("measure_snr: length mismatch");
  const double s = rms(speech);
  const double m = rms(masker);
  if (!(s > 0.0) || !(m > 0.0)) throw ValidationError("measure_snr: zero RMS");
  return 20.0 * std::log10(s / m);
}

std::vector<BandLevel> third_octave_levels(const Ltas& ltas, double f_lo, double f_hi) {
  validate(ltas);
  std::vector<BandLevel> bands;
  const double bin_hz = static_cast<double>(ltas.sample_rate) / ltas.fft_size;
  for (int n = -30; n <= 15; ++n) {
    const double center = 1000.0 * std::pow(2.0, n / 3.0);
    if (center < f_lo * 0.999 || center > f_hi * 1.001) continue;
    const double lo = center * std::pow(2.0, -1.0 / 6.0);
    const double hi = center * std::pow(2.0, 1.0 / 6.0);
    BandLevel b;
    b.center_hz = center;
    double energy = 0.0;
    for (std::size_t k = 0; k < ltas.magnitudes.size(); ++k) {
      const double f = k * bin_hz;
      if (f >= lo && f < hi) {
        energy += ltas.magnitudes[k] * ltas.magnitudes[k];
        ++b.bins;
      }
    }
    if (b.bins == 0) continue;
    b.level_db = 10.0 * std::log10(std::max(energy, 1e-300));
    bands.push_back(b);
  }
  return bands;
}

}  // namespace selcal
