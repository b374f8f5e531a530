#include "selcal/mel.hpp"

#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "fft.hpp"
#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

namespace {

struct Framing {
  int win = 0;
  int hop = 0;
  int nfft = 0;
  int frames = 0;
};

Framing framing(const Audio& audio, const MelConfig& cfg) {
  Framing f;
  f.win = static_cast<int>(std::lround(cfg.win_s * audio.sample_rate));
  f.hop = static_cast<int>(std::lround(cfg.hop_s * audio.sample_rate));
  if (f.win < 2 || f.hop < 1) throw ValidationError("mel: window/hop too small");
  if (audio.samples.size() < static_cast<std::size_t>(f.win)) {
    throw ValidationError("mel: audio shorter than one window");
  }
  f.nfft = static_cast<int>(std::bit_ceil(static_cast<unsigned>(f.win)));
  f.frames = static_cast<int>((audio.samples.size() - f.win) / f.hop) + 1;
  return f;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

Matrix power_spectrogram(const Audio& audio, const MelConfig& cfg) {
  const Framing f = framing(audio, cfg);
  detail::RealFft fft(f.nfft);
  const auto window = detail::hann_window(f.win);
  Matrix power(f.frames, fft.bins());
  std::vector<double> frame(f.nfft, 0.0);
  std::vector<std::complex<double>> spec(fft.bins());
  for (int t = 0; t < f.frames; ++t) {
    const double* x = audio.samples.data() + static_cast<std::size_t>(t) * f.hop;
    for (int i = 0; i < f.win; ++i) frame[i] = x[i] * window[i];
    fft.forward(frame.data(), spec.data());
    for (int k = 0; k < fft.bins(); ++k) power(t, k) = std::norm(spec[k]);
  }
  return power;
}

Matrix mel_filterbank(int n_mels, int nfft, int sample_rate) {
  const int bins = nfft / 2 + 1;
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int m = 0; m < n_mels + 2; ++m) edges[m] = mel_to_hz(mel_max * m / (n_mels + 1));
  Matrix fb = Matrix::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * sample_rate / nfft;
      if (hz > lo && hz < hi) {
        fb(m, k) = hz <= center ? (hz - lo) / (center - lo) : (hi - hz) / (hi - center);
      }
    }
  }
  return fb;
}

Matrix mel_spectrogram(const Audio& audio, const MelConfig& cfg) {
  if (cfg.n_mels < 1) throw ValidationError("mel: n_mels must be positive");
  const Framing f = framing(audio, cfg);
  const Matrix power = power_spectrogram(audio, cfg);
  const Matrix fb = mel_filterbank(cfg.n_mels, f.nfft, audio.sample_rate);
  Matrix mel = power * fb.transpose();
  return mel.unaryExpr([](double e) { return std::log(e + kMelFloor); });
}

void write_mel(const std::filesystem::path& path, const Matrix& mel) {
  write_atomically(
      path,
      [&](std::ostream& out) {
        out.write("MEL1", 4);
        auto put32 = [&](std::uint32_t v) {
          unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
          out.write(reinterpret_cast<const char*>(b), 4);
        };
        put32(static_cast<std::uint32_t>(mel.rows()));
        put32(static_cast<std::uint32_t>(mel.cols()));
        for (Eigen::Index i = 0; i < mel.size(); ++i) {
          const float v = static_cast<float>(mel.data()[i]);
          std::uint32_t u;
          std::memcpy(&u, &v, 4);
          put32(u);
        }
      },
      true);
}

namespace {

std::uint32_t get32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

MelHeader parse_header(std::istream& in, const std::string& name) {
  unsigned char head[12];
  if (!in.read(reinterpret_cast<char*>(head), 12)) throw ValidationError(name + ": truncated mel header");
  if (std::memcmp(head, "MEL1", 4) != 0) throw ValidationError(name + ": bad mel magic");
  MelHeader h;
  h.n_frames = static_cast<int>(get32(head + 4));
  h.n_bins = static_cast<int>(get32(head + 8));
  if (h.n_frames < 1 || h.n_bins < 1) throw ValidationError(name + ": empty mel");
  return h;
}

}  // namespace

MelHeader read_mel_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_header(in, path.string());
}

Matrix read_mel(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const MelHeader h = parse_header(in, path.string());
  const std::size_t count = static_cast<std::size_t>(h.n_frames) * h.n_bins;
  std::vector<unsigned char> raw(count * 4);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw ValidationError(path.string() + ": truncated mel data");
  }
  Matrix mel(h.n_frames, h.n_bins);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = get32(raw.data() + 4 * i);
    float v;
    std::memcpy(&v, &u, 4);
    mel.data()[i] = v;
  }
  return mel;
}

}  // namespace selcal
