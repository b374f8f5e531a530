#pragma once

#include <filesystem>

#include "selcal/audio.hpp"
#include "selcal/linalg.hpp"

namespace selcal {

struct MelConfig {
  int n_mels = 80;
  double win_s = 0.025;
  double hop_s = 0.010;
};

inline constexpr double kMelFloor = 1e-10;

// Frames x n_mels matrix of ln(mel energy + 1e-10). HTK mel scale over
// [0, sample_rate/2], periodic Hann window zero-padded to the next power of
// two. Frame count is floor((len - win) / hop) + 1.
Matrix mel_spectrogram(const Audio& audio, const MelConfig& cfg = {});

// Frames x (nfft/2 + 1) one-sided |X|^2 with the same framing as the mel.
Matrix power_spectrogram(const Audio& audio, const MelConfig& cfg = {});

// Triangular filterbank weights, n_mels x (nfft/2 + 1).
Matrix mel_filterbank(int n_mels, int nfft, int sample_rate);

struct MelHeader {
  int n_frames = 0;
  int n_bins = 0;
};

// "MEL1" | u32 n_frames | u32 n_bins | n_frames*n_bins f32, little-endian,
// frame-major.
void write_mel(const std::filesystem::path& path, const Matrix& mel);
Matrix read_mel(const std::filesystem::path& path);
MelHeader read_mel_header(const std::filesystem::path& path);

}  // namespace selcal
