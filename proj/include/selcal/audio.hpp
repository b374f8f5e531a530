#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace selcal {

inline constexpr int kSampleRate = 16000;

struct Audio {
  std::vector<double> samples;
  int sample_rate = kSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

enum class WavEncoding { Pcm16, Float32 };

// Mono RIFF WAVE, 16-bit PCM or 32-bit IEEE float.
Audio read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Audio& audio,
               WavEncoding encoding = WavEncoding::Float32);

double rms(std::span<const double> x);

}  // namespace selcal
