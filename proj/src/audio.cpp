#include "selcal/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "selcal/error.hpp"
#include "selcal/fileio.hpp"

namespace selcal {

namespace {

std::uint32_t le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
std::uint16_t le16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

void put32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Audio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw ValidationError(name + ": not a RIFF WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw ValidationError(name + ": truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0 && size >= 16) {
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == 0xFFFE && size >= 40) format = le16(chunk + 32);  // WAVE_FORMAT_EXTENSIBLE
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = size;
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt || !data) throw ValidationError(name + ": missing fmt or data chunk");
  if (channels != 1) throw ValidationError(name + ": only mono audio is supported");

  Audio audio;
  audio.sample_rate = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    audio.samples.resize(data_size / 2);
    for (std::size_t i = 0; i < audio.samples.size(); ++i) {
      audio.samples[i] = static_cast<std::int16_t>(le16(data + 2 * i)) / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    audio.samples.resize(data_size / 4);
    for (std::size_t i = 0; i < audio.samples.size(); ++i) {
      const std::uint32_t u = le32(data + 4 * i);
      float f;
      std::memcpy(&f, &u, 4);
      audio.samples[i] = f;
    }
  } else {
    throw ValidationError(name + ": unsupported encoding (need 16-bit PCM or 32-bit float)");
  }
  return audio;
}

void write_wav(const std::filesystem::path& path, const Audio& audio, WavEncoding encoding) {
  const bool pcm = encoding == WavEncoding::Pcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint32_t data_size = static_cast<std::uint32_t>(audio.samples.size() * (bits / 8));
  write_atomically(
      path,
      [&](std::ostream& out) {
        out.write("RIFF", 4);
        put32(out, 36 + data_size);
        out.write("WAVEfmt ", 8);
        put32(out, 16);
        put16(out, pcm ? 1 : 3);
        put16(out, 1);
        put32(out, static_cast<std::uint32_t>(audio.sample_rate));
        put32(out, static_cast<std::uint32_t>(audio.sample_rate) * (bits / 8));
        put16(out, bits / 8);
        put16(out, bits);
        out.write("data", 4);
        put32(out, data_size);
        for (double s : audio.samples) {
          if (pcm) {
            const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
            put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
          } else {
            const float f = static_cast<float>(s);
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            put32(out, u);
          }
        }
      },
      true);
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc / static_cast<double>(x.size()));
}

}  // namespace selcal
