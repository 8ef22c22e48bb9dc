#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace vallex {

struct Waveform {
  std::vector<float> samples;  // mono, full scale = 1.0
  int sample_rate = 0;
};

/// Writes 16-bit signed little-endian PCM mono RIFF/WAVE. Samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, std::span<const float> samples, int sample_rate);

/// Reads a 16-bit PCM RIFF/WAVE file; multi-channel input is rejected.
Waveform read_wav(const std::filesystem::path& path);

/// Quantizes to int16 and back, i.e. what a write/read round trip yields.
std::vector<float> quantize_pcm16(std::span<const float> samples);

}  // namespace vallex
