#pragma once

#include <span>
#include <vector>

#include "vallex/corpus.hpp"

namespace vallex {

struct OracleOptions {
  int hop = 20;          // analysis hop in samples
  int window = 256;      // Hann window length
  int fft_size = 1024;
  double fmin = 75.0;
  double fmax = 420.0;
  double silence_db = -40.0;       // frames this far below the loudest are silent
  double min_segment = 0.03;       // seconds; shorter runs are merged into a neighbor
  double max_residual_db = 12.0;   // template fit RMS above this marks low confidence
};

struct OracleSegment {
  int phoneme = -1;
  long start = 0;  // samples
  long end = 0;
  double residual_db = 0.0;  // RMS log-amplitude misfit of the chosen template
};

struct OracleResult {
  PhonemeSequence phonemes;
  std::vector<OracleSegment> segments;
  double f0 = 0.0;
  double tilt = 0.0;
  bool low_confidence = false;

  /// Segment durations in seconds.
  std::vector<double> durations(int sample_rate) const;
};

/// Recovers phonemes, f0 and tilt from a waveform rendered with `voice` by
/// matching per-frame harmonic log-amplitudes against each phoneme's timbre
/// pattern plus a fitted gain and tilt.
OracleResult oracle_decode(std::span<const float> waveform, const VoiceModel& voice, const OracleOptions& options = {});

}  // namespace vallex
