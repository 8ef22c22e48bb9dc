#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "vallex/matrix.hpp"

namespace vallex {

/// Frame analysis/synthesis parameters. The feature vector holds
/// round(0.4*dims) log-spaced pitch-band filters (75-450 Hz, 64 ms window)
/// followed by envelope filters spaced on ln(1 + f/700) from 500 to 3750 Hz
/// (32 ms window); every entry is 10*log10(energy + 1e-10).
struct CodecParams {
  int sample_rate = 8000;
  int hop = 80;
  int dims = 20;

  bool operator==(const CodecParams&) const = default;
};

inline constexpr float kFeatureFloorDb = -100.0f;

struct FrameFeatures {
  MatrixF frames;  // N x D
  int hop = 0;
  int sample_rate = 0;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dims() const { return static_cast<int>(frames.cols()); }
};

FrameFeatures analyze(std::span<const float> waveform, const CodecParams& params);
/// Sinusoidal resynthesis; output length is N*hop samples.
std::vector<float> synthesize(const FrameFeatures& features, const CodecParams& params);
/// Per-frame f0 track used by synthesize (after median smoothing).
std::vector<double> estimate_f0_track(const FrameFeatures& features, const CodecParams& params);

struct Codebook {
  MatrixF vectors;  // K x D
  int layer_index = 0;  // 1-based
};

struct RvqModel {
  std::vector<Codebook> codebooks;
  CodecParams params;

  int layers() const { return static_cast<int>(codebooks.size()); }
  int codebook_size() const { return codebooks.empty() ? 0 : static_cast<int>(codebooks[0].vectors.rows()); }
  int dims() const { return params.dims; }

  void save(const std::filesystem::path& path) const;
  static RvqModel load(const std::filesystem::path& path);
};

/// N frames x L layers of codebook indices, row-major.
struct AcousticTokenGrid {
  int frames = 0;
  int layers = 0;
  std::vector<int> tokens;

  AcousticTokenGrid() = default;
  AcousticTokenGrid(int n, int l) : frames(n), layers(l), tokens(static_cast<size_t>(n) * l, 0) {}

  int& at(int i, int l) { return tokens[static_cast<size_t>(i) * layers + l]; }
  int at(int i, int l) const { return tokens[static_cast<size_t>(i) * layers + l]; }
  /// Tokens of one layer across all frames.
  std::vector<int> layer(int l) const;
  void set_layer(int l, std::span<const int> values);
  /// First `l` layers.
  AcousticTokenGrid prefix_layers(int l) const;

  bool operator==(const AcousticTokenGrid&) const = default;
};

struct RvqTrainStats {
  std::vector<double> mean_residual_norm;  // after each layer
  std::vector<int> iterations_run;
  int empty_cluster_splits = 0;
};

RvqModel train_rvq(const MatrixF& frames, int layers, int codebook_size, int iterations, uint64_t seed,
                   const CodecParams& params, RvqTrainStats* stats = nullptr);

AcousticTokenGrid rvq_encode(const FrameFeatures& features, const RvqModel& model);
/// Also returns the residual left after the last layer (double precision).
AcousticTokenGrid rvq_encode(const FrameFeatures& features, const RvqModel& model, MatrixD* residual);
/// Sum of the selected rows of the first `layers` codebooks (all when < 0).
FrameFeatures rvq_decode(const AcousticTokenGrid& grid, const RvqModel& model, int layers = -1);

}  // namespace vallex
