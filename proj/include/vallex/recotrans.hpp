#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vallex/nn/layers.hpp"
#include "vallex/nn/optim.hpp"

namespace vallex {

struct MaskSpec {
  double mask_prob = 0.08;  // chance that a frame starts a masked span
  int span_len = 10;

  void validate() const;
  bool operator==(const MaskSpec&) const = default;
};

struct RecoTransConfig {
  int attention_dim = 128;
  int heads = 4;
  int ffn_dim = 512;
  int enc1_layers = 2;
  int enc2_layers = 2;
  int dec_layers = 2;
  int prenet_channels = 64;
  std::vector<int> kernels{10, 3, 3, 3, 2};
  std::vector<int> strides{5, 2, 2, 2, 2};
  /// Number of real phonemes; the five inventory specials follow them, so the
  /// output vocabulary is num_phonemes + 5.
  int num_phonemes = 0;
  int max_len = 2048;
  double dropout = 0.0;
  double ctc_weight = 0.2;
  MaskSpec mask;

  int vocab() const { return num_phonemes + 5; }
  int bos() const { return num_phonemes + 1; }
  int eos() const { return num_phonemes + 2; }
  int blank() const { return num_phonemes + 4; }
  /// Product of the pre-net strides.
  int downsample() const;
  /// Input samples seen by one output frame.
  int receptive_field() const;
  /// Output frame count for an input of `samples` (0 when too short).
  int frames_for(int samples) const;

  void validate() const;
  std::string serialize() const;
  static RecoTransConfig parse(const std::string& text);
  bool operator==(const RecoTransConfig&) const = default;
};

/// Frame-level labels: frame f gets the phoneme whose segment contains the
/// center of its receptive field. `boundaries` has one entry per phoneme plus
/// the end sample.
std::vector<int> frame_targets(std::span<const int> phonemes, std::span<const int> boundaries, int num_frames,
                               const RecoTransConfig& config);

/// Per-frame mask flags: each frame starts a span with probability mask_prob.
std::vector<bool> sample_mask(int frames, const MaskSpec& spec, Rng& rng);

struct SpeechSample {
  std::vector<float> waveform;
  std::vector<int> frame_labels;  // one per pre-net frame
};

struct TextPair {
  std::vector<int> source;
  std::vector<int> target;
};

struct FinetuneSample {
  std::vector<float> waveform;
  std::vector<int> source;
  std::vector<int> target;
};

template <typename T>
class RecoTransModelT {
 public:
  RecoTransModelT(const RecoTransConfig& config, uint64_t seed);
  RecoTransModelT(const RecoTransModelT&) = delete;
  RecoTransModelT& operator=(const RecoTransModelT&) = delete;

  const RecoTransConfig& config() const { return config_; }
  nn::ParamList<T> parameters();

  /// Waveform (normalized to unit RMS) through the convolution stack and the
  /// projection to attention_dim; rows are frames.
  nn::Var<T> prenet_forward(std::span<const float> waveform) const;

  struct SpeechStates {
    nn::Var<T> enc1, enc2;  // packed rows
    std::vector<nn::AttnSpan> spans;
    std::vector<int> frames;
  };
  /// Speech encoder then semantic encoder. `masks`, when given, replaces the
  /// flagged pre-net frames by the learned mask embedding.
  SpeechStates encode_speech(std::span<const std::vector<float>> waveforms,
                             const std::vector<std::vector<bool>>* masks = nullptr, Rng* dropout_rng = nullptr) const;
  /// Semantic encoder over phoneme inputs; returns packed rows and spans.
  nn::Var<T> encode_text(std::span<const std::vector<int>> sources, std::vector<nn::AttnSpan>* spans,
                         Rng* dropout_rng = nullptr) const;
  /// Teacher-forced decoder logits for inputs [<bos>, target...] against the
  /// memory spans (one per sample).
  nn::Var<T> decode(std::span<const std::vector<int>> targets, const nn::Var<T>& memory,
                    std::span<const nn::AttnSpan> memory_spans, Rng* dropout_rng = nullptr) const;

  std::vector<nn::Parameter<T>> conv_w, conv_b;
  nn::LayerNorm<T> prenet_norm;
  nn::Linear<T> prenet_proj;
  nn::Parameter<T> mask_embedding;
  nn::Embedding<T> phoneme_embedding;
  std::vector<nn::TransformerLayer<T>> enc1, enc2, dec;
  nn::LayerNorm<T> head1_norm, head2_norm, ctc_norm, dec_norm;
  nn::Linear<T> head1, head2, ctc_hidden, ctc_out, dec_head;

 private:
  RecoTransConfig config_;
};

using RecoTransModel = RecoTransModelT<float>;

struct SpeechLossStats {
  long masked_frames = 0;
};

/// Mean over the batch of sum over masked frames of the post-enc1 and
/// post-enc2 cross-entropies. Masks are drawn from `mask_rng` unless given.
template <typename T>
nn::Var<T> speech_pretrain_loss(const RecoTransModelT<T>& model, std::span<const SpeechSample> batch, Rng& mask_rng,
                                const std::vector<std::vector<bool>>* masks = nullptr, Rng* dropout_rng = nullptr,
                                SpeechLossStats* stats = nullptr);

/// Mean over the batch of the teacher-forced decoder cross-entropy summed over
/// the target positions and the final <eos>.
template <typename T>
nn::Var<T> text_pretrain_loss(const RecoTransModelT<T>& model, std::span<const TextPair> batch,
                              Rng* dropout_rng = nullptr);

struct FinetuneParts {
  double ctc = 0.0;
  double ce = 0.0;
};

/// Mean over the batch of ctc_weight * CTC(reduced source) + CE(target).
template <typename T>
nn::Var<T> finetune_loss(const RecoTransModelT<T>& model, std::span<const FinetuneSample> batch,
                         Rng* dropout_rng = nullptr, FinetuneParts* parts = nullptr);

struct PretrainLosses {
  double speech = 0.0;
  double text = 0.0;
};

/// One optimizer step on L_speech + L_text; either batch may be empty.
PretrainLosses pretrain_step(RecoTransModel& model, nn::Adam<float>& optimizer, std::span<const SpeechSample> speech,
                             std::span<const TextPair> text, Rng& mask_rng, Rng* dropout_rng = nullptr);

double finetune_step(RecoTransModel& model, nn::Adam<float>& optimizer, std::span<const FinetuneSample> batch,
                     Rng* dropout_rng = nullptr);

struct Transcription {
  std::vector<int> source;
  std::vector<int> target;
  bool source_empty = false;
  bool target_empty = false;
  bool target_truncated = false;
  bool flagged() const { return source_empty || target_empty || target_truncated; }
};

/// Greedy CTC decode of the source phonemes and greedy decoder search for the
/// target phonemes (stopping at <eos> or after max_target tokens).
Transcription transcribe_translate(const RecoTransModel& model, std::span<const float> waveform, int max_target = 200);

}  // namespace vallex
