#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vallex/nn/layers.hpp"
#include "vallex/nn/optim.hpp"

namespace vallex {

struct MarConfig {
  int layers = 4;
  int attention_dim = 128;
  int ffn_dim = 512;
  int heads = 4;
  int phoneme_vocab = 0;
  int acoustic_vocab = 0;  // codebook size + 1; the last symbol is <eos>
  int num_languages = 2;
  int max_len = 2048;
  double dropout = 0.0;

  int eos() const { return acoustic_vocab - 1; }
  /// Index of the extra "no language" LID row.
  int neutral_language() const { return num_languages; }
  void validate() const;
  std::string serialize() const;
  static MarConfig parse(const std::string& text);
  bool operator==(const MarConfig&) const = default;
};

/// Conditioning sequence for the AR model: phoneme segments followed by one
/// acoustic segment (first-layer tokens). Each acoustic token carries its own
/// LID index; the neutral index means "no language".
struct PromptLayoutAR {
  std::vector<std::vector<int>> phoneme_segments;
  std::vector<int> acoustic;
  std::vector<int> acoustic_language;  // same length as `acoustic`
  int target_language = 0;             // LID for generated positions

  int length() const;
  /// (start, length) of every phoneme segment, then the acoustic segment.
  std::vector<std::pair<int, int>> segment_offsets() const;
};

/// Position i may attend to j iff j <= i.
std::vector<std::vector<bool>> causal_mask(int n);

/// Sinusoid position indices restarting at 0 at every segment boundary.
std::vector<int> segment_positions(const PromptLayoutAR& layout);

template <typename T>
class MarModelT {
 public:
  MarModelT(const MarConfig& config, uint64_t seed);
  MarModelT(const MarModelT&) = delete;
  MarModelT& operator=(const MarModelT&) = delete;

  const MarConfig& config() const { return config_; }
  nn::ParamList<T> parameters();

  /// Logits (packed rows, one per sequence position) for a batch of layouts.
  nn::Var<T> forward(std::span<const PromptLayoutAR> batch, Rng* dropout_rng = nullptr) const;

  nn::Embedding<T> phoneme_embedding, acoustic_embedding, language_embedding;
  std::vector<nn::TransformerLayer<T>> blocks;
  nn::LayerNorm<T> final_norm;
  nn::Linear<T> head;

 private:
  MarConfig config_;
};

using MarModel = MarModelT<float>;

struct MarLossStats {
  double nll_sum = 0.0;   // summed over all predictions in the batch
  long predictions = 0;
};

/// Next-token targets for every row of a layout: the last phoneme position
/// predicts the first acoustic token, each acoustic position predicts the next
/// one and the final one predicts <eos>; other rows are ignored (-1).
std::vector<int> mar_targets(const PromptLayoutAR& layout, int eos);

/// Mean over the batch of each sample's per-token negative log-likelihood.
template <typename T>
nn::Var<T> mar_loss(const MarModelT<T>& model, std::span<const PromptLayoutAR> batch, Rng* dropout_rng = nullptr,
                    MarLossStats* stats = nullptr);

/// One Adam step on mar_loss; throws NumericalError on a non-finite loss.
double mar_train_step(MarModel& model, nn::Adam<float>& optimizer, std::span<const PromptLayoutAR> batch,
                      Rng* dropout_rng = nullptr);

struct DecodeParams {
  double temperature = 1.0;  // <= 0 selects argmax
  int top_k = 0;             // 0 keeps the full distribution
  int max_frames = 2000;
  uint64_t seed = 0;
};

struct MarSample {
  std::vector<int> tokens;  // generated first-layer tokens, <eos> excluded
  bool truncated = false;
};

/// Autoregressively extends layout.acoustic; generated positions carry
/// layout.target_language.
MarSample mar_sample(const MarModel& model, const PromptLayoutAR& layout, const DecodeParams& params);

/// Logits of the next acoustic token after the layout (no sampling).
std::vector<float> mar_next_logits(const MarModel& model, const PromptLayoutAR& layout);

}  // namespace vallex
