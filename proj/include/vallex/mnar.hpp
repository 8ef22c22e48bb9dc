#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vallex/codec.hpp"
#include "vallex/nn/layers.hpp"
#include "vallex/nn/optim.hpp"

namespace vallex {

struct MnarConfig {
  int layers = 4;
  int attention_dim = 128;
  int ffn_dim = 512;
  int heads = 4;
  int phoneme_vocab = 0;
  int acoustic_vocab = 0;  // codebook size K
  int num_acoustic_layers = 8;
  int max_len = 2048;
  double dropout = 0.0;

  void validate() const;
  std::string serialize() const;
  static MnarConfig parse(const std::string& text);
  bool operator==(const MnarConfig&) const = default;
};

/// Input for predicting acoustic layer `level` (2-based up to L): target
/// phonemes, a full reference grid and the first level-1 target layers.
struct PromptLayoutNAR {
  std::vector<int> phonemes;
  AcousticTokenGrid reference;
  AcousticTokenGrid partial;
  int level = 2;
};

template <typename T>
class MnarModelT {
 public:
  MnarModelT(const MnarConfig& config, uint64_t seed);
  MnarModelT(const MnarModelT&) = delete;
  MnarModelT& operator=(const MnarModelT&) = delete;

  const MnarConfig& config() const { return config_; }
  nn::ParamList<T> parameters();

  /// Per-frame vectors sum_k embed_k(grid[i, k]) over the grid's layers.
  nn::Var<T> sum_layer_embeddings(const AcousticTokenGrid& grid) const;

  /// Level logits for the target frames of each sample, packed row-wise
  /// (all samples must share the same level).
  nn::Var<T> forward(std::span<const PromptLayoutNAR> batch, Rng* dropout_rng = nullptr) const;

  nn::Embedding<T> phoneme_embedding;
  std::vector<nn::Embedding<T>> acoustic_embeddings;  // one table per codec layer
  std::vector<nn::TransformerLayer<T>> blocks;        // L-1 normalization sets
  std::vector<nn::LayerNorm<T>> final_norms;          // one per level 2..L
  std::vector<nn::Linear<T>> heads;                   // one per level 2..L

 private:
  MnarConfig config_;
};

using MnarModel = MnarModelT<float>;

/// Mean over the batch of each sample's mean per-frame negative log-likelihood
/// of layer `level` (taken from `target`).
template <typename T>
nn::Var<T> mnar_loss(const MnarModelT<T>& model, std::span<const PromptLayoutNAR> batch,
                     std::span<const AcousticTokenGrid> targets, Rng* dropout_rng = nullptr);

/// Training sample: phonemes S, the reference grid from an adjacent utterance
/// and the full target grid.
struct MnarSample {
  std::vector<int> phonemes;
  AcousticTokenGrid reference;
  AcousticTokenGrid target;
};

/// Uniform level draw in 2..L.
int draw_level(int num_layers, Rng& rng);

/// One Adam step at a single level drawn from `level_rng`; returns the loss and
/// writes the level used.
double mnar_train_step(MnarModel& model, nn::Adam<float>& optimizer, std::span<const MnarSample> batch,
                       Rng& level_rng, int* level_used = nullptr, Rng* dropout_rng = nullptr);

/// Fills layers 2..L by per-frame argmax (ties go to the lowest index).
AcousticTokenGrid mnar_infer(const MnarModel& model, std::span<const int> phonemes, const AcousticTokenGrid& reference,
                             const AcousticTokenGrid& first_layer);

}  // namespace vallex
