#include "vallex/mnar.hpp"

#include <algorithm>
#include <cmath>

#include "vallex/common.hpp"
#include "vallex/config.hpp"

namespace vallex {

using nn::AttnSpan;
using nn::Mat;
using nn::Var;

void MnarConfig::validate() const {
  if (layers < 1 || attention_dim < 1 || ffn_dim < 1 || heads < 1)
    throw InvalidArgument("mnar: layers, dims and heads must be positive");
  if (attention_dim % heads != 0) throw InvalidArgument("mnar: attention_dim must be divisible by heads");
  if (attention_dim % 2 != 0) throw InvalidArgument("mnar: attention_dim must be even");
  if (phoneme_vocab < 1 || acoustic_vocab < 1) throw InvalidArgument("mnar: vocabularies must be nonempty");
  if (num_acoustic_layers < 2) throw InvalidArgument("mnar: need at least two acoustic layers");
  if (max_len < 2) throw InvalidArgument("mnar: max_len too small");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("mnar: dropout must be in [0, 1)");
}

std::string MnarConfig::serialize() const {
  KeyValues kv;
  kv.set("layers", layers);
  kv.set("attention_dim", attention_dim);
  kv.set("ffn_dim", ffn_dim);
  kv.set("heads", heads);
  kv.set("phoneme_vocab", phoneme_vocab);
  kv.set("acoustic_vocab", acoustic_vocab);
  kv.set("num_acoustic_layers", num_acoustic_layers);
  kv.set("max_len", max_len);
  kv.set("dropout", dropout);
  return kv.to_string();
}

MnarConfig MnarConfig::parse(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  MnarConfig c;
  c.layers = kv.get_int("layers", c.layers);
  c.attention_dim = kv.get_int("attention_dim", c.attention_dim);
  c.ffn_dim = kv.get_int("ffn_dim", c.ffn_dim);
  c.heads = kv.get_int("heads", c.heads);
  c.phoneme_vocab = kv.get_int("phoneme_vocab", c.phoneme_vocab);
  c.acoustic_vocab = kv.get_int("acoustic_vocab", c.acoustic_vocab);
  c.num_acoustic_layers = kv.get_int("num_acoustic_layers", c.num_acoustic_layers);
  c.max_len = kv.get_int("max_len", c.max_len);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.validate();
  return c;
}

template <typename T>
MnarModelT<T>::MnarModelT(const MnarConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.attention_dim;
  const int levels = config_.num_acoustic_layers - 1;
  phoneme_embedding = nn::Embedding<T>(config_.phoneme_vocab, d, rng);
  for (int k = 0; k < config_.num_acoustic_layers; ++k) acoustic_embeddings.emplace_back(config_.acoustic_vocab, d, rng);
  for (int i = 0; i < config_.layers; ++i) blocks.emplace_back(d, config_.heads, config_.ffn_dim, false, levels, config_.layers, rng);
  for (int l = 0; l < levels; ++l) {
    final_norms.emplace_back(d);
    heads.emplace_back(d, config_.acoustic_vocab, rng);
  }
}

template <typename T>
nn::ParamList<T> MnarModelT<T>::parameters() {
  nn::ParamList<T> out;
  phoneme_embedding.collect("phoneme_embedding", out);
  for (size_t k = 0; k < acoustic_embeddings.size(); ++k)
    acoustic_embeddings[k].collect("acoustic_embedding" + std::to_string(k + 1), out);
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("block" + std::to_string(i), out);
  for (size_t l = 0; l < heads.size(); ++l) {
    final_norms[l].collect("final_norm" + std::to_string(l + 2), out);
    heads[l].collect("head" + std::to_string(l + 2), out);
  }
  return out;
}

template <typename T>
Var<T> MnarModelT<T>::sum_layer_embeddings(const AcousticTokenGrid& grid) const {
  if (grid.layers < 1) throw InvalidArgument("mnar: grid has no layers");
  if (grid.layers > config_.num_acoustic_layers)
    throw InvalidArgument("mnar: grid layer " + std::to_string(grid.layers) + " beyond the embedding tables");
  Var<T> out;
  for (int k = 0; k < grid.layers; ++k) {
    const std::vector<int> ids = grid.layer(k);
    const Var<T> e = acoustic_embeddings[k](ids);
    out = k == 0 ? e : nn::add(out, e);
  }
  return out;
}

namespace {

std::vector<int> iota_positions(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  return p;
}

}  // namespace

template <typename T>
Var<T> MnarModelT<T>::forward(std::span<const PromptLayoutNAR> batch, Rng* dropout_rng) const {
  if (batch.empty()) throw InvalidArgument("mnar: empty batch");
  const int L = config_.num_acoustic_layers;
  const int level = batch[0].level;
  if (level < 2 || level > L) throw InvalidArgument("mnar: level must be in 2..L");
  const int d = config_.attention_dim;
  std::vector<Var<T>> parts;
  std::vector<AttnSpan> spans;
  std::vector<int> out_rows;
  int total = 0;
  for (const auto& s : batch) {
    if (s.level != level) throw InvalidArgument("mnar: all samples in a batch must share one level");
    if (s.reference.frames < 1 || s.reference.layers != L)
      throw InvalidArgument("mnar: missing or incomplete reference grid");
    if (s.partial.layers != level - 1) throw InvalidArgument("mnar: partial grid must have exactly level-1 layers");
    if (s.partial.frames < 1) throw InvalidArgument("mnar: empty target frames");
    for (int p : s.phonemes)
      if (p < 0 || p >= config_.phoneme_vocab) throw InvalidArgument("mnar: phoneme id out of range");
    for (const auto* g : {&s.reference, &s.partial})
      for (int t : g->tokens)
        if (t < 0 || t >= config_.acoustic_vocab) throw InvalidArgument("mnar: acoustic token out of range");
    const int ns = static_cast<int>(s.phonemes.size());
    const int nr = s.reference.frames;
    const int n = s.partial.frames;
    const int len = ns + nr + n;
    if (len > config_.max_len) throw InvalidArgument("mnar: sequence exceeds max_len");
    if (ns > 0)
      parts.push_back(nn::add_constant(phoneme_embedding(s.phonemes), nn::sinusoid_table<T>(iota_positions(ns), d)));
    parts.push_back(nn::add_constant(sum_layer_embeddings(s.reference), nn::sinusoid_table<T>(iota_positions(nr), d)));
    parts.push_back(nn::add_constant(sum_layer_embeddings(s.partial), nn::sinusoid_table<T>(iota_positions(n), d)));
    spans.push_back(AttnSpan{total, len, total, len, false});
    for (int i = 0; i < n; ++i) out_rows.push_back(total + ns + nr + i);
    total += len;
  }
  Var<T> x = nn::concat_rows(parts);
  const bool use_dropout = dropout_rng && config_.dropout > 0.0;
  if (use_dropout) x = nn::dropout(x, T(config_.dropout), *dropout_rng);
  typename nn::TransformerLayer<T>::Context ctx;
  ctx.self_spans = spans;
  ctx.norm_set = level - 2;
  ctx.dropout = use_dropout ? T(config_.dropout) : T(0);
  ctx.rng = dropout_rng;
  for (const auto& block : blocks) x = block(x, ctx);
  x = nn::gather_rows(x, std::span<const int>(out_rows));
  return heads[level - 2](final_norms[level - 2](x));
}

template <typename T>
Var<T> mnar_loss(const MnarModelT<T>& model, std::span<const PromptLayoutNAR> batch,
                 std::span<const AcousticTokenGrid> targets, Rng* dropout_rng) {
  if (targets.size() != batch.size()) throw InvalidArgument("mnar_loss: one target grid per sample required");
  const Var<T> logits = model.forward(batch, dropout_rng);
  Var<T> loss;
  int row = 0;
  for (size_t b = 0; b < batch.size(); ++b) {
    const int n = batch[b].partial.frames;
    const int level = batch[b].level;
    if (targets[b].frames != n || targets[b].layers < level)
      throw InvalidArgument("mnar_loss: target grid does not cover the level");
    const std::vector<int> y = targets[b].layer(level - 1);
    const Var<T> ce = nn::cross_entropy_sum(nn::slice_rows(logits, row, n), std::span<const int>(y));
    const Var<T> term = nn::scale(ce, T(1.0 / (static_cast<double>(n) * batch.size())));
    loss = b == 0 ? term : nn::add(loss, term);
    row += n;
  }
  return loss;
}

int draw_level(int num_layers, Rng& rng) {
  if (num_layers < 2) throw InvalidArgument("draw_level: need at least two layers");
  return 2 + static_cast<int>(rng.below(num_layers - 1));
}

double mnar_train_step(MnarModel& model, nn::Adam<float>& optimizer, std::span<const MnarSample> batch,
                       Rng& level_rng, int* level_used, Rng* dropout_rng) {
  if (batch.empty()) throw InvalidArgument("mnar_train_step: empty batch");
  const int level = draw_level(model.config().num_acoustic_layers, level_rng);
  if (level_used) *level_used = level;
  std::vector<PromptLayoutNAR> layouts;
  std::vector<AcousticTokenGrid> targets;
  for (const auto& s : batch) {
    if (s.reference.frames == 0) throw InvalidArgument("mnar_train_step: missing reference grid");
    layouts.push_back(PromptLayoutNAR{s.phonemes, s.reference, s.target.prefix_layers(level - 1), level});
    targets.push_back(s.target);
  }
  const Var<float> loss = mnar_loss(model, std::span<const PromptLayoutNAR>(layouts),
                                    std::span<const AcousticTokenGrid>(targets), dropout_rng);
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NumericalError("mnar: non-finite loss at step " + std::to_string(optimizer.steps_taken() + 1) + ", level " +
                         std::to_string(level));
  nn::backward(loss);
  optimizer.step();
  return value;
}

AcousticTokenGrid mnar_infer(const MnarModel& model, std::span<const int> phonemes, const AcousticTokenGrid& reference,
                             const AcousticTokenGrid& first_layer) {
  const int L = model.config().num_acoustic_layers;
  if (first_layer.layers < 1) throw InvalidArgument("mnar_infer: first layer missing");
  if (first_layer.frames < 1) throw InvalidArgument("mnar_infer: no frames to complete");
  const int n = first_layer.frames;
  AcousticTokenGrid grid(n, L);
  grid.set_layer(0, first_layer.layer(0));
  nn::NoGradGuard guard;
  for (int level = 2; level <= L; ++level) {
    PromptLayoutNAR layout{std::vector<int>(phonemes.begin(), phonemes.end()), reference, grid.prefix_layers(level - 1),
                           level};
    const Var<float> logits = model.forward(std::span<const PromptLayoutNAR>(&layout, 1));
    if (logits.rows() != n) throw InvalidArgument("mnar_infer: frame-count mismatch");
    std::vector<int> tok(n);
    for (int i = 0; i < n; ++i) {
      const auto row = logits.value().row(i);
      int best = 0;
      for (int j = 1; j < row.size(); ++j)
        if (row(j) > row(best)) best = j;
      tok[i] = best;
    }
    grid.set_layer(level - 1, tok);
  }
  return grid;
}

template class MnarModelT<float>;
template class MnarModelT<double>;
template Var<float> mnar_loss(const MnarModelT<float>&, std::span<const PromptLayoutNAR>,
                              std::span<const AcousticTokenGrid>, Rng*);
template Var<double> mnar_loss(const MnarModelT<double>&, std::span<const PromptLayoutNAR>,
                               std::span<const AcousticTokenGrid>, Rng*);

}  // namespace vallex
