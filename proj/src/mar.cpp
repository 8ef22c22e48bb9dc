#include "vallex/mar.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "vallex/common.hpp"
#include "vallex/config.hpp"

namespace vallex {

using nn::AttnSpan;
using nn::Mat;
using nn::Var;

void MarConfig::validate() const {
  if (layers < 1 || attention_dim < 1 || ffn_dim < 1 || heads < 1)
    throw InvalidArgument("mar: layers, dims and heads must be positive");
  if (attention_dim % heads != 0) throw InvalidArgument("mar: attention_dim must be divisible by heads");
  if (attention_dim % 2 != 0) throw InvalidArgument("mar: attention_dim must be even");
  if (phoneme_vocab < 1) throw InvalidArgument("mar: phoneme_vocab must be positive");
  if (acoustic_vocab < 2) throw InvalidArgument("mar: acoustic_vocab must include <eos>");
  if (num_languages < 1) throw InvalidArgument("mar: num_languages must be positive");
  if (max_len < 2) throw InvalidArgument("mar: max_len too small");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("mar: dropout must be in [0, 1)");
}

std::string MarConfig::serialize() const {
  KeyValues kv;
  kv.set("layers", layers);
  kv.set("attention_dim", attention_dim);
  kv.set("ffn_dim", ffn_dim);
  kv.set("heads", heads);
  kv.set("phoneme_vocab", phoneme_vocab);
  kv.set("acoustic_vocab", acoustic_vocab);
  kv.set("num_languages", num_languages);
  kv.set("max_len", max_len);
  kv.set("dropout", dropout);
  return kv.to_string();
}

MarConfig MarConfig::parse(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  MarConfig c;
  c.layers = kv.get_int("layers", c.layers);
  c.attention_dim = kv.get_int("attention_dim", c.attention_dim);
  c.ffn_dim = kv.get_int("ffn_dim", c.ffn_dim);
  c.heads = kv.get_int("heads", c.heads);
  c.phoneme_vocab = kv.get_int("phoneme_vocab", c.phoneme_vocab);
  c.acoustic_vocab = kv.get_int("acoustic_vocab", c.acoustic_vocab);
  c.num_languages = kv.get_int("num_languages", c.num_languages);
  c.max_len = kv.get_int("max_len", c.max_len);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.validate();
  return c;
}

int PromptLayoutAR::length() const {
  int n = static_cast<int>(acoustic.size());
  for (const auto& s : phoneme_segments) n += static_cast<int>(s.size());
  return n;
}

std::vector<std::pair<int, int>> PromptLayoutAR::segment_offsets() const {
  std::vector<std::pair<int, int>> out;
  int at = 0;
  for (const auto& s : phoneme_segments) {
    out.emplace_back(at, static_cast<int>(s.size()));
    at += static_cast<int>(s.size());
  }
  out.emplace_back(at, static_cast<int>(acoustic.size()));
  return out;
}

std::vector<std::vector<bool>> causal_mask(int n) {
  if (n < 1) throw InvalidArgument("causal_mask: n must be positive");
  std::vector<std::vector<bool>> m(n, std::vector<bool>(n, false));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m[i][j] = true;
  return m;
}

std::vector<int> segment_positions(const PromptLayoutAR& layout) {
  std::vector<int> pos;
  pos.reserve(layout.length());
  for (const auto& [start, len] : layout.segment_offsets())
    for (int i = 0; i < len; ++i) pos.push_back(i);
  return pos;
}

namespace {

void check_layout(const PromptLayoutAR& layout, const MarConfig& c) {
  if (layout.acoustic_language.size() != layout.acoustic.size())
    throw InvalidArgument("mar: acoustic_language must have one entry per acoustic token");
  const int n = layout.length();
  if (n < 1) throw InvalidArgument("mar: empty layout");
  if (n > c.max_len) throw InvalidArgument("mar: sequence of length " + std::to_string(n) + " exceeds max_len");
  for (const auto& seg : layout.phoneme_segments)
    for (int p : seg)
      if (p < 0 || p >= c.phoneme_vocab) throw InvalidArgument("mar: phoneme id out of range");
  for (int a : layout.acoustic)
    if (a < 0 || a >= c.acoustic_vocab) throw InvalidArgument("mar: acoustic token out of range");
  auto lid_ok = [&](int l) { return l >= 0 && l <= c.num_languages; };
  for (int l : layout.acoustic_language)
    if (!lid_ok(l)) throw InvalidArgument("mar: language index out of range");
  if (!lid_ok(layout.target_language)) throw InvalidArgument("mar: target language out of range");
}

}  // namespace

template <typename T>
MarModelT<T>::MarModelT(const MarConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.attention_dim;
  phoneme_embedding = nn::Embedding<T>(config_.phoneme_vocab, d, rng);
  acoustic_embedding = nn::Embedding<T>(config_.acoustic_vocab, d, rng);
  language_embedding = nn::Embedding<T>(config_.num_languages + 1, d, rng);
  for (int i = 0; i < config_.layers; ++i)
    blocks.emplace_back(d, config_.heads, config_.ffn_dim, false, 1, config_.layers, rng);
  final_norm = nn::LayerNorm<T>(d);
  head = nn::Linear<T>(d, config_.acoustic_vocab, rng);
}

template <typename T>
nn::ParamList<T> MarModelT<T>::parameters() {
  nn::ParamList<T> out;
  phoneme_embedding.collect("phoneme_embedding", out);
  acoustic_embedding.collect("acoustic_embedding", out);
  language_embedding.collect("language_embedding", out);
  for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("block" + std::to_string(i), out);
  final_norm.collect("final_norm", out);
  head.collect("head", out);
  return out;
}

template <typename T>
Var<T> MarModelT<T>::forward(std::span<const PromptLayoutAR> batch, Rng* dropout_rng) const {
  if (batch.empty()) throw InvalidArgument("mar: empty batch");
  const int d = config_.attention_dim;
  std::vector<Var<T>> parts;
  std::vector<AttnSpan> spans;
  int total = 0;
  for (const auto& layout : batch) {
    check_layout(layout, config_);
    const std::vector<int> pos = segment_positions(layout);
    const Mat<T> pe = nn::sinusoid_table<T>(pos, d);
    int row = 0;
    for (const auto& seg : layout.phoneme_segments) {
      if (seg.empty()) continue;
      const int n = static_cast<int>(seg.size());
      parts.push_back(nn::add_constant(phoneme_embedding(seg), Mat<T>(pe.middleRows(row, n))));
      row += n;
    }
    if (!layout.acoustic.empty()) {
      const int n = static_cast<int>(layout.acoustic.size());
      Var<T> e = nn::add(acoustic_embedding(layout.acoustic), language_embedding(layout.acoustic_language));
      parts.push_back(nn::add_constant(e, Mat<T>(pe.middleRows(row, n))));
      row += n;
    }
    spans.push_back(AttnSpan{total, row, total, row, true});
    total += row;
  }
  Var<T> x = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  const bool use_dropout = dropout_rng && config_.dropout > 0.0;
  if (use_dropout) x = nn::dropout(x, T(config_.dropout), *dropout_rng);
  typename nn::TransformerLayer<T>::Context ctx;
  ctx.self_spans = spans;
  ctx.dropout = use_dropout ? T(config_.dropout) : T(0);
  ctx.rng = dropout_rng;
  for (const auto& block : blocks) x = block(x, ctx);
  return head(final_norm(x));
}

std::vector<int> mar_targets(const PromptLayoutAR& layout, int eos) {
  const int n = layout.length();
  std::vector<int> t(n, -1);
  const int a0 = n - static_cast<int>(layout.acoustic.size());
  if (a0 > 0) t[a0 - 1] = layout.acoustic.empty() ? eos : layout.acoustic[0];
  for (int i = a0; i < n; ++i) {
    const int k = i - a0 + 1;
    t[i] = k < static_cast<int>(layout.acoustic.size()) ? layout.acoustic[k] : eos;
  }
  return t;
}

template <typename T>
Var<T> mar_loss(const MarModelT<T>& model, std::span<const PromptLayoutAR> batch, Rng* dropout_rng,
                MarLossStats* stats) {
  const Var<T> logits = model.forward(batch, dropout_rng);
  std::vector<Var<T>> terms;
  int row = 0;
  double nll = 0.0;
  long count_all = 0;
  for (const auto& layout : batch) {
    const int n = layout.length();
    const std::vector<int> targets = mar_targets(layout, model.config().eos());
    const long count = std::count_if(targets.begin(), targets.end(), [](int t) { return t >= 0; });
    if (count == 0) throw InvalidArgument("mar: layout has no predicted positions (needs a phoneme segment)");
    const Var<T> ce = nn::cross_entropy_sum(nn::slice_rows(logits, row, n), std::span<const int>(targets));
    nll += static_cast<double>(ce.item());
    count_all += count;
    terms.push_back(nn::scale(ce, T(1.0 / (static_cast<double>(count) * batch.size()))));
    row += n;
  }
  if (stats) {
    stats->nll_sum = nll;
    stats->predictions = count_all;
  }
  Var<T> loss = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) loss = nn::add(loss, terms[i]);
  return loss;
}

double mar_train_step(MarModel& model, nn::Adam<float>& optimizer, std::span<const PromptLayoutAR> batch,
                      Rng* dropout_rng) {
  const Var<float> loss = mar_loss(model, batch, dropout_rng);
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NumericalError("mar: non-finite loss at step " + std::to_string(optimizer.steps_taken() + 1));
  nn::backward(loss);
  optimizer.step();
  return value;
}

std::vector<float> mar_next_logits(const MarModel& model, const PromptLayoutAR& layout) {
  nn::NoGradGuard guard;
  const Var<float> logits = model.forward(std::span<const PromptLayoutAR>(&layout, 1));
  const auto last = logits.value().row(logits.rows() - 1);
  return std::vector<float>(last.data(), last.data() + last.size());
}

namespace {

int argmax_lowest(const std::vector<float>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

int sample_token(const std::vector<float>& logits, const DecodeParams& p, Rng& rng) {
  if (p.temperature <= 0.0) return argmax_lowest(logits);
  const int v = static_cast<int>(logits.size());
  std::vector<int> idx(v);
  std::iota(idx.begin(), idx.end(), 0);
  int keep = v;
  if (p.top_k > 0 && p.top_k < v) {
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    keep = p.top_k;
  }
  double mx = -INFINITY;
  for (int i = 0; i < keep; ++i) mx = std::max(mx, static_cast<double>(logits[idx[i]]));
  std::vector<double> w(keep);
  double total = 0.0;
  for (int i = 0; i < keep; ++i) {
    w[i] = std::exp((logits[idx[i]] - mx) / p.temperature);
    total += w[i];
  }
  double u = rng.uniform() * total;
  for (int i = 0; i < keep; ++i) {
    u -= w[i];
    if (u < 0.0) return idx[i];
  }
  return idx[keep - 1];
}

}  // namespace

MarSample mar_sample(const MarModel& model, const PromptLayoutAR& layout, const DecodeParams& params) {
  if (params.max_frames < 0) throw InvalidArgument("mar_sample: max_frames must be non-negative");
  if (params.top_k < 0) throw InvalidArgument("mar_sample: top_k must be non-negative");
  if (layout.phoneme_segments.empty()) throw InvalidArgument("mar_sample: layout needs a phoneme prompt");
  check_layout(layout, model.config());
  Rng rng(params.seed);
  PromptLayoutAR cur = layout;
  MarSample out;
  const int eos = model.config().eos();
  while (true) {
    if (static_cast<int>(out.tokens.size()) >= params.max_frames || cur.length() >= model.config().max_len) {
      out.truncated = true;
      break;
    }
    const int tok = sample_token(mar_next_logits(model, cur), params, rng);
    if (tok == eos) break;
    out.tokens.push_back(tok);
    cur.acoustic.push_back(tok);
    cur.acoustic_language.push_back(layout.target_language);
  }
  return out;
}

template class MarModelT<float>;
template class MarModelT<double>;
template Var<float> mar_loss(const MarModelT<float>&, std::span<const PromptLayoutAR>, Rng*, MarLossStats*);
template Var<double> mar_loss(const MarModelT<double>&, std::span<const PromptLayoutAR>, Rng*, MarLossStats*);

}  // namespace vallex
