#include "vallex/recotrans.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vallex/common.hpp"
#include "vallex/config.hpp"
#include "vallex/ctc.hpp"

namespace vallex {

using nn::AttnSpan;
using nn::Mat;
using nn::Var;

void MaskSpec::validate() const {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw InvalidArgument("mask_prob must be in (0, 1)");
  if (span_len < 1) throw InvalidArgument("mask span_len must be at least 1");
}

int RecoTransConfig::downsample() const {
  int f = 1;
  for (int s : strides) f *= s;
  return f;
}

int RecoTransConfig::receptive_field() const {
  int rf = 1, jump = 1;
  for (size_t i = 0; i < kernels.size(); ++i) {
    rf += (kernels[i] - 1) * jump;
    jump *= strides[i];
  }
  return rf;
}

int RecoTransConfig::frames_for(int samples) const {
  int n = samples;
  for (size_t i = 0; i < kernels.size(); ++i) {
    if (n < kernels[i]) return 0;
    n = (n - kernels[i]) / strides[i] + 1;
  }
  return n;
}

void RecoTransConfig::validate() const {
  if (attention_dim < 2 || attention_dim % 2 || heads < 1 || attention_dim % heads)
    throw InvalidArgument("recotrans: attention_dim must be even and divisible by heads");
  if (ffn_dim < 1 || prenet_channels < 1) throw InvalidArgument("recotrans: dims must be positive");
  if (enc1_layers < 1 || enc2_layers < 1 || dec_layers < 1) throw InvalidArgument("recotrans: need at least one layer per stack");
  if (kernels.empty() || kernels.size() != strides.size()) throw InvalidArgument("recotrans: kernels and strides must pair up");
  for (size_t i = 0; i < kernels.size(); ++i)
    if (kernels[i] < 1 || strides[i] < 1) throw InvalidArgument("recotrans: kernel and stride must be positive");
  if (num_phonemes < 1) throw InvalidArgument("recotrans: num_phonemes must be positive");
  if (max_len < 2) throw InvalidArgument("recotrans: max_len too small");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("recotrans: dropout must be in [0, 1)");
  if (ctc_weight < 0.0) throw InvalidArgument("recotrans: ctc_weight must be non-negative");
  mask.validate();
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw InvalidArgument("recotrans: bad integer list '" + s + "'");
    }
  }
  return out;
}

}  // namespace

std::string RecoTransConfig::serialize() const {
  KeyValues kv;
  kv.set("attention_dim", attention_dim);
  kv.set("heads", heads);
  kv.set("ffn_dim", ffn_dim);
  kv.set("enc1_layers", enc1_layers);
  kv.set("enc2_layers", enc2_layers);
  kv.set("dec_layers", dec_layers);
  kv.set("prenet_channels", prenet_channels);
  kv.set("kernels", join_ints(kernels));
  kv.set("strides", join_ints(strides));
  kv.set("num_phonemes", num_phonemes);
  kv.set("max_len", max_len);
  kv.set("dropout", dropout);
  kv.set("ctc_weight", ctc_weight);
  kv.set("mask_prob", mask.mask_prob);
  kv.set("mask_span", mask.span_len);
  return kv.to_string();
}

RecoTransConfig RecoTransConfig::parse(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  RecoTransConfig c;
  c.attention_dim = kv.get_int("attention_dim", c.attention_dim);
  c.heads = kv.get_int("heads", c.heads);
  c.ffn_dim = kv.get_int("ffn_dim", c.ffn_dim);
  c.enc1_layers = kv.get_int("enc1_layers", c.enc1_layers);
  c.enc2_layers = kv.get_int("enc2_layers", c.enc2_layers);
  c.dec_layers = kv.get_int("dec_layers", c.dec_layers);
  c.prenet_channels = kv.get_int("prenet_channels", c.prenet_channels);
  if (kv.has("kernels")) c.kernels = split_ints(kv.get_string("kernels", ""));
  if (kv.has("strides")) c.strides = split_ints(kv.get_string("strides", ""));
  c.num_phonemes = kv.get_int("num_phonemes", c.num_phonemes);
  c.max_len = kv.get_int("max_len", c.max_len);
  c.dropout = kv.get_double("dropout", c.dropout);
  c.ctc_weight = kv.get_double("ctc_weight", c.ctc_weight);
  c.mask.mask_prob = kv.get_double("mask_prob", c.mask.mask_prob);
  c.mask.span_len = kv.get_int("mask_span", c.mask.span_len);
  c.validate();
  return c;
}

std::vector<int> frame_targets(std::span<const int> phonemes, std::span<const int> boundaries, int num_frames,
                               const RecoTransConfig& config) {
  if (phonemes.empty()) throw InvalidArgument("frame_targets: no phonemes");
  if (boundaries.size() != phonemes.size() + 1) throw InvalidArgument("frame_targets: need one boundary per phoneme plus the end");
  const double half = (config.receptive_field() - 1) / 2.0;
  const int hop = config.downsample();
  std::vector<int> out(num_frames);
  size_t seg = 0;
  for (int f = 0; f < num_frames; ++f) {
    const double center = f * static_cast<double>(hop) + half;
    while (seg + 1 < phonemes.size() && center >= boundaries[seg + 1]) ++seg;
    out[f] = phonemes[seg];
  }
  return out;
}

std::vector<bool> sample_mask(int frames, const MaskSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<bool> m(frames, false);
  for (int f = 0; f < frames; ++f)
    if (rng.bernoulli(spec.mask_prob))
      for (int j = f; j < std::min(frames, f + spec.span_len); ++j) m[j] = true;
  return m;
}

template <typename T>
RecoTransModelT<T>::RecoTransModelT(const RecoTransConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.attention_dim;
  const int c = config_.prenet_channels;
  int cin = 1;
  for (size_t i = 0; i < config_.kernels.size(); ++i) {
    const int k = config_.kernels[i];
    conv_w.emplace_back(k * cin, c);
    conv_b.emplace_back(1, c);
    nn::init_normal(conv_w.back(), 1.0 / std::sqrt(double(k * cin)), rng);
    cin = c;
  }
  prenet_norm = nn::LayerNorm<T>(c);
  prenet_proj = nn::Linear<T>(c, d, rng);
  mask_embedding = nn::Parameter<T>(1, d);
  nn::init_normal(mask_embedding, 1.0, rng);
  phoneme_embedding = nn::Embedding<T>(config_.vocab(), d, rng);
  const int depth_enc = config_.enc1_layers + config_.enc2_layers;
  for (int i = 0; i < config_.enc1_layers; ++i) enc1.emplace_back(d, config_.heads, config_.ffn_dim, false, 1, depth_enc, rng);
  for (int i = 0; i < config_.enc2_layers; ++i) enc2.emplace_back(d, config_.heads, config_.ffn_dim, false, 1, depth_enc, rng);
  for (int i = 0; i < config_.dec_layers; ++i) dec.emplace_back(d, config_.heads, config_.ffn_dim, true, 1, config_.dec_layers, rng);
  head1_norm = nn::LayerNorm<T>(d);
  head2_norm = nn::LayerNorm<T>(d);
  ctc_norm = nn::LayerNorm<T>(d);
  dec_norm = nn::LayerNorm<T>(d);
  head1 = nn::Linear<T>(d, config_.vocab(), rng);
  head2 = nn::Linear<T>(d, config_.vocab(), rng);
  ctc_hidden = nn::Linear<T>(d, d, rng);
  ctc_out = nn::Linear<T>(d, config_.vocab(), rng);
  dec_head = nn::Linear<T>(d, config_.vocab(), rng);
}

template <typename T>
nn::ParamList<T> RecoTransModelT<T>::parameters() {
  nn::ParamList<T> out;
  for (size_t i = 0; i < conv_w.size(); ++i) {
    out.push_back({"prenet.conv" + std::to_string(i) + ".w", &conv_w[i]});
    out.push_back({"prenet.conv" + std::to_string(i) + ".b", &conv_b[i]});
  }
  prenet_norm.collect("prenet.norm", out);
  prenet_proj.collect("prenet.proj", out);
  out.push_back({"mask_embedding", &mask_embedding});
  phoneme_embedding.collect("phoneme_embedding", out);
  for (size_t i = 0; i < enc1.size(); ++i) enc1[i].collect("enc1." + std::to_string(i), out);
  for (size_t i = 0; i < enc2.size(); ++i) enc2[i].collect("enc2." + std::to_string(i), out);
  for (size_t i = 0; i < dec.size(); ++i) dec[i].collect("dec." + std::to_string(i), out);
  head1_norm.collect("head1.norm", out);
  head1.collect("head1.proj", out);
  head2_norm.collect("head2.norm", out);
  head2.collect("head2.proj", out);
  ctc_norm.collect("ctc.norm", out);
  ctc_hidden.collect("ctc.hidden", out);
  ctc_out.collect("ctc.out", out);
  dec_norm.collect("dec.norm", out);
  dec_head.collect("dec.head", out);
  return out;
}

template <typename T>
Var<T> RecoTransModelT<T>::prenet_forward(std::span<const float> waveform) const {
  const int frames = config_.frames_for(static_cast<int>(waveform.size()));
  if (frames < 1)
    throw InvalidArgument("recotrans: waveform of " + std::to_string(waveform.size()) +
                          " samples is shorter than the receptive field");
  if (frames > config_.max_len) throw InvalidArgument("recotrans: waveform exceeds max_len frames");
  double energy = 0.0;
  for (float s : waveform) energy += double(s) * s;
  const double rms = std::sqrt(energy / waveform.size());
  const double gain = rms > 1e-8 ? 1.0 / rms : 0.0;
  Mat<T> x(static_cast<Eigen::Index>(waveform.size()), 1);
  for (size_t i = 0; i < waveform.size(); ++i) x(i, 0) = static_cast<T>(waveform[i] * gain);
  Var<T> h = nn::constant(std::move(x));
  for (size_t i = 0; i < conv_w.size(); ++i)
    h = nn::gelu(nn::conv1d(h, conv_w[i].var(), conv_b[i].var(), config_.kernels[i], config_.strides[i]));
  return prenet_proj(prenet_norm(h));
}

namespace {

std::vector<int> positions(int n) {
  std::vector<int> p(n);
  for (int i = 0; i < n; ++i) p[i] = i;
  return p;
}

template <typename T>
Var<T> run_stack(const std::vector<nn::TransformerLayer<T>>& stack, Var<T> x,
                 const typename nn::TransformerLayer<T>::Context& ctx) {
  for (const auto& layer : stack) x = layer(x, ctx);
  return x;
}

template <typename T>
typename nn::TransformerLayer<T>::Context make_ctx(std::span<const AttnSpan> spans, double dropout, Rng* rng) {
  typename nn::TransformerLayer<T>::Context ctx;
  ctx.self_spans = spans;
  ctx.dropout = rng && dropout > 0.0 ? T(dropout) : T(0);
  ctx.rng = rng;
  return ctx;
}

}  // namespace

template <typename T>
typename RecoTransModelT<T>::SpeechStates RecoTransModelT<T>::encode_speech(
    std::span<const std::vector<float>> waveforms, const std::vector<std::vector<bool>>* masks, Rng* dropout_rng) const {
  if (waveforms.empty()) throw InvalidArgument("recotrans: empty speech batch");
  if (masks && masks->size() != waveforms.size()) throw InvalidArgument("recotrans: one mask per waveform required");
  const int d = config_.attention_dim;
  SpeechStates out;
  std::vector<Var<T>> parts;
  int total = 0;
  for (size_t b = 0; b < waveforms.size(); ++b) {
    Var<T> h = prenet_forward(waveforms[b]);
    const int n = h.rows();
    if (masks) {
      const auto& m = (*masks)[b];
      if (static_cast<int>(m.size()) != n) throw InvalidArgument("recotrans: mask length differs from frame count");
      std::vector<int> rows(n);
      for (int i = 0; i < n; ++i) rows[i] = m[i] ? n : i;
      h = nn::gather_rows(nn::concat_rows(std::vector<Var<T>>{h, mask_embedding.var()}), std::span<const int>(rows));
    }
    parts.push_back(nn::add_constant(h, nn::sinusoid_table<T>(positions(n), d)));
    out.spans.push_back(AttnSpan{total, n, total, n, false});
    out.frames.push_back(n);
    total += n;
  }
  Var<T> x = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  const auto ctx = make_ctx<T>(out.spans, config_.dropout, dropout_rng);
  out.enc1 = run_stack(enc1, x, ctx);
  out.enc2 = run_stack(enc2, out.enc1, ctx);
  return out;
}

template <typename T>
Var<T> RecoTransModelT<T>::encode_text(std::span<const std::vector<int>> sources, std::vector<AttnSpan>* spans,
                                       Rng* dropout_rng) const {
  if (sources.empty()) throw InvalidArgument("recotrans: empty text batch");
  const int d = config_.attention_dim;
  std::vector<Var<T>> parts;
  spans->clear();
  int total = 0;
  for (const auto& s : sources) {
    const int n = static_cast<int>(s.size());
    if (n < 1) throw InvalidArgument("recotrans: empty source sequence");
    if (n > config_.max_len) throw InvalidArgument("recotrans: source exceeds max_len");
    parts.push_back(nn::add_constant(phoneme_embedding(s), nn::sinusoid_table<T>(positions(n), d)));
    spans->push_back(AttnSpan{total, n, total, n, false});
    total += n;
  }
  Var<T> x = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  return run_stack(enc2, x, make_ctx<T>(*spans, config_.dropout, dropout_rng));
}

template <typename T>
Var<T> RecoTransModelT<T>::decode(std::span<const std::vector<int>> targets, const Var<T>& memory,
                                  std::span<const AttnSpan> memory_spans, Rng* dropout_rng) const {
  if (targets.size() != memory_spans.size()) throw InvalidArgument("recotrans: one memory span per target required");
  const int d = config_.attention_dim;
  std::vector<Var<T>> parts;
  std::vector<AttnSpan> self_spans, cross_spans;
  int total = 0;
  for (size_t b = 0; b < targets.size(); ++b) {
    std::vector<int> input{config_.bos()};
    input.insert(input.end(), targets[b].begin(), targets[b].end());
    const int n = static_cast<int>(input.size());
    if (n > config_.max_len) throw InvalidArgument("recotrans: target exceeds max_len");
    parts.push_back(nn::add_constant(phoneme_embedding(input), nn::sinusoid_table<T>(positions(n), d)));
    self_spans.push_back(AttnSpan{total, n, total, n, true});
    cross_spans.push_back(AttnSpan{total, n, memory_spans[b].k_off, memory_spans[b].k_len, false});
    total += n;
  }
  Var<T> x = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  auto ctx = make_ctx<T>(self_spans, config_.dropout, dropout_rng);
  ctx.memory = &memory;
  ctx.cross_spans = cross_spans;
  x = run_stack(dec, x, ctx);
  return dec_head(dec_norm(x));
}

template <typename T>
Var<T> speech_pretrain_loss(const RecoTransModelT<T>& model, std::span<const SpeechSample> batch, Rng& mask_rng,
                            const std::vector<std::vector<bool>>* masks, Rng* dropout_rng, SpeechLossStats* stats) {
  if (batch.empty()) throw InvalidArgument("speech_pretrain_loss: empty batch");
  const auto& cfg = model.config();
  std::vector<std::vector<float>> waves;
  std::vector<std::vector<bool>> drawn;
  for (const auto& s : batch) {
    waves.push_back(s.waveform);
    const int n = cfg.frames_for(static_cast<int>(s.waveform.size()));
    if (static_cast<int>(s.frame_labels.size()) != n)
      throw InvalidArgument("speech_pretrain_loss: frame labels do not match the pre-net frame count");
    if (!masks) {
      std::vector<bool> m = sample_mask(n, cfg.mask, mask_rng);
      if (std::none_of(m.begin(), m.end(), [](bool b) { return b; })) m = sample_mask(n, cfg.mask, mask_rng);
      drawn.push_back(std::move(m));
    }
  }
  const auto& use = masks ? *masks : drawn;
  std::vector<int> targets;
  long masked = 0;
  for (size_t b = 0; b < batch.size(); ++b) {
    if (use[b].size() != batch[b].frame_labels.size()) throw InvalidArgument("speech_pretrain_loss: mask length mismatch");
    for (size_t i = 0; i < use[b].size(); ++i) {
      targets.push_back(use[b][i] ? batch[b].frame_labels[i] : -1);
      masked += use[b][i];
    }
  }
  if (masked == 0) throw InvalidArgument("speech_pretrain_loss: empty mask set");
  if (stats) stats->masked_frames = masked;
  const auto st = model.encode_speech(waves, &use, dropout_rng);
  const Var<T> l1 = nn::cross_entropy_sum(model.head1(model.head1_norm(st.enc1)), std::span<const int>(targets));
  const Var<T> l2 = nn::cross_entropy_sum(model.head2(model.head2_norm(st.enc2)), std::span<const int>(targets));
  return nn::scale(nn::add(l1, l2), T(1.0 / batch.size()));
}

namespace {

std::vector<int> with_eos(const std::vector<std::vector<int>>& targets, int eos) {
  std::vector<int> out;
  for (const auto& t : targets) {
    out.insert(out.end(), t.begin(), t.end());
    out.push_back(eos);
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> text_pretrain_loss(const RecoTransModelT<T>& model, std::span<const TextPair> batch, Rng* dropout_rng) {
  if (batch.empty()) throw InvalidArgument("text_pretrain_loss: empty batch");
  std::vector<std::vector<int>> src, tgt;
  for (const auto& p : batch) {
    if (p.source.empty() || p.target.empty()) throw InvalidArgument("text_pretrain_loss: sequences must be nonempty");
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  std::vector<AttnSpan> spans;
  const Var<T> memory = model.encode_text(src, &spans, dropout_rng);
  const Var<T> logits = model.decode(tgt, memory, spans, dropout_rng);
  const std::vector<int> y = with_eos(tgt, model.config().eos());
  return nn::scale(nn::cross_entropy_sum(logits, std::span<const int>(y)), T(1.0 / batch.size()));
}

template <typename T>
Var<T> finetune_loss(const RecoTransModelT<T>& model, std::span<const FinetuneSample> batch, Rng* dropout_rng,
                     FinetuneParts* parts) {
  if (batch.empty()) throw InvalidArgument("finetune_loss: empty batch");
  const auto& cfg = model.config();
  std::vector<std::vector<float>> waves;
  std::vector<std::vector<int>> tgt;
  for (const auto& s : batch) {
    if (s.source.empty() || s.target.empty()) throw InvalidArgument("finetune_loss: sequences must be nonempty");
    waves.push_back(s.waveform);
    tgt.push_back(s.target);
  }
  const auto st = model.encode_speech(waves, nullptr, dropout_rng);
  const Var<T> log_probs = nn::log_softmax(
      model.ctc_out(nn::gelu(model.ctc_hidden(model.ctc_norm(st.enc2)))));
  Var<T> ctc;
  for (size_t b = 0; b < batch.size(); ++b) {
    const std::vector<int> reduced = collapse_repeats(batch[b].source);
    const Var<T> term = ctc_loss(nn::slice_rows(log_probs, st.spans[b].q_off, st.frames[b]),
                                 std::span<const int>(reduced), cfg.blank());
    ctc = b == 0 ? term : nn::add(ctc, term);
  }
  const Var<T> logits = model.decode(tgt, st.enc2, st.spans, dropout_rng);
  const std::vector<int> y = with_eos(tgt, cfg.eos());
  const Var<T> ce = nn::cross_entropy_sum(logits, std::span<const int>(y));
  const T inv_b = T(1.0 / batch.size());
  if (parts) {
    parts->ctc = static_cast<double>(ctc.item()) / batch.size();
    parts->ce = static_cast<double>(ce.item()) / batch.size();
  }
  return nn::add(nn::scale(ctc, T(cfg.ctc_weight) * inv_b), nn::scale(ce, inv_b));
}

PretrainLosses pretrain_step(RecoTransModel& model, nn::Adam<float>& optimizer, std::span<const SpeechSample> speech,
                             std::span<const TextPair> text, Rng& mask_rng, Rng* dropout_rng) {
  if (speech.empty() && text.empty()) throw InvalidArgument("pretrain_step: both batches empty");
  PretrainLosses out;
  Var<float> total;
  if (!speech.empty()) {
    total = speech_pretrain_loss(model, speech, mask_rng, nullptr, dropout_rng);
    out.speech = total.item();
  }
  if (!text.empty()) {
    const Var<float> lt = text_pretrain_loss(model, text, dropout_rng);
    out.text = lt.item();
    total = total.defined() ? nn::add(total, lt) : lt;
  }
  if (!std::isfinite(total.item()))
    throw NumericalError("recotrans pretrain: non-finite loss at step " + std::to_string(optimizer.steps_taken() + 1));
  nn::backward(total);
  optimizer.step();
  return out;
}

double finetune_step(RecoTransModel& model, nn::Adam<float>& optimizer, std::span<const FinetuneSample> batch,
                     Rng* dropout_rng) {
  const Var<float> loss = finetune_loss(model, batch, dropout_rng);
  const double value = loss.item();
  if (!std::isfinite(value))
    throw NumericalError("recotrans finetune: non-finite loss at step " + std::to_string(optimizer.steps_taken() + 1));
  nn::backward(loss);
  optimizer.step();
  return value;
}

Transcription transcribe_translate(const RecoTransModel& model, std::span<const float> waveform, int max_target) {
  const auto& cfg = model.config();
  nn::NoGradGuard guard;
  Transcription out;
  const std::vector<std::vector<float>> waves{std::vector<float>(waveform.begin(), waveform.end())};
  const auto st = model.encode_speech(waves);
  const Var<float> scores = model.ctc_out(nn::gelu(model.ctc_hidden(model.ctc_norm(st.enc2))));
  for (int id : ctc_greedy_decode(scores.value(), cfg.blank()))
    if (id < cfg.num_phonemes) out.source.push_back(id);
  out.source_empty = out.source.empty();

  std::vector<std::vector<int>> prefix{{}};
  while (true) {
    if (static_cast<int>(prefix[0].size()) >= max_target) {
      out.target_truncated = true;
      break;
    }
    const Var<float> logits = model.decode(prefix, st.enc2, st.spans);
    const auto row = logits.value().row(logits.rows() - 1);
    int best = 0;
    for (int j = 1; j < row.size(); ++j)
      if (row(j) > row(best)) best = j;
    if (best == cfg.eos()) break;
    prefix[0].push_back(best);
  }
  for (int id : prefix[0])
    if (id < cfg.num_phonemes) out.target.push_back(id);
  out.target_empty = out.target.empty();
  return out;
}

template class RecoTransModelT<float>;
template class RecoTransModelT<double>;
template Var<float> speech_pretrain_loss(const RecoTransModelT<float>&, std::span<const SpeechSample>, Rng&,
                                         const std::vector<std::vector<bool>>*, Rng*, SpeechLossStats*);
template Var<double> speech_pretrain_loss(const RecoTransModelT<double>&, std::span<const SpeechSample>, Rng&,
                                          const std::vector<std::vector<bool>>*, Rng*, SpeechLossStats*);
template Var<float> text_pretrain_loss(const RecoTransModelT<float>&, std::span<const TextPair>, Rng*);
template Var<double> text_pretrain_loss(const RecoTransModelT<double>&, std::span<const TextPair>, Rng*);
template Var<float> finetune_loss(const RecoTransModelT<float>&, std::span<const FinetuneSample>, Rng*, FinetuneParts*);
template Var<double> finetune_loss(const RecoTransModelT<double>&, std::span<const FinetuneSample>, Rng*,
                                   FinetuneParts*);

}  // namespace vallex
