#pragma once
// Plain-loop double-precision forward passes used as oracles for the model
// losses. They read parameter values by name and share no code with the
// autograd library beyond the parameter naming scheme.

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "vallex/mar.hpp"
#include "vallex/mnar.hpp"
#include "vallex/recotrans.hpp"

namespace ref {

using Mat = std::vector<std::vector<double>>;  // rows x cols

inline Mat zeros(size_t r, size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

struct Params {
  std::map<std::string, Mat> m;

  template <typename T>
  explicit Params(const vallex::nn::ParamList<T>& list) {
    for (const auto& [name, p] : list) {
      Mat v = zeros(p->rows(), p->cols());
      for (int i = 0; i < p->rows(); ++i)
        for (int j = 0; j < p->cols(); ++j) v[i][j] = static_cast<double>(p->value()(i, j));
      m[name] = std::move(v);
    }
  }
  const Mat& at(const std::string& name) const {
    auto it = m.find(name);
    if (it == m.end()) throw std::runtime_error("reference: missing parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return m.count(name) > 0; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b[0].size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t k = 0; k < b.size(); ++k)
      for (size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat linear(const Mat& x, const Params& p, const std::string& name) {
  Mat out = matmul(x, p.at(name + ".w"));
  const Mat& b = p.at(name + ".b");
  for (auto& row : out)
    for (size_t j = 0; j < row.size(); ++j) row[j] += b[0][j];
  return out;
}

inline Mat layer_norm(const Mat& x, const Params& p, const std::string& name) {
  const Mat& g = p.at(name + ".gamma");
  const Mat& b = p.at(name + ".beta");
  Mat out = x;
  for (size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v;
    mean /= x[i].size();
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= x[i].size();
    for (size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mean) / std::sqrt(var + 1e-5) * g[0][j] + b[0][j];
  }
  return out;
}

inline double gelu(double v) {
  return 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
}

inline Mat gelu(Mat x) {
  for (auto& row : x)
    for (auto& v : row) v = gelu(v);
  return x;
}

inline Mat add(Mat a, const Mat& b) {
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline std::vector<double> position_encoding(int pos, int dim) {
  std::vector<double> e(dim, 0.0);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double angle = pos / std::pow(10000.0, static_cast<double>(i) / half);
    e[i] = std::sin(angle);
    e[half + i] = std::cos(angle);
  }
  return e;
}

inline std::vector<double> row_of(const Mat& table, int id) { return table.at(id); }

/// Multi-head attention; `visible(i, j)` decides whether query i sees key j.
inline Mat attention(const Mat& x, const Mat& mem, const Params& p, const std::string& name, int heads,
                     const std::function<bool(int, int)>& visible) {
  const Mat q = linear(x, p, name + ".q");
  const Mat k = linear(mem, p, name + ".k");
  const Mat v = linear(mem, p, name + ".v");
  const int d = static_cast<int>(q[0].size());
  const int dh = d / heads;
  Mat out = zeros(x.size(), d);
  for (int h = 0; h < heads; ++h) {
    for (size_t i = 0; i < x.size(); ++i) {
      std::vector<double> s(mem.size(), -INFINITY);
      double mx = -INFINITY;
      for (size_t j = 0; j < mem.size(); ++j) {
        if (!visible(static_cast<int>(i), static_cast<int>(j))) continue;
        double dot = 0.0;
        for (int c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& e : s) {
        e = std::isinf(e) ? 0.0 : std::exp(e - mx);
        z += e;
      }
      for (size_t j = 0; j < mem.size(); ++j)
        for (int c = 0; c < dh; ++c) out[i][h * dh + c] += s[j] / z * v[j][h * dh + c];
    }
  }
  return linear(out, p, name + ".o");
}

/// Pre-norm layer; `suffix` selects the normalization set ("" when only one).
inline Mat transformer_layer(const Mat& x, const Params& p, const std::string& prefix, const std::string& suffix,
                             int heads, const std::function<bool(int, int)>& self_visible, const Mat* memory = nullptr) {
  const Mat h = layer_norm(x, p, prefix + ".ln_self" + suffix);
  Mat y = add(x, attention(h, h, p, prefix + ".self_attn", heads, self_visible));
  if (memory) {
    const Mat hc = layer_norm(y, p, prefix + ".ln_cross" + suffix);
    y = add(y, attention(hc, *memory, p, prefix + ".cross_attn", heads, [](int, int) { return true; }));
  }
  const Mat hf = layer_norm(y, p, prefix + ".ln_ffn" + suffix);
  return add(y, linear(gelu(linear(hf, p, prefix + ".ffn.fc1")), p, prefix + ".ffn.fc2"));
}

inline std::vector<double> log_softmax(const std::vector<double>& z) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  std::vector<double> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = z[i] - mx - std::log(s);
  return out;
}

// ---------------------------------------------------------------- AR model

inline Mat mar_logits(const Params& p, const vallex::MarConfig& c, const vallex::PromptLayoutAR& layout) {
  const int d = c.attention_dim;
  Mat x;
  for (const auto& seg : layout.phoneme_segments)
    for (size_t i = 0; i < seg.size(); ++i) {
      auto e = row_of(p.at("phoneme_embedding.table"), seg[i]);
      const auto pe = position_encoding(static_cast<int>(i), d);
      for (int j = 0; j < d; ++j) e[j] += pe[j];
      x.push_back(e);
    }
  for (size_t i = 0; i < layout.acoustic.size(); ++i) {
    auto e = row_of(p.at("acoustic_embedding.table"), layout.acoustic[i]);
    const auto l = row_of(p.at("language_embedding.table"), layout.acoustic_language[i]);
    const auto pe = position_encoding(static_cast<int>(i), d);
    for (int j = 0; j < d; ++j) e[j] += l[j] + pe[j];
    x.push_back(e);
  }
  for (int b = 0; b < c.layers; ++b)
    x = transformer_layer(x, p, "block" + std::to_string(b), "", c.heads, [](int i, int j) { return j <= i; });
  return linear(layer_norm(x, p, "final_norm"), p, "head");
}

/// Per-token mean NLL over predicted positions, averaged over the batch.
inline double mar_loss(const Params& p, const vallex::MarConfig& c, const std::vector<vallex::PromptLayoutAR>& batch) {
  double total = 0.0;
  for (const auto& layout : batch) {
    const Mat logits = mar_logits(p, c, layout);
    int n_ph = 0;
    for (const auto& s : layout.phoneme_segments) n_ph += static_cast<int>(s.size());
    const int n_ac = static_cast<int>(layout.acoustic.size());
    double nll = 0.0;
    int count = 0;
    // Row n_ph - 1 predicts the first acoustic token; row n_ph + i predicts token i+1 or <eos>.
    for (int i = -1; i < n_ac; ++i) {
      const int target = i + 1 < n_ac ? layout.acoustic[i + 1] : c.eos();
      nll -= log_softmax(logits[n_ph + i])[target];
      ++count;
    }
    total += nll / count;
  }
  return total / batch.size();
}

// ---------------------------------------------------------------- NAR model

inline Mat mnar_logits(const Params& p, const vallex::MnarConfig& c, const vallex::PromptLayoutNAR& s) {
  const int d = c.attention_dim;
  Mat x;
  for (size_t i = 0; i < s.phonemes.size(); ++i) {
    auto e = row_of(p.at("phoneme_embedding.table"), s.phonemes[i]);
    const auto pe = position_encoding(static_cast<int>(i), d);
    for (int j = 0; j < d; ++j) e[j] += pe[j];
    x.push_back(e);
  }
  for (const auto* g : {&s.reference, &s.partial})
    for (int f = 0; f < g->frames; ++f) {
      std::vector<double> e(d, 0.0);
      for (int k = 0; k < g->layers; ++k) {
        const auto r = row_of(p.at("acoustic_embedding" + std::to_string(k + 1) + ".table"), g->at(f, k));
        for (int j = 0; j < d; ++j) e[j] += r[j];
      }
      const auto pe = position_encoding(f, d);
      for (int j = 0; j < d; ++j) e[j] += pe[j];
      x.push_back(e);
    }
  const std::string suffix = std::to_string(s.level - 2);
  for (int b = 0; b < c.layers; ++b)
    x = transformer_layer(x, p, "block" + std::to_string(b), c.num_acoustic_layers > 2 ? suffix : "", c.heads,
                          [](int, int) { return true; });
  Mat tail(x.end() - s.partial.frames, x.end());
  const std::string lv = std::to_string(s.level);
  return linear(layer_norm(tail, p, "final_norm" + lv), p, "head" + lv);
}

inline double mnar_loss(const Params& p, const vallex::MnarConfig& c, const std::vector<vallex::PromptLayoutNAR>& batch,
                        const std::vector<vallex::AcousticTokenGrid>& targets) {
  double total = 0.0;
  for (size_t b = 0; b < batch.size(); ++b) {
    const Mat logits = mnar_logits(p, c, batch[b]);
    double nll = 0.0;
    for (int f = 0; f < batch[b].partial.frames; ++f)
      nll -= log_softmax(logits[f])[targets[b].at(f, batch[b].level - 1)];
    total += nll / batch[b].partial.frames;
  }
  return total / batch.size();
}

// ---------------------------------------------------------------- recognizer

inline Mat prenet(const Params& p, const vallex::RecoTransConfig& c, const std::vector<float>& wave) {
  double e = 0.0;
  for (float s : wave) e += double(s) * s;
  const double rms = std::sqrt(e / wave.size());
  Mat x = zeros(wave.size(), 1);
  for (size_t i = 0; i < wave.size(); ++i) x[i][0] = rms > 1e-8 ? double(wave[i]) * (1.0 / rms) : 0.0;
  for (size_t l = 0; l < c.kernels.size(); ++l) {
    const int k = c.kernels[l], s = c.strides[l];
    const int cin = static_cast<int>(x[0].size());
    const Mat& w = p.at("prenet.conv" + std::to_string(l) + ".w");
    const Mat& b = p.at("prenet.conv" + std::to_string(l) + ".b");
    const int cout = static_cast<int>(w[0].size());
    const int tout = (static_cast<int>(x.size()) - k) / s + 1;
    Mat y = zeros(tout, cout);
    for (int t = 0; t < tout; ++t)
      for (int o = 0; o < cout; ++o) {
        double acc = b[0][o];
        for (int kk = 0; kk < k; ++kk)
          for (int ci = 0; ci < cin; ++ci) acc += x[t * s + kk][ci] * w[kk * cin + ci][o];
        y[t][o] = gelu(acc);
      }
    x = std::move(y);
  }
  return linear(layer_norm(x, p, "prenet.norm"), p, "prenet.proj");
}

struct SpeechStates {
  Mat enc1, enc2;
};

inline SpeechStates encode_speech(const Params& p, const vallex::RecoTransConfig& c, const std::vector<float>& wave,
                                  const std::vector<bool>* mask) {
  Mat x = prenet(p, c, wave);
  const int d = c.attention_dim;
  for (size_t i = 0; i < x.size(); ++i) {
    if (mask && (*mask)[i]) x[i] = p.at("mask_embedding")[0];
    const auto pe = position_encoding(static_cast<int>(i), d);
    for (int j = 0; j < d; ++j) x[i][j] += pe[j];
  }
  SpeechStates s;
  auto all = [](int, int) { return true; };
  for (int l = 0; l < c.enc1_layers; ++l) x = transformer_layer(x, p, "enc1." + std::to_string(l), "", c.heads, all);
  s.enc1 = x;
  for (int l = 0; l < c.enc2_layers; ++l) x = transformer_layer(x, p, "enc2." + std::to_string(l), "", c.heads, all);
  s.enc2 = x;
  return s;
}

inline Mat embed_tokens(const Params& p, const std::vector<int>& ids, int d) {
  Mat x;
  for (size_t i = 0; i < ids.size(); ++i) {
    auto e = row_of(p.at("phoneme_embedding.table"), ids[i]);
    const auto pe = position_encoding(static_cast<int>(i), d);
    for (int j = 0; j < d; ++j) e[j] += pe[j];
    x.push_back(e);
  }
  return x;
}

inline Mat decoder_logits(const Params& p, const vallex::RecoTransConfig& c, const std::vector<int>& target,
                          const Mat& memory) {
  std::vector<int> input{c.bos()};
  input.insert(input.end(), target.begin(), target.end());
  Mat x = embed_tokens(p, input, c.attention_dim);
  for (int l = 0; l < c.dec_layers; ++l)
    x = transformer_layer(x, p, "dec." + std::to_string(l), "", c.heads, [](int i, int j) { return j <= i; }, &memory);
  return linear(layer_norm(x, p, "dec.norm"), p, "dec.head");
}

inline double decoder_nll(const Params& p, const vallex::RecoTransConfig& c, const std::vector<int>& target,
                          const Mat& memory) {
  const Mat logits = decoder_logits(p, c, target, memory);
  double nll = 0.0;
  for (size_t i = 0; i <= target.size(); ++i) nll -= log_softmax(logits[i])[i < target.size() ? target[i] : c.eos()];
  return nll;
}

inline double speech_loss(const Params& p, const vallex::RecoTransConfig& c,
                          const std::vector<vallex::SpeechSample>& batch, const std::vector<std::vector<bool>>& masks) {
  double total = 0.0;
  for (size_t b = 0; b < batch.size(); ++b) {
    const SpeechStates s = encode_speech(p, c, batch[b].waveform, &masks[b]);
    const Mat l1 = linear(layer_norm(s.enc1, p, "head1.norm"), p, "head1.proj");
    const Mat l2 = linear(layer_norm(s.enc2, p, "head2.norm"), p, "head2.proj");
    for (size_t f = 0; f < masks[b].size(); ++f)
      if (masks[b][f])
        total -= log_softmax(l1[f])[batch[b].frame_labels[f]] + log_softmax(l2[f])[batch[b].frame_labels[f]];
  }
  return total / batch.size();
}

inline double text_loss(const Params& p, const vallex::RecoTransConfig& c, const std::vector<vallex::TextPair>& batch) {
  double total = 0.0;
  for (const auto& pair : batch) {
    Mat memory = embed_tokens(p, pair.source, c.attention_dim);
    for (int l = 0; l < c.enc2_layers; ++l)
      memory = transformer_layer(memory, p, "enc2." + std::to_string(l), "", c.heads, [](int, int) { return true; });
    total += decoder_nll(p, c, pair.target, memory);
  }
  return total / batch.size();
}

/// CTC negative log-likelihood by enumerating every frame-level path.
inline double ctc_enumerate(const Mat& log_probs, const std::vector<int>& target, int blank) {
  const size_t T = log_probs.size();
  const int V = static_cast<int>(log_probs[0].size());
  std::vector<int> path(T, 0);
  double total = 0.0;
  while (true) {
    std::vector<int> collapsed;
    for (size_t t = 0; t < T; ++t)
      if (path[t] != blank && (t == 0 || path[t] != path[t - 1])) collapsed.push_back(path[t]);
    if (collapsed == target) {
      double lp = 0.0;
      for (size_t t = 0; t < T; ++t) lp += log_probs[t][path[t]];
      total += std::exp(lp);
    }
    size_t t = 0;
    while (t < T && ++path[t] == V) path[t++] = 0;
    if (t == T) break;
  }
  return -std::log(total);
}

inline double finetune_loss(const Params& p, const vallex::RecoTransConfig& c,
                            const std::vector<vallex::FinetuneSample>& batch) {
  double total = 0.0;
  for (const auto& s : batch) {
    const SpeechStates st = encode_speech(p, c, s.waveform, nullptr);
    Mat scores = linear(gelu(linear(layer_norm(st.enc2, p, "ctc.norm"), p, "ctc.hidden")), p, "ctc.out");
    for (auto& row : scores) row = log_softmax(row);
    std::vector<int> reduced;
    for (size_t i = 0; i < s.source.size(); ++i)
      if (i == 0 || s.source[i] != s.source[i - 1]) reduced.push_back(s.source[i]);
    total += c.ctc_weight * ctc_enumerate(scores, reduced, c.blank()) + decoder_nll(p, c, s.target, st.enc2);
  }
  return total / batch.size();
}

}  // namespace ref
