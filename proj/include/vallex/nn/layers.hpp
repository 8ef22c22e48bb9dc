#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vallex/nn/tensor.hpp"
#include "vallex/random.hpp"

namespace vallex::nn {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Parameter<T>*>>;

template <typename T>
void init_normal(Parameter<T>& p, double stddev, Rng& rng);

/// Copies parameter values between two lists with identical names and shapes
/// (e.g. a float model into its double twin).
template <typename T, typename U>
void copy_parameters(const ParamList<U>& from, const ParamList<T>& to);

template <typename T>
long count_parameters(const ParamList<T>& params);

template <typename T>
void zero_grad(const ParamList<T>& params);

template <typename T>
struct Linear {
  Parameter<T> w, b;  // w is in x out

  Linear() = default;
  /// Weights ~ N(0, stddev^2); stddev < 0 means 1/sqrt(in).
  Linear(int in, int out, Rng& rng, double stddev = -1.0);
  Var<T> operator()(const Var<T>& x) const { return linear(x, w.var(), b.var()); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct LayerNorm {
  Parameter<T> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma.var(), beta.var()); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct Embedding {
  Parameter<T> table;

  Embedding() = default;
  Embedding(int count, int dim, Rng& rng, double stddev = 1.0);
  Var<T> operator()(std::span<const int> ids) const { return embedding(table.var(), ids); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, Rng& rng, double out_scale);
  /// Queries from x, keys/values from memory (x itself for self-attention).
  Var<T> operator()(const Var<T>& x, const Var<T>& memory, std::span<const AttnSpan> spans) const;
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct FeedForward {
  Linear<T> fc1, fc2;

  FeedForward() = default;
  FeedForward(int dim, int hidden, Rng& rng, double out_scale);
  Var<T> operator()(const Var<T>& x) const { return fc2(gelu(fc1(x))); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

/// Pre-norm transformer layer. Each normalization exists in `norm_sets`
/// copies; the caller picks one per forward call (e.g. one per generation
/// level). With `cross` the layer also attends to an encoder memory.
template <typename T>
struct TransformerLayer {
  std::vector<LayerNorm<T>> ln_self, ln_cross, ln_ffn;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ffn;
  bool has_cross = false;

  TransformerLayer() = default;
  TransformerLayer(int dim, int heads, int ffn_dim, bool cross, int norm_sets, int depth, Rng& rng);

  struct Context {
    std::span<const AttnSpan> self_spans;
    const Var<T>* memory = nullptr;
    std::span<const AttnSpan> cross_spans;
    int norm_set = 0;
    T dropout = T(0);
    Rng* rng = nullptr;  // required when dropout > 0
  };
  Var<T> operator()(const Var<T>& x, const Context& ctx) const;
  void collect(const std::string& prefix, ParamList<T>& out);
};

}  // namespace vallex::nn
