#include "vallex/nn/layers.hpp"

#include <cmath>

#include "vallex/common.hpp"

namespace vallex::nn {

template <typename T>
void init_normal(Parameter<T>& p, double stddev, Rng& rng) {
  auto& v = p.value();
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(stddev * rng.normal());
}

template <typename T, typename U>
void copy_parameters(const ParamList<U>& from, const ParamList<T>& to) {
  if (from.size() != to.size()) throw InvalidArgument("copy_parameters: parameter count mismatch");
  for (size_t i = 0; i < from.size(); ++i) {
    if (from[i].first != to[i].first || from[i].second->rows() != to[i].second->rows() ||
        from[i].second->cols() != to[i].second->cols())
      throw InvalidArgument("copy_parameters: mismatch at " + from[i].first);
    to[i].second->value() = from[i].second->value().template cast<T>();
  }
}

template <typename T>
long count_parameters(const ParamList<T>& params) {
  long n = 0;
  for (const auto& [_, p] : params) n += p->size();
  return n;
}

template <typename T>
void zero_grad(const ParamList<T>& params) {
  for (const auto& [_, p] : params) p->zero_grad();
}

template <typename T>
Linear<T>::Linear(int in, int out, Rng& rng, double stddev) : w(in, out), b(1, out) {
  init_normal(w, stddev < 0 ? 1.0 / std::sqrt(double(in)) : stddev, rng);
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".w", &w});
  out.push_back({prefix + ".b", &b});
}

template <typename T>
LayerNorm<T>::LayerNorm(int dim) : gamma(1, dim), beta(1, dim) {
  gamma.value().setOnes();
}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".gamma", &gamma});
  out.push_back({prefix + ".beta", &beta});
}

template <typename T>
Embedding<T>::Embedding(int count, int dim, Rng& rng, double stddev) : table(count, dim) {
  init_normal(table, stddev, rng);
}

template <typename T>
void Embedding<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".table", &table});
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(int dim, int h, Rng& rng, double out_scale)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng, out_scale / std::sqrt(double(dim))), heads(h) {
  if (h < 1 || dim % h != 0) throw InvalidArgument("attention heads must divide the model dimension");
}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(const Var<T>& x, const Var<T>& memory, std::span<const AttnSpan> spans) const {
  return o(attention(q(x), k(memory), v(memory), spans, heads));
}

template <typename T>
void MultiHeadAttention<T>::collect(const std::string& prefix, ParamList<T>& out) {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

template <typename T>
FeedForward<T>::FeedForward(int dim, int hidden, Rng& rng, double out_scale)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng, out_scale / std::sqrt(double(hidden))) {}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix, ParamList<T>& out) {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

template <typename T>
TransformerLayer<T>::TransformerLayer(int dim, int heads, int ffn_dim, bool cross, int norm_sets, int depth, Rng& rng)
    : has_cross(cross) {
  if (norm_sets < 1) throw InvalidArgument("need at least one normalization set");
  const double out_scale = 1.0 / std::sqrt(2.0 * std::max(1, depth));
  for (int i = 0; i < norm_sets; ++i) {
    ln_self.emplace_back(dim);
    if (cross) ln_cross.emplace_back(dim);
    ln_ffn.emplace_back(dim);
  }
  self_attn = MultiHeadAttention<T>(dim, heads, rng, out_scale);
  if (cross) cross_attn = MultiHeadAttention<T>(dim, heads, rng, out_scale);
  ffn = FeedForward<T>(dim, ffn_dim, rng, out_scale);
}

template <typename T>
Var<T> TransformerLayer<T>::operator()(const Var<T>& x, const Context& ctx) const {
  if (ctx.norm_set < 0 || ctx.norm_set >= static_cast<int>(ln_self.size()))
    throw InvalidArgument("normalization set out of range");
  auto drop = [&](const Var<T>& v) { return ctx.dropout > T(0) ? dropout(v, ctx.dropout, *ctx.rng) : v; };
  const Var<T> h = ln_self[ctx.norm_set](x);
  Var<T> y = add(x, drop(self_attn(h, h, ctx.self_spans)));
  if (has_cross) {
    if (!ctx.memory) throw InvalidArgument("cross-attention layer needs an encoder memory");
    y = add(y, drop(cross_attn(ln_cross[ctx.norm_set](y), *ctx.memory, ctx.cross_spans)));
  }
  return add(y, drop(ffn(ln_ffn[ctx.norm_set](y))));
}

template <typename T>
void TransformerLayer<T>::collect(const std::string& prefix, ParamList<T>& out) {
  for (size_t i = 0; i < ln_self.size(); ++i) {
    const std::string suffix = ln_self.size() > 1 ? std::to_string(i) : "";
    ln_self[i].collect(prefix + ".ln_self" + suffix, out);
    if (has_cross) ln_cross[i].collect(prefix + ".ln_cross" + suffix, out);
    ln_ffn[i].collect(prefix + ".ln_ffn" + suffix, out);
  }
  self_attn.collect(prefix + ".self_attn", out);
  if (has_cross) cross_attn.collect(prefix + ".cross_attn", out);
  ffn.collect(prefix + ".ffn", out);
}

#define VALLEX_LAYERS(T)                                   \
  template void init_normal(Parameter<T>&, double, Rng&);  \
  template long count_parameters(const ParamList<T>&);     \
  template void zero_grad(const ParamList<T>&);            \
  template struct Linear<T>;                               \
  template struct LayerNorm<T>;                            \
  template struct Embedding<T>;                            \
  template struct MultiHeadAttention<T>;                   \
  template struct FeedForward<T>;                          \
  template struct TransformerLayer<T>;

VALLEX_LAYERS(float)
VALLEX_LAYERS(double)
template void copy_parameters<double, float>(const ParamList<float>&, const ParamList<double>&);
template void copy_parameters<float, float>(const ParamList<float>&, const ParamList<float>&);
template void copy_parameters<double, double>(const ParamList<double>&, const ParamList<double>&);
template void copy_parameters<float, double>(const ParamList<double>&, const ParamList<float>&);

}  // namespace vallex::nn
