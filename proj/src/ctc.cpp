#include "vallex/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vallex/common.hpp"

namespace vallex {

namespace {

template <typename T>
T log_add(T a, T b) {
  if (a == -std::numeric_limits<T>::infinity()) return b;
  if (b == -std::numeric_limits<T>::infinity()) return a;
  const T m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// Forward (alpha) and backward (beta) lattices over the blank-extended label
// sequence; returns log p(target | x).
template <typename T>
T lattice(const nn::Mat<T>& lp, std::span<const int> target, int blank, nn::Mat<T>* alpha_out, nn::Mat<T>* beta_out,
          std::vector<int>* ext_out) {
  const int t_len = static_cast<int>(lp.rows());
  const int l_len = static_cast<int>(target.size());
  int repeats = 0;
  for (int i = 1; i < l_len; ++i) repeats += target[i] == target[i - 1];
  if (t_len < l_len + repeats || t_len == 0)
    throw InvalidArgument("CTC: " + std::to_string(t_len) + " frames cannot align a target of length " +
                          std::to_string(l_len));
  if (blank < 0 || blank >= lp.cols()) throw InvalidArgument("CTC: blank index out of range");
  for (int id : target)
    if (id < 0 || id >= lp.cols() || id == blank) throw InvalidArgument("CTC: invalid target label");

  std::vector<int> ext(2 * l_len + 1, blank);
  for (int i = 0; i < l_len; ++i) ext[2 * i + 1] = target[i];
  const int s_len = static_cast<int>(ext.size());
  const T ninf = -std::numeric_limits<T>::infinity();
  nn::Mat<T> alpha = nn::Mat<T>::Constant(t_len, s_len, ninf);
  nn::Mat<T> beta = nn::Mat<T>::Constant(t_len, s_len, ninf);
  alpha(0, 0) = lp(0, ext[0]);
  if (s_len > 1) alpha(0, 1) = lp(0, ext[1]);
  for (int t = 1; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      T a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == ninf ? ninf : a + lp(t, ext[s]);
    }
  }
  beta(t_len - 1, s_len - 1) = lp(t_len - 1, ext[s_len - 1]);
  if (s_len > 1) beta(t_len - 1, s_len - 2) = lp(t_len - 1, ext[s_len - 2]);
  for (int t = t_len - 2; t >= 0; --t) {
    for (int s = 0; s < s_len; ++s) {
      T b = beta(t + 1, s);
      if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < s_len && ext[s] != blank && ext[s] != ext[s + 2]) b = log_add(b, beta(t + 1, s + 2));
      beta(t, s) = b == ninf ? ninf : b + lp(t, ext[s]);
    }
  }
  T logp = alpha(t_len - 1, s_len - 1);
  if (s_len > 1) logp = log_add(logp, alpha(t_len - 1, s_len - 2));
  if (alpha_out) *alpha_out = std::move(alpha);
  if (beta_out) *beta_out = std::move(beta);
  if (ext_out) *ext_out = std::move(ext);
  return logp;
}

}  // namespace

template <typename T>
T ctc_nll(const nn::Mat<T>& log_probs, std::span<const int> target, int blank) {
  return -lattice<T>(log_probs, target, blank, nullptr, nullptr, nullptr);
}

template <typename T>
nn::Var<T> ctc_loss(const nn::Var<T>& log_probs, std::span<const int> target, int blank) {
  nn::Mat<T> alpha, beta;
  std::vector<int> ext;
  const nn::Mat<T>& lp = log_probs.value();
  const T logp = lattice<T>(lp, target, blank, &alpha, &beta, &ext);
  if (!std::isfinite(logp)) throw NumericalError("CTC: target has zero probability");
  // d(-log p)/d lp(t,k) = -sum_{s: ext[s]=k} exp(alpha + beta - lp(t,k) - log p)
  nn::Mat<T> grad = nn::Mat<T>::Zero(lp.rows(), lp.cols());
  for (Eigen::Index t = 0; t < lp.rows(); ++t)
    for (size_t s = 0; s < ext.size(); ++s) {
      const T occ = alpha(t, s) + beta(t, s);
      if (occ == -std::numeric_limits<T>::infinity()) continue;
      grad(t, ext[s]) -= std::exp(occ - lp(t, ext[s]) - logp);
    }
  nn::Mat<T> out(1, 1);
  out(0, 0) = -logp;
  auto parent = log_probs.node();
  auto node = std::make_shared<nn::Node<T>>();
  node->value = std::move(out);
  if (nn::grad_enabled() && parent->requires_grad) {
    node->requires_grad = true;
    node->parents = {parent};
    node->backward_fn = [parent, grad = std::move(grad)](nn::Node<T>& n) { parent->accumulate(grad * n.grad(0, 0)); };
  }
  return nn::Var<T>(std::move(node));
}

template <typename T>
std::vector<int> ctc_greedy_decode(const nn::Mat<T>& scores, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (Eigen::Index t = 0; t < scores.rows(); ++t) {
    Eigen::Index best;
    scores.row(t).maxCoeff(&best);
    const int k = static_cast<int>(best);
    if (k != prev && k != blank) out.push_back(k);
    prev = k;
  }
  return out;
}

std::vector<int> collapse_repeats(std::span<const int> ids) {
  std::vector<int> out;
  for (int id : ids)
    if (out.empty() || out.back() != id) out.push_back(id);
  return out;
}

template float ctc_nll(const nn::Mat<float>&, std::span<const int>, int);
template double ctc_nll(const nn::Mat<double>&, std::span<const int>, int);
template nn::Var<float> ctc_loss(const nn::Var<float>&, std::span<const int>, int);
template nn::Var<double> ctc_loss(const nn::Var<double>&, std::span<const int>, int);
template std::vector<int> ctc_greedy_decode(const nn::Mat<float>&, int);
template std::vector<int> ctc_greedy_decode(const nn::Mat<double>&, int);

}  // namespace vallex
