#pragma once

#include <span>
#include <vector>

#include "vallex/nn/tensor.hpp"

namespace vallex {

/// CTC negative log-likelihood of `target` given per-frame log-probabilities
/// (T x V, rows already normalized). Throws when T cannot fit the target
/// (T < |target| + number of adjacent repeats).
template <typename T>
T ctc_nll(const nn::Mat<T>& log_probs, std::span<const int> target, int blank);

/// Differentiable form; the gradient flows to log_probs.
template <typename T>
nn::Var<T> ctc_loss(const nn::Var<T>& log_probs, std::span<const int> target, int blank);

/// Argmax path, repeats collapsed, blanks removed.
template <typename T>
std::vector<int> ctc_greedy_decode(const nn::Mat<T>& scores, int blank);

/// Run-length collapse: [a,a,b,b,b,a] -> [a,b,a].
std::vector<int> collapse_repeats(std::span<const int> ids);

}  // namespace vallex
