#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vallex/matrix.hpp"

namespace vallex {
class Rng;
}

namespace vallex::nn {

template <typename T>
using Mat = RowMatrix<T>;

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }
};

/// A matrix-valued value in the computation graph. Sequences are stored as
/// rows; scalars are 1x1.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const Mat<T>& value() const { return node_->value; }
  Mat<T>& mutable_value() { return node_->value; }
  const Mat<T>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad; }
  int rows() const { return static_cast<int>(node_->value.rows()); }
  int cols() const { return static_cast<int>(node_->value.cols()); }
  T item() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Trainable leaf tensor.
template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(int rows, int cols);

  Var<T> var() const { return Var<T>(node_); }
  Mat<T>& value() { return node_->value; }
  const Mat<T>& value() const { return node_->value; }
  Mat<T>& grad() { return node_->grad; }
  bool has_grad() const { return node_->has_grad; }
  void zero_grad();
  int rows() const { return static_cast<int>(node_->value.rows()); }
  int cols() const { return static_cast<int>(node_->value.cols()); }
  long size() const { return static_cast<long>(node_->value.size()); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

template <typename T>
Var<T> constant(Mat<T> value);

/// Runs reverse-mode differentiation from a 1x1 loss.
template <typename T>
void backward(const Var<T>& loss);

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x * w + b (b is 1 x out, broadcast over rows).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
/// a + c where c is a constant matrix of the same shape.
template <typename T>
Var<T> add_constant(const Var<T>& a, const Mat<T>& c);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
template <typename T>
Var<T> gelu(const Var<T>& a);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
/// Rows of `table` selected by ids.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids);
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> slice_rows(const Var<T>& a, int start, int count);
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> rows);
template <typename T>
Var<T> dropout(const Var<T>& a, T p, Rng& rng);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> log_softmax(const Var<T>& logits);

/// Sum over rows of -log softmax(logits)[row, target]; rows with target < 0
/// are ignored.
template <typename T>
Var<T> cross_entropy_sum(const Var<T>& logits, std::span<const int> targets);

/// One attention block instance: queries rows [q_off, q_off+q_len) attend to
/// keys rows [k_off, k_off+k_len). With `causal`, query i may see key j only
/// when j <= i + (k_len - q_len).
struct AttnSpan {
  int q_off = 0, q_len = 0, k_off = 0, k_len = 0;
  bool causal = false;
};

/// Scaled dot-product attention over packed sequences; q, k, v are already
/// projected (d_model columns split evenly into `heads`).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const AttnSpan> spans, int heads);

/// 1-D convolution over rows (time) with `channels_in` columns; w is
/// (kernel*channels_in) x channels_out, laid out kernel-tap-major.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int kernel, int stride);

/// Sinusoidal encodings for the given positions.
template <typename T>
Mat<T> sinusoid_table(std::span<const int> positions, int dim);

}  // namespace vallex::nn
