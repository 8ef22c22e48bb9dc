#include "vallex/nn/tensor.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

#include "vallex/common.hpp"
#include "vallex/random.hpp"

namespace vallex::nn {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Creates a result node; graph edges are recorded only when some input needs
// a gradient and recording is enabled.
template <typename T>
Var<T> make_result(Mat<T> value, std::vector<NodePtr<T>> parents, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(fn);
    }
  }
  return Var<T>(std::move(n));
}

void check(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace

template <typename T>
Parameter<T>::Parameter(int rows, int cols) : node_(std::make_shared<Node<T>>()) {
  node_->value = Mat<T>::Zero(rows, cols);
  node_->requires_grad = true;
}

template <typename T>
void Parameter<T>::zero_grad() {
  node_->has_grad = false;
  node_->grad.resize(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Var<T> constant(Mat<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T>& loss) {
  check(loss.rows() == 1 && loss.cols() == 1, "backward needs a scalar loss");
  if (!loss.node()->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(*n);
  }
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check(a.cols() == b.rows(), "matmul: shape mismatch");
  Mat<T> out = a.value() * b.value();
  auto pa = a.node(), pb = b.node();
  return make_result<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) pa->accumulate(n.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * n.grad);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(), "linear: shape mismatch");
  Mat<T> out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  auto px = x.node(), pw = w.node(), pb = b.node();
  return make_result<T>(std::move(out), {px, pw, pb}, [px, pw, pb](Node<T>& n) {
    if (px->requires_grad) px->accumulate(n.grad * pw->value.transpose());
    if (pw->requires_grad) pw->accumulate(px->value.transpose() * n.grad);
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto pa = a.node(), pb = b.node();
  return make_result<T>(a.value() + b.value(), {pa, pb}, [pa, pb](Node<T>& n) {
    if (pa->requires_grad) pa->accumulate(n.grad);
    if (pb->requires_grad) pb->accumulate(n.grad);
  });
}

template <typename T>
Var<T> add_constant(const Var<T>& a, const Mat<T>& c) {
  check(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant: shape mismatch");
  auto pa = a.node();
  return make_result<T>(a.value() + c, {pa}, [pa](Node<T>& n) { pa->accumulate(n.grad); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto pa = a.node();
  return make_result<T>(a.value() * s, {pa}, [pa, s](Node<T>& n) { pa->accumulate(n.grad * s); });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
  const Mat<T>& x = a.value();
  Mat<T> th(x.rows(), x.cols());
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    const T t = std::tanh(c * (v + T(0.044715) * v * v * v));
    th.data()[i] = t;
    out.data()[i] = T(0.5) * v * (T(1) + t);
  }
  auto pa = a.node();
  return make_result<T>(std::move(out), {pa}, [pa, th = std::move(th), c](Node<T>& n) {
    const Mat<T>& x = pa->value;
    Mat<T> g(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const T v = x.data()[i], t = th.data()[i];
      const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * v * v);
      g.data()[i] = n.grad.data()[i] * d;
    }
    pa->accumulate(g);
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int d = x.cols();
  check(gamma.cols() == d && beta.cols() == d && gamma.rows() == 1 && beta.rows() == 1, "layer_norm: shape mismatch");
  const Mat<T>& xv = x.value();
  Mat<T> xhat(xv.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std[r];
  }
  Mat<T> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result<T>(std::move(out), {px, pg, pb},
                        [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), d](Node<T>& n) {
                          if (pg->requires_grad) pg->accumulate((n.grad.array() * xhat.array()).colwise().sum().matrix());
                          if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
                          if (px->requires_grad) {
                            Mat<T> dxhat = n.grad.array().rowwise() * pg->value.row(0).array();
                            Mat<T> dx(dxhat.rows(), d);
                            for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                              const T m1 = dxhat.row(r).mean();
                              const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
                              dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[r];
                            }
                            px->accumulate(dx);
                          }
                        });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  const Mat<T>& tv = table.value();
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw InvalidArgument("embedding: index " + std::to_string(ids[i]) + " out of range");
    out.row(i) = tv.row(ids[i]);
  }
  auto pt = table.node();
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result<T>(std::move(out), {pt}, [pt, idx = std::move(idx)](Node<T>& n) {
    Mat<T> g = Mat<T>::Zero(pt->value.rows(), pt->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(i);
    pt->accumulate(g);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  const int cols = parts[0].cols();
  int rows = 0;
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<T> out(rows, cols);
  std::vector<NodePtr<T>> nodes;
  std::vector<int> offsets;
  int r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    offsets.push_back(r);
    nodes.push_back(p.node());
    r += p.rows();
  }
  auto captured = nodes;
  return make_result<T>(std::move(out), std::move(nodes), [captured, offsets](Node<T>& n) {
    for (size_t i = 0; i < captured.size(); ++i)
      if (captured[i]->requires_grad)
        captured[i]->accumulate(n.grad.middleRows(offsets[i], captured[i]->value.rows()));
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, int start, int count) {
  check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  auto pa = a.node();
  return make_result<T>(a.value().middleRows(start, count), {pa}, [pa, start, count](Node<T>& n) {
    Mat<T> g = Mat<T>::Zero(pa->value.rows(), pa->value.cols());
    g.middleRows(start, count) = n.grad;
    pa->accumulate(g);
  });
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::span<const int> rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < a.rows(), "gather_rows: out of range");
    out.row(i) = a.value().row(rows[i]);
  }
  auto pa = a.node();
  std::vector<int> idx(rows.begin(), rows.end());
  return make_result<T>(std::move(out), {pa}, [pa, idx = std::move(idx)](Node<T>& n) {
    Mat<T> g = Mat<T>::Zero(pa->value.rows(), pa->value.cols());
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(i);
    pa->accumulate(g);
  });
}

template <typename T>
Var<T> dropout(const Var<T>& a, T p, Rng& rng) {
  if (p <= T(0)) return a;
  check(p < T(1), "dropout probability must be below 1");
  Mat<T> mask(a.rows(), a.cols());
  const T keep = T(1) / (T(1) - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < double(p) ? T(0) : keep;
  auto pa = a.node();
  Mat<T> out = a.value().cwiseProduct(mask);
  return make_result<T>(std::move(out), {pa}, [pa, mask = std::move(mask)](Node<T>& n) {
    pa->accumulate(n.grad.cwiseProduct(mask));
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Mat<T> out(1, 1);
  out(0, 0) = a.value().sum();
  auto pa = a.node();
  return make_result<T>(std::move(out), {pa}, [pa](Node<T>& n) {
    pa->accumulate(Mat<T>::Constant(pa->value.rows(), pa->value.cols(), n.grad(0, 0)));
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& logits) {
  const Mat<T>& x = logits.value();
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  auto pl = logits.node();
  Mat<T> saved = out;
  return make_result<T>(std::move(out), {pl}, [pl, saved = std::move(saved)](Node<T>& n) {
    Mat<T> g = n.grad;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const T s = n.grad.row(r).sum();
      g.row(r) = n.grad.row(r).array() - saved.row(r).array().exp() * s;
    }
    pl->accumulate(g);
  });
}

template <typename T>
Var<T> cross_entropy_sum(const Var<T>& logits, std::span<const int> targets) {
  const Mat<T>& x = logits.value();
  check(static_cast<Eigen::Index>(targets.size()) == x.rows(), "cross_entropy: target count mismatch");
  Mat<T> prob(x.rows(), x.cols());
  T total = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const int t = targets[r];
    if (t < 0) {
      prob.row(r).setZero();
      continue;
    }
    check(t < x.cols(), "cross_entropy: target out of range");
    const T m = x.row(r).maxCoeff();
    const auto e = (x.row(r).array() - m).exp();
    const T s = e.sum();
    prob.row(r) = e / s;
    total += -(x(r, t) - m - std::log(s));
  }
  Mat<T> out(1, 1);
  out(0, 0) = total;
  auto pl = logits.node();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<T>(std::move(out), {pl}, [pl, prob = std::move(prob), tg = std::move(tg)](Node<T>& n) {
    Mat<T> g = prob;
    for (size_t r = 0; r < tg.size(); ++r)
      if (tg[r] >= 0) g(r, tg[r]) -= T(1);
    pl->accumulate(g * n.grad(0, 0));
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::span<const AttnSpan> spans, int heads) {
  const int d = q.cols();
  check(k.cols() == d && v.cols() == d && k.rows() == v.rows(), "attention: shape mismatch");
  check(heads > 0 && d % heads == 0, "attention: heads must divide the model dimension");
  const int dh = d / heads;
  const T inv = T(1) / std::sqrt(T(dh));
  Mat<T> out = Mat<T>::Zero(q.rows(), d);
  std::vector<Mat<T>> probs;
  probs.reserve(spans.size() * heads);
  for (const auto& s : spans) {
    check(s.q_off >= 0 && s.q_off + s.q_len <= q.rows() && s.k_off >= 0 && s.k_off + s.k_len <= k.rows(),
          "attention: span out of range");
    check(s.k_len > 0 || s.q_len == 0, "attention: empty key span");
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.value().block(s.q_off, h * dh, s.q_len, dh);
      const auto kh = k.value().block(s.k_off, h * dh, s.k_len, dh);
      const auto vh = v.value().block(s.k_off, h * dh, s.k_len, dh);
      Mat<T> p = (qh * kh.transpose()) * inv;
      for (int i = 0; i < s.q_len; ++i) {
        const int allowed = s.causal ? std::min(s.k_len, i + (s.k_len - s.q_len) + 1) : s.k_len;
        check(allowed > 0, "attention: query with no visible key");
        const T m = p.row(i).head(allowed).maxCoeff();
        T z = 0;
        for (int j = 0; j < allowed; ++j) {
          p(i, j) = std::exp(p(i, j) - m);
          z += p(i, j);
        }
        for (int j = 0; j < allowed; ++j) p(i, j) /= z;
        for (int j = allowed; j < s.k_len; ++j) p(i, j) = T(0);
      }
      out.block(s.q_off, h * dh, s.q_len, dh) = p * vh;
      probs.push_back(std::move(p));
    }
  }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  std::vector<AttnSpan> sp(spans.begin(), spans.end());
  return make_result<T>(
      std::move(out), {pq, pk, pv}, [pq, pk, pv, sp = std::move(sp), probs = std::move(probs), heads, dh, inv](Node<T>& n) {
        Mat<T> gq = Mat<T>::Zero(pq->value.rows(), pq->value.cols());
        Mat<T> gk = Mat<T>::Zero(pk->value.rows(), pk->value.cols());
        Mat<T> gv = Mat<T>::Zero(pv->value.rows(), pv->value.cols());
        size_t idx = 0;
        for (const auto& s : sp) {
          for (int h = 0; h < heads; ++h, ++idx) {
            const Mat<T>& p = probs[idx];
            const auto go = n.grad.block(s.q_off, h * dh, s.q_len, dh);
            const auto qh = pq->value.block(s.q_off, h * dh, s.q_len, dh);
            const auto kh = pk->value.block(s.k_off, h * dh, s.k_len, dh);
            const auto vh = pv->value.block(s.k_off, h * dh, s.k_len, dh);
            gv.block(s.k_off, h * dh, s.k_len, dh) += p.transpose() * go;
            Mat<T> dp = go * vh.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
            Mat<T> ds = (p.array() * (dp.array().colwise() - rs.array())) * inv;
            gq.block(s.q_off, h * dh, s.q_len, dh) += ds * kh;
            gk.block(s.k_off, h * dh, s.k_len, dh) += ds.transpose() * qh;
          }
        }
        if (pq->requires_grad) pq->accumulate(gq);
        if (pk->requires_grad) pk->accumulate(gk);
        if (pv->requires_grad) pv->accumulate(gv);
      });
}

template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int kernel, int stride) {
  const int cin = x.cols();
  check(kernel >= 1 && stride >= 1, "conv1d: invalid kernel or stride");
  check(w.rows() == kernel * cin && b.rows() == 1 && b.cols() == w.cols(), "conv1d: weight shape mismatch");
  if (x.rows() < kernel) throw InvalidArgument("conv1d: input shorter than the kernel");
  const int tout = (x.rows() - kernel) / stride + 1;
  using Strided = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
  Strided cols(x.value().data(), tout, kernel * cin, Eigen::OuterStride<>(stride * cin));
  Mat<T> out = cols * w.value();
  out.rowwise() += b.value().row(0);
  auto px = x.node(), pw = w.node(), pb = b.node();
  return make_result<T>(std::move(out), {px, pw, pb}, [px, pw, pb, kernel, stride, tout, cin](Node<T>& n) {
    Strided cols(px->value.data(), tout, kernel * cin, Eigen::OuterStride<>(stride * cin));
    if (pw->requires_grad) pw->accumulate(cols.transpose() * n.grad);
    if (pb->requires_grad) pb->accumulate(n.grad.colwise().sum());
    if (px->requires_grad) {
      Mat<T> dcols = n.grad * pw->value.transpose();
      Mat<T> gx = Mat<T>::Zero(px->value.rows(), cin);
      for (int t = 0; t < tout; ++t)
        for (int k = 0; k < kernel; ++k) gx.row(t * stride + k) += dcols.block(t, k * cin, 1, cin);
      px->accumulate(gx);
    }
  });
}

template <typename T>
Mat<T> sinusoid_table(std::span<const int> positions, int dim) {
  Mat<T> out(static_cast<Eigen::Index>(positions.size()), dim);
  const int half = dim / 2;
  for (size_t r = 0; r < positions.size(); ++r) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -double(i) / half);
      out(r, i) = static_cast<T>(std::sin(positions[r] * freq));
      out(r, half + i) = static_cast<T>(std::cos(positions[r] * freq));
    }
    if (dim % 2) out(r, dim - 1) = T(0);
  }
  return out;
}

#define VALLEX_INSTANTIATE(T)                                                                          \
  template class Parameter<T>;                                                                         \
  template Var<T> constant(Mat<T>);                                                                    \
  template void backward(const Var<T>&);                                                               \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> add_constant(const Var<T>&, const Mat<T>&);                                          \
  template Var<T> scale(const Var<T>&, T);                                                             \
  template Var<T> gelu(const Var<T>&);                                                                 \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                          \
  template Var<T> embedding(const Var<T>&, std::span<const int>);                                      \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                                             \
  template Var<T> slice_rows(const Var<T>&, int, int);                                                 \
  template Var<T> gather_rows(const Var<T>&, std::span<const int>);                                    \
  template Var<T> dropout(const Var<T>&, T, Rng&);                                                     \
  template Var<T> sum(const Var<T>&);                                                                  \
  template Var<T> log_softmax(const Var<T>&);                                                          \
  template Var<T> cross_entropy_sum(const Var<T>&, std::span<const int>);                              \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::span<const AttnSpan>, int); \
  template Var<T> conv1d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                       \
  template Mat<T> sinusoid_table(std::span<const int>, int);

VALLEX_INSTANTIATE(float)
VALLEX_INSTANTIATE(double)

}  // namespace vallex::nn
