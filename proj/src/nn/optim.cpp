#include "vallex/nn/optim.hpp"

#include <algorithm>
#include <cmath>

#include "vallex/common.hpp"

namespace vallex::nn {

double inverse_sqrt_lr(long step, double max_lr, int warmup_steps) {
  if (step < 1) throw InvalidArgument("learning-rate schedule steps start at 1");
  if (warmup_steps < 1) return max_lr / std::sqrt(double(step));
  const double s = double(step), w = double(warmup_steps);
  return max_lr * std::min(s / w, std::sqrt(w / s));
}

template <typename T>
Adam<T>::Adam(ParamList<T> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& [_, p] : params_) {
    m_.push_back(Mat<T>::Zero(p->rows(), p->cols()));
    v_.push_back(Mat<T>::Zero(p->rows(), p->cols()));
  }
}

template <typename T>
double Adam<T>::step() {
  ++step_;
  const double lr = inverse_sqrt_lr(step_, config_.max_lr, config_.warmup_steps);
  double norm2 = 0.0;
  for (const auto& [_, p] : params_)
    if (p->has_grad()) norm2 += p->grad().template cast<double>().squaredNorm();
  last_norm_ = std::sqrt(norm2);
  if (!std::isfinite(last_norm_)) throw NumericalError("non-finite gradient norm at step " + std::to_string(step_));
  const double clip = (config_.clip_norm > 0.0 && last_norm_ > config_.clip_norm) ? config_.clip_norm / last_norm_ : 1.0;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(step_)), c2 = 1.0 - std::pow(b2, double(step_));
  const T step_size = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>& p = *params_[i].second;
    auto& m = m_[i];
    auto& v = v_[i];
    if (p.has_grad()) {
      const Mat<T> g = p.grad() * static_cast<T>(clip);
      m = m * T(b1) + g * T(1 - b1);
      v = v * T(b2) + g.cwiseAbs2() * T(1 - b2);
    } else {
      m *= T(b1);
      v *= T(b2);
    }
    if (lr != 0.0)
      p.value().array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + T(config_.eps));
    p.zero_grad();
  }
  return lr;
}

template class Adam<float>;
template class Adam<double>;

}  // namespace vallex::nn
