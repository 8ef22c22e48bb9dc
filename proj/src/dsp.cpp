#include "vallex/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unsupported/Eigen/FFT>

#include "vallex/common.hpp"

namespace vallex::dsp {

std::vector<double> hann(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / n);
  return w;
}

struct RealFft::Impl {
  Eigen::FFT<double> fft;
  std::vector<double> in;
  std::vector<std::complex<double>> out;
};

RealFft::RealFft(int size) : size_(size), impl_(std::make_unique<Impl>()) {
  if (size < 2 || (size & (size - 1)) != 0) throw InvalidArgument("FFT size must be a power of two");
  impl_->fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  impl_->in.resize(size);
}
RealFft::~RealFft() = default;
RealFft::RealFft(RealFft&&) noexcept = default;
RealFft& RealFft::operator=(RealFft&&) noexcept = default;

void RealFft::forward(std::span<const double> input, std::vector<std::complex<double>>& out) {
  std::fill(impl_->in.begin(), impl_->in.end(), 0.0);
  std::copy_n(input.begin(), std::min<size_t>(input.size(), size_), impl_->in.begin());
  impl_->fft.fwd(out, impl_->in);
  out.resize(size_ / 2 + 1);
}

void RealFft::power(std::span<const double> input, std::vector<double>& out) {
  forward(input, impl_->out);
  out.resize(size_ / 2 + 1);
  for (int k = 0; k <= size_ / 2; ++k) out[k] = std::norm(impl_->out[k]);
}

void windowed_power(std::span<const float> x, long center, std::span<const double> window, RealFft& fft,
                    std::vector<double>& scratch, std::vector<double>& out) {
  const long n = static_cast<long>(window.size());
  const long start = center - n / 2;
  scratch.assign(n, 0.0);
  double wsum = 0.0;
  for (long i = 0; i < n; ++i) {
    wsum += window[i];
    const long t = start + i;
    if (t >= 0 && t < static_cast<long>(x.size())) scratch[i] = window[i] * x[t];
  }
  fft.power(scratch, out);
  const double scale = 1.0 / (wsum * wsum);
  for (auto& v : out) v *= scale;
}

PitchEstimate autocorrelation_pitch(std::span<const float> x, int sample_rate, double fmin, double fmax,
                                    double tolerance) {
  // Autocorrelation evaluated on a 4x finer lag grid (zero-padded spectrum) so
  // sharp peaks from high harmonics are not missed between integer lags.
  constexpr int kUp = 4;
  PitchEstimate est;
  const long n = static_cast<long>(x.size());
  const long max_lag = static_cast<long>(std::ceil(sample_rate / fmin)) + 1;
  const long min_lag = std::max(2L, static_cast<long>(std::floor(sample_rate / fmax)));
  if (n < 2 * max_lag) return est;

  int size = 1;
  while (size < 2 * n) size <<= 1;
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> buf(size, 0.0), spec;
  for (long i = 0; i < n; ++i) buf[i] = x[i];
  fft.fwd(spec, buf);
  const int cutoff = size / 2 - 1;
  std::vector<std::complex<double>> up(static_cast<size_t>(size) * kUp, 0.0);
  for (int k = 0; k <= cutoff; ++k) {
    up[k] = std::norm(spec[k]);
    if (k > 0) up[up.size() - k] = up[k];
  }
  std::vector<std::complex<double>> ac_c;
  fft.inv(ac_c, up);
  const double r0 = ac_c[0].real();
  if (r0 <= 1e-12) return est;

  auto norm_at = [&](long ulag) { return ac_c[ulag].real() / r0 * n / (n - double(ulag) / kUp); };
  const long ulo = min_lag * kUp, uhi = max_lag * kUp;
  double best = -1.0;
  for (long l = ulo; l <= uhi; ++l) best = std::max(best, norm_at(l));
  if (best <= 0.0) return est;
  long chosen = -1;
  for (long l = ulo; l <= uhi; ++l) {
    const double v = norm_at(l);
    if (v >= tolerance * best && v >= norm_at(l - 1) && v >= norm_at(l + 1)) {
      chosen = l;
      break;
    }
  }
  if (chosen < 0) return est;
  const double ym = norm_at(chosen - 1), y0 = norm_at(chosen), yp = norm_at(chosen + 1);
  const double denom = ym - 2.0 * y0 + yp;
  const double delta = std::abs(denom) > 1e-15 ? std::clamp(0.5 * (ym - yp) / denom, -0.5, 0.5) : 0.0;
  est.f0 = sample_rate * double(kUp) / (chosen + delta);
  est.strength = y0;
  est.voiced = y0 > 0.3;
  return est;
}

double rms(std::span<const float> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (float v : x) s += double(v) * v;
  return std::sqrt(s / x.size());
}

}  // namespace vallex::dsp
