#pragma once

#include <complex>
#include <memory>
#include <span>
#include <vector>

namespace vallex::dsp {

std::vector<double> hann(int n);

/// Real-input FFT of a fixed power-of-two size.
class RealFft {
 public:
  explicit RealFft(int size);
  ~RealFft();
  RealFft(RealFft&&) noexcept;
  RealFft& operator=(RealFft&&) noexcept;

  int size() const { return size_; }
  /// |X_k|^2 for k = 0..size/2.
  void power(std::span<const double> input, std::vector<double>& out);
  void forward(std::span<const double> input, std::vector<std::complex<double>>& out);

 private:
  struct Impl;
  int size_;
  std::unique_ptr<Impl> impl_;
};

/// Power spectrum of x windowed around `center` (window centered on that sample,
/// zero padded outside x), FFT length fft_size >= window length. Scaled so a
/// sinusoid of amplitude a at a bin center reads a^2/4 at that bin.
void windowed_power(std::span<const float> x, long center, std::span<const double> window, RealFft& fft,
                    std::vector<double>& scratch, std::vector<double>& out);

struct PitchEstimate {
  double f0 = 0.0;
  double strength = 0.0;  // normalized autocorrelation at the chosen lag
  bool voiced = false;
};

/// Autocorrelation pitch estimate over the whole signal: the smallest lag whose
/// normalized autocorrelation is within `tolerance` of the best peak in range,
/// refined by parabolic interpolation.
PitchEstimate autocorrelation_pitch(std::span<const float> x, int sample_rate, double fmin, double fmax,
                                    double tolerance = 0.9);

double rms(std::span<const float> x);

}  // namespace vallex::dsp
