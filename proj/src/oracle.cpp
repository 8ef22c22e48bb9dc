#include "vallex/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vallex/dsp.hpp"

namespace vallex {

std::vector<double> OracleResult::durations(int sample_rate) const {
  std::vector<double> d;
  for (const auto& s : segments) d.push_back(double(s.end - s.start) / sample_rate);
  return d;
}

namespace {

struct Fit {
  double sse = 0.0;
  double slope = 0.0;
};

// Least-squares fit of z = c + s*x; returns residual sum of squares and s.
Fit line_fit(const std::vector<double>& x, const std::vector<double>& z) {
  const size_t n = x.size();
  double mx = 0, mz = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    mz += z[i];
  }
  mx /= n;
  mz /= n;
  double sxx = 0, sxz = 0, szz = 0;
  for (size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dz = z[i] - mz;
    sxx += dx * dx;
    sxz += dx * dz;
    szz += dz * dz;
  }
  Fit f;
  f.slope = sxx > 0 ? sxz / sxx : 0.0;
  f.sse = std::max(0.0, szz - f.slope * sxz);
  return f;
}

struct Run {
  int label;
  int first, last;  // inclusive frame range
};

std::vector<Run> runs_of(const std::vector<int>& labels) {
  std::vector<Run> runs;
  for (int j = 0; j < static_cast<int>(labels.size()); ++j) {
    if (!runs.empty() && runs.back().label == labels[j]) runs.back().last = j;
    else runs.push_back({labels[j], j, j});
  }
  return runs;
}

}  // namespace

OracleResult oracle_decode(std::span<const float> wav, const VoiceModel& voice, const OracleOptions& opt) {
  OracleResult result;
  const int sr = voice.sample_rate;
  const int num_ph = voice.num_phonemes();
  const long total = static_cast<long>(wav.size());
  result.low_confidence = true;
  if (total < opt.window || num_ph == 0) return result;

  const auto pitch = dsp::autocorrelation_pitch(wav, sr, opt.fmin, opt.fmax);
  if (!pitch.voiced) return result;
  const double f0 = pitch.f0;
  result.f0 = f0;

  const int frames = static_cast<int>((total + opt.hop - 1) / opt.hop);
  const double fmax_h = std::min(voice.max_harmonic_hz - 100.0, 0.45 * sr);
  const int harmonics = std::max(2, static_cast<int>(std::floor(fmax_h / f0)));
  const double bin_hz = double(sr) / opt.fft_size;

  std::vector<double> x(harmonics);
  for (int h = 1; h <= harmonics; ++h) x[h - 1] = 20.0 * std::log10(double(h));
  std::vector<std::vector<double>> templ(num_ph, std::vector<double>(harmonics));
  for (int p = 0; p < num_ph; ++p)
    for (int h = 1; h <= harmonics; ++h) templ[p][h - 1] = voice.envelope_db(p, h * f0);

  dsp::RealFft fft(opt.fft_size);
  const auto window = dsp::hann(opt.window);
  std::vector<double> scratch, power, y(harmonics), z(harmonics);
  std::vector<double> energy(frames);
  // Per frame and phoneme: residual SSE and fitted slope.
  std::vector<std::vector<Fit>> fits(frames, std::vector<Fit>(num_ph));
  for (int j = 0; j < frames; ++j) {
    const long center = long(j) * opt.hop + opt.hop / 2;
    dsp::windowed_power(wav, center, window, fft, scratch, power);
    double e = 0.0;
    for (double v : power) e += v;
    energy[j] = e;
    for (int h = 1; h <= harmonics; ++h) {
      const double fh = h * f0;
      const double radius = std::min(0.3 * f0, std::max(20.0, 0.03 * fh));
      const int lo = std::max(0, static_cast<int>(std::floor((fh - radius) / bin_hz)));
      const int hi = std::min(opt.fft_size / 2, static_cast<int>(std::ceil((fh + radius) / bin_hz)));
      double peak = 0.0;
      for (int k = lo; k <= hi; ++k) peak = std::max(peak, power[k]);
      y[h - 1] = 10.0 * std::log10(4.0 * peak + 1e-20);
    }
    for (int p = 0; p < num_ph; ++p) {
      for (int h = 0; h < harmonics; ++h) z[h] = y[h] - templ[p][h];
      fits[j][p] = line_fit(x, z);
    }
  }

  const double max_energy = *std::max_element(energy.begin(), energy.end());
  if (max_energy <= 1e-14) return result;
  const double silence = max_energy * std::pow(10.0, opt.silence_db / 10.0);
  std::vector<int> labels(frames);
  for (int j = 0; j < frames; ++j) {
    if (energy[j] < silence) {
      labels[j] = -1;
      continue;
    }
    int best = 0;
    for (int p = 1; p < num_ph; ++p)
      if (fits[j][p].sse < fits[j][best].sse) best = p;
    labels[j] = best;
  }

  // Mode filter over 5 frames.
  {
    std::vector<int> filtered(labels);
    for (int j = 0; j < frames; ++j) {
      int best_label = labels[j], best_count = 0;
      for (int k = std::max(0, j - 2); k <= std::min(frames - 1, j + 2); ++k) {
        int count = 0;
        for (int m = std::max(0, j - 2); m <= std::min(frames - 1, j + 2); ++m) count += labels[m] == labels[k];
        if (count > best_count || (count == best_count && labels[k] == labels[j])) {
          best_count = count;
          best_label = labels[k];
        }
      }
      filtered[j] = best_label;
    }
    labels.swap(filtered);
  }

  auto run_cost = [&](int label, int first, int last) {
    double c = 0.0;
    for (int j = first; j <= last; ++j) c += label < 0 ? 0.0 : fits[j][label].sse;
    return c;
  };

  // Merge runs shorter than the minimum segment into the neighbor that fits them best.
  const int min_frames = std::max(1, static_cast<int>(std::lround(opt.min_segment * sr / opt.hop)));
  while (true) {
    auto runs = runs_of(labels);
    int shortest = -1;
    for (int r = 0; r < static_cast<int>(runs.size()); ++r) {
      const int len = runs[r].last - runs[r].first + 1;
      if (len < min_frames && (shortest < 0 || len < runs[shortest].last - runs[shortest].first + 1)) shortest = r;
    }
    if (shortest < 0 || runs.size() == 1) break;
    const Run& r = runs[shortest];
    int target;
    if (shortest == 0) target = runs[1].label;
    else if (shortest + 1 == static_cast<int>(runs.size())) target = runs[shortest - 1].label;
    else {
      const int a = runs[shortest - 1].label, b = runs[shortest + 1].label;
      if (a < 0) target = b;
      else if (b < 0) target = a;
      else target = run_cost(a, r.first, r.last) <= run_cost(b, r.first, r.last) ? a : b;
    }
    for (int j = r.first; j <= r.last; ++j) labels[j] = target;
  }

  // Rescore each voiced run on its interior frames, away from transitions.
  const int margin = opt.window / (2 * opt.hop);
  auto runs = runs_of(labels);
  for (auto& r : runs) {
    if (r.label < 0) continue;
    int first = r.first, last = r.last;
    if (last - first + 1 > 2 * margin + 2) {
      first += margin;
      last -= margin;
    }
    int best = 0;
    double best_cost = std::numeric_limits<double>::infinity();
    for (int p = 0; p < num_ph; ++p) {
      const double c = run_cost(p, first, last);
      if (c < best_cost) {
        best_cost = c;
        best = p;
      }
    }
    r.label = best;
  }
  std::vector<Run> merged;
  for (const auto& r : runs) {
    if (!merged.empty() && merged.back().label == r.label) merged.back().last = r.last;
    else merged.push_back(r);
  }

  std::vector<double> slopes;
  bool weak = false;
  for (size_t i = 0; i < merged.size(); ++i) {
    const auto& r = merged[i];
    if (r.label < 0) continue;
    OracleSegment seg;
    seg.phoneme = r.label;
    seg.start = (i == 0) ? 0 : long(r.first) * opt.hop + opt.hop / 2 - opt.hop / 2;
    seg.end = (i + 1 == merged.size()) ? total : long(r.last + 1) * opt.hop;
    int first = r.first, last = r.last;
    if (last - first + 1 > 2 * margin + 2) {
      first += margin;
      last -= margin;
    }
    seg.residual_db = std::sqrt(run_cost(r.label, first, last) / ((last - first + 1) * double(harmonics)));
    if (seg.residual_db > opt.max_residual_db) weak = true;
    for (int j = first; j <= last; ++j) slopes.push_back(fits[j][r.label].slope);
    result.segments.push_back(seg);
    result.phonemes.ids.push_back(r.label);
  }
  if (result.segments.empty()) return result;
  std::nth_element(slopes.begin(), slopes.begin() + slopes.size() / 2, slopes.end());
  result.tilt = slopes[slopes.size() / 2];
  result.low_confidence = weak;
  return result;
}

}  // namespace vallex
