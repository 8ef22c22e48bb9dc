#include "vallex/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numbers>

#include "vallex/common.hpp"
#include "vallex/dsp.hpp"
#include "vallex/random.hpp"

namespace vallex {

namespace {

constexpr double kEnergyFloor = 1e-10;
constexpr double kPitchLo = 75.0, kPitchHi = 450.0;
constexpr double kEnvLo = 500.0, kEnvHi = 3750.0;
constexpr double kMaxHarmonicHz = 3900.0;
constexpr double kTableStep = 2.0;  // Hz

int pow2_at_least(double n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

struct FilterBank {
  int window = 0;
  std::vector<double> win;
  std::vector<double> centers;
  std::vector<std::vector<std::pair<int, double>>> weights;  // per filter: (bin, weight)
  std::vector<std::vector<double>> response;                 // per filter, on a kTableStep grid

  double respond(int j, double freq) const {
    const double pos = freq / kTableStep;
    const int k = static_cast<int>(pos);
    const auto& r = response[j];
    if (k < 0 || k + 1 >= static_cast<int>(r.size())) return 0.0;
    const double t = pos - k;
    return r[k] * (1.0 - t) + r[k + 1] * t;
  }

  void apply(const std::vector<double>& power, float* out) const {
    for (size_t j = 0; j < weights.size(); ++j) {
      double e = 0.0;
      for (const auto& [bin, w] : weights[j]) e += w * power[bin];
      out[j] = static_cast<float>(10.0 * std::log10(e + kEnergyFloor));
    }
  }
};

// Triangular filters over a warped frequency axis; each triangle peaks at its
// center and reaches zero at the neighboring centers (extrapolated at the ends).
FilterBank make_bank(int window, int sample_rate, const std::vector<double>& warped_centers,
                     double (*warp)(double)) {
  FilterBank fb;
  fb.window = window;
  fb.win = dsp::hann(window);
  const int n = static_cast<int>(warped_centers.size());
  const double step = n > 1 ? warped_centers[1] - warped_centers[0] : 1.0;
  const double bin_hz = double(sample_rate) / window;
  fb.weights.resize(n);
  for (int j = 0; j < n; ++j) {
    for (int k = 0; k <= window / 2; ++k) {
      const double f = k * bin_hz;
      if (f <= 0.0) continue;
      const double d = std::abs(warp(f) - warped_centers[j]) / step;
      if (d < 1.0) fb.weights[j].push_back({k, 1.0 - d});
    }
  }
  // Response to a unit-amplitude sinusoid, averaged over two quadrature phases.
  dsp::RealFft fft(window);
  std::vector<double> sig(window), scratch, power;
  const int steps = static_cast<int>(sample_rate / 2 / kTableStep) + 2;
  fb.response.assign(n, std::vector<double>(steps, 0.0));
  std::vector<float> tone(window);
  for (int m = 0; m < steps; ++m) {
    const double f = m * kTableStep;
    for (int phase = 0; phase < 2; ++phase) {
      for (int t = 0; t < window; ++t)
        tone[t] = static_cast<float>(std::cos(2.0 * std::numbers::pi * f * (t - window / 2) / sample_rate +
                                              phase * std::numbers::pi / 2));
      dsp::windowed_power(tone, window / 2, fb.win, fft, scratch, power);
      for (int j = 0; j < n; ++j) {
        double e = 0.0;
        for (const auto& [bin, w] : fb.weights[j]) e += w * power[bin];
        fb.response[j][m] += 0.5 * e;
      }
    }
  }
  return fb;
}

double warp_log(double f) { return std::log(f); }
double warp_mel(double f) { return std::log1p(f / 700.0); }

class SpectralCodec {
 public:
  explicit SpectralCodec(const CodecParams& p) : params_(p) {
    if (p.dims < 4) throw InvalidArgument("codec needs at least 4 feature dimensions");
    if (p.hop < 1 || p.sample_rate < 8000) throw InvalidArgument("invalid codec hop or sample rate");
    pitch_dims_ = static_cast<int>(std::lround(0.4 * p.dims));
    env_dims_ = p.dims - pitch_dims_;
    std::vector<double> pc, ec;
    for (int j = 0; j < pitch_dims_; ++j)
      pc.push_back(std::log(kPitchLo) + (std::log(kPitchHi) - std::log(kPitchLo)) * j / (pitch_dims_ - 1));
    for (int j = 0; j < env_dims_; ++j)
      ec.push_back(warp_mel(kEnvLo) + (warp_mel(kEnvHi) - warp_mel(kEnvLo)) * j / (env_dims_ - 1));
    pitch_ = make_bank(pow2_at_least(0.064 * p.sample_rate), p.sample_rate, pc, warp_log);
    env_ = make_bank(pow2_at_least(0.032 * p.sample_rate), p.sample_rate, ec, warp_mel);
    for (double c : pc) pitch_.centers.push_back(std::exp(c));
    for (double c : ec) env_.centers.push_back(700.0 * std::expm1(c));
    fmax_ = std::min(kMaxHarmonicHz, 0.4875 * p.sample_rate);

    // Pitch templates: a comb with h^-0.5 rolloff seen through the pitch bank.
    for (double f = 70.0; f <= 460.0; f *= 1.002) {
      std::vector<double> t(pitch_dims_, 0.0);
      for (int h = 1; h * f < 2.5 * kPitchHi; ++h)
        for (int j = 0; j < pitch_dims_; ++j) t[j] += pitch_.respond(j, h * f) / h;
      for (auto& v : t) v = 10.0 * std::log10(v + kEnergyFloor);
      prepare_pattern(t);
      templates_.push_back(std::move(t));
      template_f0_.push_back(f);
    }
  }

  FrameFeatures analyze(std::span<const float> x) const {
    if (x.empty()) throw InvalidArgument("analyze: empty waveform");
    const int n = static_cast<int>((x.size() + params_.hop - 1) / params_.hop);
    FrameFeatures out;
    out.hop = params_.hop;
    out.sample_rate = params_.sample_rate;
    out.frames.resize(n, params_.dims);
    dsp::RealFft fp(pitch_.window), fe(env_.window);
    std::vector<double> scratch, power;
    for (int i = 0; i < n; ++i) {
      const long center = long(i) * params_.hop + params_.hop / 2;
      dsp::windowed_power(x, center, pitch_.win, fp, scratch, power);
      pitch_.apply(power, out.frames.row(i).data());
      dsp::windowed_power(x, center, env_.win, fe, scratch, power);
      env_.apply(power, out.frames.row(i).data() + pitch_dims_);
    }
    return out;
  }

  std::vector<double> f0_track(const FrameFeatures& f) const {
    const int n = f.num_frames();
    std::vector<double> raw(n, 0.0);
    std::vector<char> voiced(n, 0);
    std::vector<double> v(pitch_dims_);
    for (int i = 0; i < n; ++i) {
      double peak = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < pitch_dims_; ++j) {
        v[j] = f.frames(i, j);
        peak = std::max(peak, v[j]);
      }
      if (peak < kFeatureFloorDb + 20.0) continue;
      prepare_pattern(v);
      size_t best = 0;
      double best_cost = std::numeric_limits<double>::infinity();
      for (size_t c = 0; c < templates_.size(); ++c) {
        double cost = 0.0;
        for (int j = 0; j < pitch_dims_; ++j) {
          const double d = v[j] - templates_[c][j];
          cost += d * d;
        }
        if (cost < best_cost) {
          best_cost = cost;
          best = c;
        }
      }
      raw[i] = std::log(template_f0_[best]);
      voiced[i] = 1;
    }
    // Fill unvoiced frames from the nearest voiced neighbor, then median-smooth.
    int last = -1;
    for (int i = 0; i < n; ++i) {
      if (voiced[i]) {
        if (last < 0)
          for (int k = 0; k < i; ++k) raw[k] = raw[i];
        else
          for (int k = last + 1; k < i; ++k) raw[k] = (k - last <= i - k) ? raw[last] : raw[i];
        last = i;
      }
    }
    if (last < 0) return std::vector<double>(n, 100.0);
    for (int k = last + 1; k < n; ++k) raw[k] = raw[last];
    std::vector<double> out(n), win;
    for (int i = 0; i < n; ++i) {
      win.assign(raw.begin() + std::max(0, i - 3), raw.begin() + std::min(n, i + 4));
      std::nth_element(win.begin(), win.begin() + win.size() / 2, win.end());
      out[i] = std::exp(win[win.size() / 2]);
    }
    return out;
  }

  std::vector<float> synthesize(const FrameFeatures& f) const {
    if (f.dims() != params_.dims) throw InvalidArgument("synthesize: feature dimension mismatch");
    const int n = f.num_frames();
    const int hop = params_.hop;
    std::vector<float> out(static_cast<size_t>(n) * hop, 0.0f);
    if (n == 0) return out;
    const auto f0 = f0_track(f);
    const int hmax = static_cast<int>(fmax_ / 70.0) + 1;
    std::vector<double> amp(static_cast<size_t>(n) * hmax, 0.0);
    std::vector<double> energy(params_.dims), a2, pred(params_.dims);
    std::vector<double> resp;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < params_.dims; ++j)
        energy[j] = std::max(0.0, std::pow(10.0, f.frames(i, j) / 10.0) - kEnergyFloor);
      const int hcount = std::min(hmax, static_cast<int>(fmax_ / f0[i]));
      resp.assign(static_cast<size_t>(hcount) * params_.dims, 0.0);
      for (int h = 0; h < hcount; ++h) {
        const double fh = (h + 1) * f0[i];
        for (int j = 0; j < pitch_dims_; ++j) resp[h * params_.dims + j] = pitch_.respond(j, fh);
        for (int j = 0; j < env_dims_; ++j) resp[h * params_.dims + pitch_dims_ + j] = env_.respond(j, fh);
      }
      // Harmonic powers reproducing the filter energies: Richardson-Lucy iterations
      // from a matched-filter start.
      a2.assign(hcount, 0.0);
      for (int h = 0; h < hcount; ++h) {
        double num = 0.0, den = 0.0;
        for (int j = 0; j < params_.dims; ++j) {
          num += resp[h * params_.dims + j] * energy[j];
          den += resp[h * params_.dims + j] * resp[h * params_.dims + j];
        }
        a2[h] = den > 0.0 ? num / den : 0.0;
      }
      for (int it = 0; it < 40; ++it) {
        std::fill(pred.begin(), pred.end(), 0.0);
        for (int h = 0; h < hcount; ++h)
          for (int j = 0; j < params_.dims; ++j) pred[j] += resp[h * params_.dims + j] * a2[h];
        for (int h = 0; h < hcount; ++h) {
          double num = 0.0, den = 0.0;
          for (int j = 0; j < params_.dims; ++j) {
            const double r = resp[h * params_.dims + j];
            if (r <= 0.0) continue;
            num += r * energy[j] / (pred[j] + 1e-30);
            den += r;
          }
          if (den > 0.0) a2[h] *= num / den;
        }
      }
      for (int h = 0; h < hcount; ++h) amp[static_cast<size_t>(i) * hmax + h] = std::sqrt(a2[h]);
    }

    std::vector<double> phase(hmax, 0.0);
    for (int h = 0; h < hmax; ++h) {
      Rng r(derive_seed(0xC0DEC, h));
      phase[h] = 2.0 * std::numbers::pi * r.uniform();
    }
    const double two_pi_over_sr = 2.0 * std::numbers::pi / params_.sample_rate;
    for (long t = 0; t < static_cast<long>(out.size()); ++t) {
      const double u = (t - hop / 2.0) / hop;
      int i0 = static_cast<int>(std::floor(u));
      double w = u - i0;
      if (i0 < 0) {
        i0 = 0;
        w = 0.0;
      }
      if (i0 >= n - 1) {
        i0 = n - 1;
        w = 0.0;
      }
      const int i1 = std::min(i0 + 1, n - 1);
      const double f0t = f0[i0] * (1.0 - w) + f0[i1] * w;
      const double* a0 = &amp[static_cast<size_t>(i0) * hmax];
      const double* a1 = &amp[static_cast<size_t>(i1) * hmax];
      double s = 0.0;
      for (int h = 0; h < hmax; ++h) {
        phase[h] += two_pi_over_sr * (h + 1) * f0t;
        const double a = a0[h] * (1.0 - w) + a1[h] * w;
        if (a > 0.0) s += a * std::sin(phase[h]);
      }
      out[t] = static_cast<float>(s);
      if ((t & 1023) == 0)
        for (auto& p : phase) p = std::fmod(p, 2.0 * std::numbers::pi);
    }
    return out;
  }

 private:
  // Mean-removed pattern with everything more than 50 dB below the peak clamped.
  static void prepare_pattern(std::vector<double>& v) {
    const double peak = *std::max_element(v.begin(), v.end());
    double mean = 0.0;
    for (auto& x : v) {
      x = std::max(x, peak - 50.0);
      mean += x;
    }
    mean /= v.size();
    for (auto& x : v) x -= mean;
  }

  CodecParams params_;
  int pitch_dims_ = 0, env_dims_ = 0;
  double fmax_ = 0.0;
  FilterBank pitch_, env_;
  std::vector<std::vector<double>> templates_;
  std::vector<double> template_f0_;
};

const SpectralCodec& codec_for(const CodecParams& p) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, std::unique_ptr<SpectralCodec>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{p.sample_rate, p.hop, p.dims}];
  if (!slot) slot = std::make_unique<SpectralCodec>(p);
  return *slot;
}

// Squared distances from every row of x to every row of c, via the expansion
// |x|^2 - 2 x.c + |c|^2 (used only inside k-means).
MatrixF pairwise_sq(const MatrixF& x, const MatrixF& c) {
  MatrixF d = -2.0f * (x * c.transpose());
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d;
}

int nearest_exact(const double* r, const MatrixF& book) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const int dims = static_cast<int>(book.cols());
  for (int k = 0; k < book.rows(); ++k) {
    const float* c = book.row(k).data();
    double d = 0.0;
    for (int j = 0; j < dims; ++j) {
      const double e = r[j] - double(c[j]);
      d += e * e;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

MatrixF kmeans(const MatrixF& x, int k, int iterations, Rng& rng, int* iterations_run, int* splits) {
  const int n = static_cast<int>(x.rows());
  const int dims = static_cast<int>(x.cols());
  const Eigen::RowVectorXf mean = x.colwise().mean();
  const double scale = std::sqrt(std::max<double>((x.rowwise() - mean).squaredNorm() / (double(n) * dims), 0.0));
  const float eps = static_cast<float>(scale > 0.0 ? 1e-4 * scale : 1e-6);

  // k-means++ seeding.
  MatrixF c(k, dims);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  int chosen = static_cast<int>(rng.below(n));
  int filled = 0;
  while (filled < k) {
    c.row(filled++) = x.row(chosen);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], double((x.row(i) - x.row(chosen)).squaredNorm()));
      total += d2[i];
    }
    if (filled == k) break;
    if (total <= 0.0) {
      // Fewer distinct points than clusters: remaining centers are perturbed copies.
      const int base = filled;
      while (filled < k) {
        c.row(filled) = c.row(filled % base);
        c(filled, (filled / base) % dims) += eps * (1 + filled / (base * dims));
        ++filled;
      }
      break;
    }
    double target = rng.uniform() * total;
    chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      target -= d2[i];
      if (target < 0.0 && d2[i] > 0.0) {
        chosen = i;
        break;
      }
    }
  }

  std::vector<int> assign(n, -1);
  int it = 0;
  for (; it < iterations; ++it) {
    const MatrixF d = pairwise_sq(x, c);
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      Eigen::Index best;
      d.row(i).minCoeff(&best);
      if (assign[i] != static_cast<int>(best)) {
        assign[i] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed && it > 0) break;
    MatrixD sum = MatrixD::Zero(k, dims);
    std::vector<int> count(k, 0);
    for (int i = 0; i < n; ++i) {
      sum.row(assign[i]) += x.row(i).cast<double>();
      ++count[assign[i]];
    }
    for (int j = 0; j < k; ++j)
      if (count[j] > 0) c.row(j) = (sum.row(j) / count[j]).cast<float>();
    for (int j = 0; j < k; ++j) {
      if (count[j] > 0) continue;
      // Split the cluster with the largest within-cluster scatter.
      std::vector<double> scatter(k, 0.0);
      for (int i = 0; i < n; ++i) scatter[assign[i]] += (x.row(i) - c.row(assign[i])).squaredNorm();
      const int big = static_cast<int>(std::max_element(scatter.begin(), scatter.end()) - scatter.begin());
      Eigen::RowVectorXf dir(dims);
      for (int q = 0; q < dims; ++q) dir[q] = static_cast<float>(rng.normal());
      dir /= std::max(1e-12f, dir.norm());
      c.row(j) = c.row(big) + eps * dir;
      c.row(big) -= eps * dir;
      count[j] = -1;  // not reused as a split source in this pass
      if (splits) ++*splits;
    }
  }
  if (iterations_run) *iterations_run = it;
  return c;
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated RVQ file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

FrameFeatures analyze(std::span<const float> waveform, const CodecParams& params) {
  return codec_for(params).analyze(waveform);
}

std::vector<float> synthesize(const FrameFeatures& features, const CodecParams& params) {
  return codec_for(params).synthesize(features);
}

std::vector<double> estimate_f0_track(const FrameFeatures& features, const CodecParams& params) {
  return codec_for(params).f0_track(features);
}

std::vector<int> AcousticTokenGrid::layer(int l) const {
  if (l < 0 || l >= layers) throw InvalidArgument("layer index out of range");
  std::vector<int> out(frames);
  for (int i = 0; i < frames; ++i) out[i] = at(i, l);
  return out;
}

void AcousticTokenGrid::set_layer(int l, std::span<const int> values) {
  if (l < 0 || l >= layers) throw InvalidArgument("layer index out of range");
  if (static_cast<int>(values.size()) != frames) throw InvalidArgument("frame count mismatch");
  for (int i = 0; i < frames; ++i) at(i, l) = values[i];
}

AcousticTokenGrid AcousticTokenGrid::prefix_layers(int l) const {
  if (l < 0 || l > layers) throw InvalidArgument("layer count out of range");
  AcousticTokenGrid g(frames, l);
  for (int i = 0; i < frames; ++i)
    for (int k = 0; k < l; ++k) g.at(i, k) = at(i, k);
  return g;
}

RvqModel train_rvq(const MatrixF& frames, int layers, int codebook_size, int iterations, uint64_t seed,
                   const CodecParams& params, RvqTrainStats* stats) {
  if (layers < 1) throw InvalidArgument("RVQ needs at least one layer");
  if (codebook_size < 2) throw InvalidArgument("codebook size must be at least 2");
  if (frames.cols() != params.dims) throw InvalidArgument("training frames do not match the feature dimension");
  if (frames.rows() < 10L * codebook_size)
    throw InvalidArgument("RVQ training set too small: need at least 10*K frames");
  if (!frames.allFinite()) throw InvalidArgument("RVQ training frames contain non-finite values");

  Rng rng(seed);
  RvqModel model;
  model.params = params;
  MatrixF residual = frames;
  MatrixD exact = frames.cast<double>();
  RvqTrainStats local;
  for (int l = 0; l < layers; ++l) {
    int its = 0;
    MatrixF book = kmeans(residual, codebook_size, iterations, rng, &its, &local.empty_cluster_splits);
    double norm_sum = 0.0;
    for (int i = 0; i < exact.rows(); ++i) {
      const int k = nearest_exact(exact.row(i).data(), book);
      exact.row(i) -= book.row(k).cast<double>();
      norm_sum += exact.row(i).norm();
    }
    residual = exact.cast<float>();
    local.mean_residual_norm.push_back(norm_sum / exact.rows());
    local.iterations_run.push_back(its);
    model.codebooks.push_back({std::move(book), l + 1});
  }
  if (stats) *stats = std::move(local);
  return model;
}

AcousticTokenGrid rvq_encode(const FrameFeatures& features, const RvqModel& model) {
  return rvq_encode(features, model, nullptr);
}

AcousticTokenGrid rvq_encode(const FrameFeatures& features, const RvqModel& model, MatrixD* residual) {
  if (features.dims() != model.dims()) throw InvalidArgument("rvq_encode: feature dimension mismatch");
  const int n = features.num_frames();
  AcousticTokenGrid grid(n, model.layers());
  MatrixD r = features.frames.cast<double>();
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < model.layers(); ++l) {
      const auto& book = model.codebooks[l].vectors;
      const int k = nearest_exact(r.row(i).data(), book);
      grid.at(i, l) = k;
      r.row(i) -= book.row(k).cast<double>();
    }
  }
  if (residual) *residual = std::move(r);
  return grid;
}

FrameFeatures rvq_decode(const AcousticTokenGrid& grid, const RvqModel& model, int layers) {
  if (layers < 0) layers = model.layers();
  if (layers > grid.layers || layers > model.layers()) throw InvalidArgument("rvq_decode: not enough layers");
  MatrixD sum = MatrixD::Zero(grid.frames, model.dims());
  for (int i = 0; i < grid.frames; ++i) {
    for (int l = 0; l < layers; ++l) {
      const int k = grid.at(i, l);
      const auto& book = model.codebooks[l].vectors;
      if (k < 0 || k >= book.rows()) throw InvalidArgument("rvq_decode: token index out of range");
      sum.row(i) += book.row(k).cast<double>();
    }
  }
  FrameFeatures f;
  f.frames = sum.cast<float>();
  f.hop = model.params.hop;
  f.sample_rate = model.params.sample_rate;
  return f;
}

void RvqModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write("RVQ1", 4);
  write_u32(out, layers());
  write_u32(out, codebook_size());
  write_u32(out, params.dims);
  write_u32(out, params.hop);
  write_u32(out, params.sample_rate);
  for (const auto& cb : codebooks) {
    for (int k = 0; k < cb.vectors.rows(); ++k)
      for (int j = 0; j < cb.vectors.cols(); ++j) {
        uint32_t bits;
        const float v = cb.vectors(k, j);
        std::memcpy(&bits, &v, 4);
        write_u32(out, bits);
      }
  }
  if (!out) throw Error("write failed: " + path.string());
}

RvqModel RvqModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "RVQ1", 4) != 0) throw FormatError("not an RVQ1 file: " + path.string());
  RvqModel m;
  const uint32_t layers = read_u32(in), k = read_u32(in);
  m.params.dims = static_cast<int>(read_u32(in));
  m.params.hop = static_cast<int>(read_u32(in));
  m.params.sample_rate = static_cast<int>(read_u32(in));
  if (layers == 0 || k < 2 || m.params.dims == 0 || layers > 64 || k > (1u << 20) || m.params.dims > 4096)
    throw FormatError("implausible RVQ header in " + path.string());
  for (uint32_t l = 0; l < layers; ++l) {
    Codebook cb;
    cb.layer_index = static_cast<int>(l + 1);
    cb.vectors.resize(k, m.params.dims);
    for (uint32_t r = 0; r < k; ++r)
      for (int j = 0; j < m.params.dims; ++j) {
        const uint32_t bits = read_u32(in);
        float v;
        std::memcpy(&v, &bits, 4);
        cb.vectors(r, j) = v;
      }
    m.codebooks.push_back(std::move(cb));
  }
  return m;
}

}  // namespace vallex
