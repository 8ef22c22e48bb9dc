#include "vallex/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "vallex/common.hpp"
#include "vallex/random.hpp"

namespace vallex {

int edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double wer(std::span<const int> hypothesis, std::span<const int> reference) {
  if (reference.empty()) throw InvalidArgument("wer: empty reference");
  return static_cast<double>(edit_distance(hypothesis, reference)) / reference.size();
}

namespace {

std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& s, int n) {
  std::map<std::vector<int>, int> out;
  for (size_t i = 0; i + n <= s.size(); ++i) ++out[std::vector<int>(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

double bleu(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references, int max_order,
            double epsilon) {
  if (hypotheses.empty()) throw InvalidArgument("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw InvalidArgument("bleu: one reference per hypothesis required");
  if (max_order < 1) throw InvalidArgument("bleu: max_order must be positive");
  std::vector<double> matches(max_order, 0.0), totals(max_order, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (size_t k = 0; k < hypotheses.size(); ++k) {
    hyp_len += hypotheses[k].size();
    ref_len += references[k].size();
    for (int n = 1; n <= max_order; ++n) {
      const auto h = ngram_counts(hypotheses[k], n);
      const auto r = ngram_counts(references[k], n);
      for (const auto& [g, c] : h) {
        totals[n - 1] += c;
        auto it = r.find(g);
        if (it != r.end()) matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (ref_len == 0.0) throw InvalidArgument("bleu: empty references");
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  int orders = 0;
  for (int n = 0; n < max_order; ++n) {
    if (totals[n] == 0.0) continue;
    log_sum += std::log((matches[n] > 0.0 ? matches[n] : epsilon) / totals[n]);
    ++orders;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return bp * std::exp(log_sum / orders);
}

std::array<double, 3> speaker_features(double f0, double tilt, const SimilarityParams& p) {
  const double lf_mid = 0.5 * (std::log(p.f0_lo) + std::log(p.f0_hi));
  const double lf_half = 0.5 * (std::log(p.f0_hi) - std::log(p.f0_lo));
  const double t_mid = 0.5 * (p.tilt_lo + p.tilt_hi);
  const double t_half = 0.5 * (p.tilt_hi - p.tilt_lo);
  return {1.0, (std::log(std::max(f0, 1e-3)) - lf_mid) / lf_half, (tilt - t_mid) / t_half};
}

ScoredValue speaker_similarity(const OracleResult& a, const OracleResult& b, const SimilarityParams& params) {
  ScoredValue out;
  out.flagged = a.low_confidence || b.low_confidence || a.f0 <= 0.0 || b.f0 <= 0.0;
  const auto fa = speaker_features(a.f0, a.tilt, params);
  const auto fb = speaker_features(b.f0, b.tilt, params);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < 3; ++i) {
    dot += fa[i] * fb[i];
    na += fa[i] * fa[i];
    nb += fb[i] * fb[i];
  }
  out.value = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
  return out;
}

ScoredValue speaker_similarity_proxy(std::span<const float> a, std::span<const float> b, const VoiceModel& voice,
                                     const SimilarityParams& params) {
  return speaker_similarity(oracle_decode(a, voice), oracle_decode(b, voice), params);
}

double language_duration_scale(const Corpus& corpus, std::string_view language) {
  if (corpus.speakers.empty()) throw InvalidArgument("corpus has no speakers");
  return corpus.speakers.front().scale_for(language);
}

ScoredValue accent_score(const OracleResult& decoded, std::string_view language, const Corpus& corpus) {
  ScoredValue out;
  out.flagged = decoded.low_confidence;
  if (decoded.segments.empty()) {
    out.flagged = true;
    return out;
  }
  const double scale = language_duration_scale(corpus, language);
  const double sr = corpus.voice.sample_rate;
  double dev = 0.0, expected = 0.0;
  for (const auto& seg : decoded.segments) {
    const double d = (seg.end - seg.start) / sr;
    const double e = corpus.voice.base_duration(seg.phoneme) * scale;
    dev += std::abs(d - e);
    expected += e;
  }
  out.value = std::clamp(1.0 - dev / expected, 0.0, 1.0);
  return out;
}

ScoredValue accent_score(std::span<const float> waveform, std::string_view language, const Corpus& corpus) {
  return accent_score(oracle_decode(waveform, corpus.voice), language, corpus);
}

Interval bootstrap_mean(std::span<const double> values, double confidence, int resamples, uint64_t seed) {
  if (values.empty()) throw InvalidArgument("bootstrap_mean: no values");
  if (!(confidence > 0.0 && confidence < 1.0) || resamples < 1)
    throw InvalidArgument("bootstrap_mean: bad confidence or resample count");
  Interval out;
  for (double v : values) out.mean += v;
  out.mean /= values.size();
  Rng rng(seed);
  std::vector<double> means(resamples);
  const int64_t n = static_cast<int64_t>(values.size());
  for (int r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += values[rng.below(n)];
    means[r] = s / n;
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - confidence) / 2.0;
  auto quantile = [&](double q) {
    const double pos = q * (resamples - 1);
    const int i = static_cast<int>(std::floor(pos));
    const int j = std::min(i + 1, resamples - 1);
    return means[i] + (pos - i) * (means[j] - means[i]);
  };
  out.lo = quantile(alpha);
  out.hi = quantile(1.0 - alpha);
  return out;
}

}  // namespace vallex
