#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "vallex/corpus.hpp"
#include "vallex/oracle.hpp"

namespace vallex {

/// Levenshtein distance with unit substitution, insertion and deletion costs.
int edit_distance(std::span<const int> a, std::span<const int> b);

/// edit_distance(hyp, ref) / |ref|; throws on an empty reference.
double wer(std::span<const int> hypothesis, std::span<const int> reference);

/// Corpus BLEU over token sequences with one reference each: clipped n-gram
/// precisions up to max_order, geometric mean, brevity penalty. A zero match
/// count is replaced by epsilon; orders for which the hypotheses contain no
/// n-grams at all are left out of the mean.
double bleu(std::span<const std::vector<int>> hypotheses, std::span<const std::vector<int>> references,
            int max_order = 4, double epsilon = 1e-9);

/// Normalization ranges of the similarity features (the corpus voice ranges).
struct SimilarityParams {
  double f0_lo = 90.0, f0_hi = 300.0;
  double tilt_lo = -0.9, tilt_hi = -0.1;
};

/// [1, normalized log f0, normalized tilt]; the normalized values map the
/// ranges above onto [-1, 1].
std::array<double, 3> speaker_features(double f0, double tilt, const SimilarityParams& params = {});

struct ScoredValue {
  double value = 0.0;
  bool flagged = false;  // an input could not be decoded with confidence
};

ScoredValue speaker_similarity(const OracleResult& a, const OracleResult& b, const SimilarityParams& params = {});
/// Cosine similarity of speaker_features extracted by the oracle decoder.
ScoredValue speaker_similarity_proxy(std::span<const float> a, std::span<const float> b, const VoiceModel& voice,
                                     const SimilarityParams& params = {});

/// Per-phoneme duration conformity to `language`'s duration law:
/// 1 - sum|d - e| / sum e over the decoded segments, clamped to [0, 1], where
/// e = base_duration(p) * scale(language).
ScoredValue accent_score(const OracleResult& decoded, std::string_view language, const Corpus& corpus);
ScoredValue accent_score(std::span<const float> waveform, std::string_view language, const Corpus& corpus);

/// Duration scale of a language (shared by every speaker of the corpus).
double language_duration_scale(const Corpus& corpus, std::string_view language);

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap of the mean at the given two-sided confidence.
Interval bootstrap_mean(std::span<const double> values, double confidence, int resamples, uint64_t seed);

}  // namespace vallex
