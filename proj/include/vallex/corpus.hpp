#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vallex/phonemizer.hpp"

namespace vallex {

struct CorpusSpec {
  int num_languages = 2;
  int num_speakers = 4;          // training speakers
  int utts_per_speaker = 8;      // per speaker and language
  int eval_speakers = 2;         // unseen speakers
  int eval_utts = 1;             // parallel sentences per unseen speaker (rendered in every language)
  int num_concepts = 16;
  int min_words = 2;
  int max_words = 3;
  int sample_rate = 8000;
};

/// A synthetic voice. `tilt` is the exponent of the harmonic rolloff: harmonic h
/// has amplitude proportional to h^tilt, i.e. 6.02*tilt dB per octave.
struct SpeakerProfile {
  std::string speaker_id;
  double f0 = 0.0;
  double tilt = 0.0;
  std::map<std::string, double, std::less<>> duration_scale;
  bool held_out = false;

  double scale_for(std::string_view language) const;
};

struct PhonemeVoicing {
  double base_duration = 0.0;  // seconds
  std::vector<int> formants;   // indices into VoiceModel::formant_centers
};

/// Acoustic definition shared by the generator and the oracle decoder.
struct VoiceModel {
  int sample_rate = 8000;
  double amplitude = 0.01;
  double crossfade = 0.005;  // seconds
  double formant_gain_db = 24.0;
  double formant_width_oct = 0.15;
  double max_harmonic_hz = 3900.0;
  std::vector<double> formant_centers;
  std::vector<PhonemeVoicing> phonemes;  // indexed by phoneme ID

  int num_phonemes() const { return static_cast<int>(phonemes.size()); }
  /// Timbre pattern of phoneme p at frequency f, in dB.
  double envelope_db(int phoneme, double freq) const;
  double base_duration(int phoneme) const;
};

struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  std::string language;
  std::string text;
  PhonemeSequence phonemes;
  std::optional<std::string> prev_utt;
  std::string wav_path;  // relative to the corpus directory
};

struct CorpusManifest {
  std::vector<Utterance> entries;
  int sample_rate = 0;
  uint64_t generation_seed = 0;

  const Utterance& at(std::string_view utt_id) const;
  const Utterance* find(std::string_view utt_id) const;
  void save(const std::filesystem::path& path, const PhonemeInventory& inventory) const;
  static CorpusManifest load(const std::filesystem::path& path, const PhonemeInventory& inventory);
};

/// Everything generate_corpus produces. Waveforms are held in memory after
/// generation and read lazily from `root` after load.
struct Corpus {
  std::vector<std::string> languages;
  PhonemeInventory inventory;
  std::map<std::string, Lexicon, std::less<>> lexicons;
  /// concept → word per language (index aligned with `languages`).
  std::vector<std::vector<std::string>> dictionary;
  std::vector<SpeakerProfile> speakers;
  VoiceModel voice;
  CorpusManifest manifest;
  std::filesystem::path root;

  const SpeakerProfile& speaker(std::string_view id) const;
  int language_index(std::string_view language) const;
  bool is_eval(const Utterance& u) const;
  std::vector<const Utterance*> split(bool eval) const;

  std::vector<float> waveform(const Utterance& u) const;
  /// Same sentence by the same speaker in another language (eval speakers only).
  const Utterance* parallel(const Utterance& u, std::string_view language) const;
  /// Word-level translation through the concept dictionary.
  std::string translate(std::string_view text, std::string_view from, std::string_view to) const;

  /// Per-phoneme rendered durations (seconds) of an utterance, by construction.
  std::vector<double> phoneme_durations(const PhonemeSequence& s, std::string_view language,
                                        const SpeakerProfile& speaker) const;

  void save(const std::filesystem::path& dir) const;
  static Corpus load(const std::filesystem::path& dir);

  std::unordered_map<std::string, std::vector<float>> cache;
};

Corpus generate_corpus(const CorpusSpec& spec, uint64_t seed);

std::vector<float> synth_waveform(const PhonemeSequence& phonemes, const SpeakerProfile& speaker,
                                  std::string_view language, const VoiceModel& voice);

/// Sample boundaries of the phoneme segments in a synth_waveform rendering
/// (size n+1, first 0, last = waveform length).
std::vector<long> segment_boundaries(const PhonemeSequence& phonemes, const SpeakerProfile& speaker,
                                     std::string_view language, const VoiceModel& voice);

/// The previous same-speaker sentence; throws when the utterance starts a chain
/// (callers skip such samples).
const Utterance& adjacent_pair(const Utterance& utt, const CorpusManifest& manifest);

}  // namespace vallex
