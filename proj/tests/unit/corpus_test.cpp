#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "vallex/common.hpp"
#include "vallex/corpus.hpp"
#include "vallex/dsp.hpp"
#include "vallex/oracle.hpp"
#include "vallex/wav.hpp"

using namespace vallex;
namespace fs = std::filesystem;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.num_languages = 2;
  s.num_speakers = 4;
  s.utts_per_speaker = 8;
  s.eval_speakers = 2;
  s.eval_utts = 1;
  return s;
}

const Corpus& small_corpus() {
  static const Corpus c = generate_corpus(small_spec(), 7);
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("corpus split sizes") {
  const Corpus& c = small_corpus();
  CHECK(c.split(false).size() == 64);
  CHECK(c.split(true).size() == 4);
  std::set<std::string> eval_speakers;
  for (const auto* u : c.split(true)) eval_speakers.insert(u->speaker_id);
  CHECK(eval_speakers.size() == 2);
  CHECK(c.languages.size() == 2);
}

TEST_CASE("corpus rejects a single language and other degenerate specs") {
  CorpusSpec s = small_spec();
  s.num_languages = 1;
  CHECK_THROWS_AS(generate_corpus(s, 1), InvalidArgument);
  s = small_spec();
  s.num_speakers = 3;
  CHECK_THROWS_AS(generate_corpus(s, 1), InvalidArgument);
  s = small_spec();
  s.utts_per_speaker = 1;
  CHECK_THROWS_AS(generate_corpus(s, 1), InvalidArgument);
}

TEST_CASE("corpus generation is deterministic and saved files are byte-identical") {
  const fs::path a = fs::temp_directory_path() / "vallex_corpus_a";
  const fs::path b = fs::temp_directory_path() / "vallex_corpus_b";
  fs::remove_all(a);
  fs::remove_all(b);
  generate_corpus(small_spec(), 7).save(a);
  generate_corpus(small_spec(), 7).save(b);
  CHECK(read_file(a / "manifest.tsv") == read_file(b / "manifest.tsv"));
  const Corpus& c = small_corpus();
  const Utterance& u = c.manifest.entries.front();
  CHECK(read_file(a / u.wav_path) == read_file(b / u.wav_path));

  const Corpus loaded = Corpus::load(a);
  CHECK(loaded.manifest.entries.size() == c.manifest.entries.size());
  CHECK(loaded.inventory == c.inventory);
  CHECK(loaded.manifest.sample_rate == c.manifest.sample_rate);
  CHECK(loaded.manifest.generation_seed == 7);
  CHECK(loaded.waveform(loaded.manifest.at(u.utt_id)) == quantize_pcm16(c.waveform(u)));
  for (size_t i = 0; i < c.speakers.size(); ++i) CHECK(loaded.speakers[i].f0 == c.speakers[i].f0);
  for (int p = 0; p < c.voice.num_phonemes(); ++p) CHECK(loaded.voice.base_duration(p) == c.voice.base_duration(p));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("manifest invariants") {
  const Corpus& c = small_corpus();
  std::set<std::string> ids;
  for (const auto& u : c.manifest.entries) {
    CHECK(ids.insert(u.utt_id).second);
    if (!u.prev_utt) continue;
    const Utterance& p = adjacent_pair(u, c.manifest);
    CHECK(p.utt_id == *u.prev_utt);
    CHECK(p.speaker_id == u.speaker_id);
    CHECK(p.language == u.language);
  }
  for (const auto& s : c.speakers) {
    CHECK(s.f0 >= 80.0);
    CHECK(s.f0 <= 400.0);
    CHECK(s.tilt >= -1.0);
    CHECK(s.tilt <= 0.0);
    for (const auto& [lang, scale] : s.duration_scale) {
      CHECK(scale >= 0.5);
      CHECK(scale <= 2.0);
    }
  }
  for (size_t i = 0; i < c.speakers.size(); ++i)
    for (size_t j = i + 1; j < c.speakers.size(); ++j) CHECK(std::abs(c.speakers[i].f0 - c.speakers[j].f0) >= 5.0);
  for (int p = 0; p < c.voice.num_phonemes(); ++p) {
    CHECK(c.voice.base_duration(p) >= 0.060);
    CHECK(c.voice.base_duration(p) <= 0.140);
  }
}

TEST_CASE("every training speaker has a chain in every language") {
  const Corpus& c = small_corpus();
  for (const auto& s : c.speakers) {
    if (s.held_out) continue;
    for (const auto& lang : c.languages) {
      int with_prev = 0;
      for (const auto& u : c.manifest.entries)
        with_prev += u.speaker_id == s.speaker_id && u.language == lang && u.prev_utt.has_value();
      CHECK(with_prev >= 1);
    }
  }
}

TEST_CASE("adjacent_pair errors at the start of a chain") {
  const Corpus& c = small_corpus();
  const Utterance* first = nullptr;
  for (const auto& u : c.manifest.entries)
    if (!u.prev_utt) first = &u;
  REQUIRE(first);
  CHECK_THROWS_AS(adjacent_pair(*first, c.manifest), InvalidArgument);
  for (const auto& u : c.manifest.entries)
    if (u.prev_utt && *u.prev_utt == first->utt_id) CHECK(&adjacent_pair(u, c.manifest) == &c.manifest.at(first->utt_id));
}

TEST_CASE("waveform length follows the duration law") {
  const Corpus& c = small_corpus();
  const int hop = 80;
  for (const auto& u : c.manifest.entries) {
    const SpeakerProfile& spk = c.speaker(u.speaker_id);
    double seconds = 0.0;
    for (int p : u.phonemes.ids) seconds += c.voice.base_duration(p) * spk.scale_for(u.language);
    CHECK(std::abs(static_cast<double>(c.waveform(u).size()) - seconds * c.voice.sample_rate) <= hop);
    const auto bounds = segment_boundaries(u.phonemes, spk, u.language, c.voice);
    REQUIRE(bounds.size() == u.phonemes.ids.size() + 1);
    for (size_t i = 0; i < u.phonemes.ids.size(); ++i) {
      const double want = c.voice.base_duration(u.phonemes.ids[i]) * spk.scale_for(u.language) * c.voice.sample_rate;
      CHECK(std::abs((bounds[i + 1] - bounds[i]) - want) <= hop);
    }
  }
}

TEST_CASE("synth_waveform preconditions") {
  const Corpus& c = small_corpus();
  const SpeakerProfile& spk = c.speakers.front();
  CHECK_THROWS_AS(synth_waveform(PhonemeSequence{{}, "xa"}, spk, "xa", c.voice), InvalidArgument);
  CHECK_THROWS_AS(synth_waveform(PhonemeSequence{{c.voice.num_phonemes()}, "xa"}, spk, "xa", c.voice),
                  InvalidArgument);
  CHECK_THROWS_AS(synth_waveform(PhonemeSequence{{0}, "zz"}, spk, "zz", c.voice), InvalidArgument);
}

TEST_CASE("single phoneme at 100 Hz has an autocorrelation pitch of 100 Hz") {
  const Corpus& c = small_corpus();
  SpeakerProfile spk = c.speakers.front();
  spk.f0 = 100.0;
  for (int p = 0; p < c.voice.num_phonemes(); ++p) {
    const auto w = synth_waveform(PhonemeSequence{{p}, "xa"}, spk, "xa", c.voice);
    const auto est = dsp::autocorrelation_pitch(w, c.voice.sample_rate, 75.0, 420.0);
    CHECK(est.f0 == doctest::Approx(100.0).epsilon(0.02));
  }
}

TEST_CASE("oracle_decode inverts the generator on every corpus utterance") {
  const Corpus& c = small_corpus();
  for (const auto& u : c.manifest.entries) {
    const OracleResult r = oracle_decode(c.waveform(u), c.voice);
    CHECK(r.phonemes.ids == u.phonemes.ids);
    CHECK(std::abs(r.f0 - c.speaker(u.speaker_id).f0) <= 2.0);
    CHECK_FALSE(r.low_confidence);
  }
}

TEST_CASE("two speakers share the phoneme pattern but not the waveform") {
  const Corpus& c = small_corpus();
  const PhonemeSequence s = c.manifest.entries.front().phonemes;
  const auto a = synth_waveform(s, c.speakers[0], s.language, c.voice);
  const auto b = synth_waveform(s, c.speakers[1], s.language, c.voice);
  CHECK(a != b);
  const OracleResult ra = oracle_decode(a, c.voice), rb = oracle_decode(b, c.voice);
  CHECK(ra.phonemes.ids == s.ids);
  CHECK(rb.phonemes.ids == s.ids);
  CHECK(std::abs(ra.f0 - rb.f0) >= 3.0);
}

TEST_CASE("silence decodes to a low-confidence empty sequence") {
  const Corpus& c = small_corpus();
  const OracleResult r = oracle_decode(std::vector<float>(4000, 0.0f), c.voice);
  CHECK(r.phonemes.ids.empty());
  CHECK(r.low_confidence);
}

TEST_CASE("eval speakers speak every parallel sentence in every language") {
  const Corpus& c = small_corpus();
  for (const auto* u : c.split(true))
    for (const auto& lang : c.languages) {
      const Utterance* p = c.parallel(*u, lang);
      REQUIRE(p);
      CHECK(p->speaker_id == u->speaker_id);
      CHECK(p->language == lang);
      CHECK(c.translate(u->text, u->language, lang) == p->text);
    }
}

TEST_CASE("wav round trip") {
  const fs::path p = fs::temp_directory_path() / "vallex_wav_test.wav";
  const std::vector<float> x{0.0f, 0.5f, -0.5f, 1.5f, -1.0f};
  write_wav(p, x, 8000);
  const Waveform w = read_wav(p);
  CHECK(w.sample_rate == 8000);
  REQUIRE(w.samples.size() == x.size());
  CHECK(w.samples[1] == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(w.samples[3] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(w.samples == quantize_pcm16(x));
  fs::remove(p);
}
