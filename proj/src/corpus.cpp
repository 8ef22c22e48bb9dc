#include "vallex/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "vallex/common.hpp"
#include "vallex/random.hpp"
#include "vallex/wav.hpp"

namespace vallex {
namespace fs = std::filesystem;

namespace {

constexpr const char* kPhonemeLabels[] = {"a", "b", "d", "e", "g", "i", "k", "l",
                                          "m", "n", "o", "p", "r", "s", "t", "u"};
constexpr int kNumFormants = 7;
constexpr double kFormantLo = 700.0, kFormantHi = 3400.0;
constexpr double kTrainF0Lo = 90.0, kTrainF0Hi = 300.0;
constexpr double kEvalF0Lo = 100.0, kEvalF0Hi = 260.0;
constexpr double kMinF0Gap = 5.0;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_fields(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double to_double(const std::string& s) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("bad number: " + s);
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad number: " + s);
  }
}

std::string language_code(int i) { return std::string("x") + static_cast<char>('a' + i); }

double nominal_scale(int language, int num_languages) {
  if (num_languages == 1) return 1.0;
  return 0.8 + 0.5 * language / (num_languages - 1);
}

std::vector<std::string> render(const std::vector<int>& concepts, const std::vector<std::string>& words,
                                int language) {
  std::vector<std::string> out;
  for (int c : concepts) out.push_back(words[c]);
  if (language % 2 == 1) std::reverse(out.begin(), out.end());
  return out;
}

bool has_adjacent_repeat(const std::vector<std::string>& rendered) {
  std::string joined;
  for (const auto& w : rendered) joined += w;
  for (size_t i = 1; i < joined.size(); ++i)
    if (joined[i] == joined[i - 1]) return true;
  return false;
}

std::string join(const std::vector<std::string>& v, const char* sep = " ") {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

double SpeakerProfile::scale_for(std::string_view language) const {
  auto it = duration_scale.find(language);
  if (it == duration_scale.end())
    throw InvalidArgument("speaker " + speaker_id + " has no duration scale for " + std::string(language));
  return it->second;
}

double VoiceModel::envelope_db(int phoneme, double freq) const {
  double g = 0.0;
  for (int k : phonemes.at(phoneme).formants) {
    const double d = std::log2(freq / formant_centers[k]);
    g += std::exp(-d * d / (2.0 * formant_width_oct * formant_width_oct));
  }
  return formant_gain_db * g;
}

double VoiceModel::base_duration(int phoneme) const {
  if (phoneme < 0 || phoneme >= num_phonemes()) throw InvalidArgument("unknown phoneme ID " + std::to_string(phoneme));
  return phonemes[phoneme].base_duration;
}

const Utterance* CorpusManifest::find(std::string_view utt_id) const {
  for (const auto& u : entries)
    if (u.utt_id == utt_id) return &u;
  return nullptr;
}

const Utterance& CorpusManifest::at(std::string_view utt_id) const {
  if (const auto* u = find(utt_id)) return *u;
  throw InvalidArgument("unknown utterance " + std::string(utt_id));
}

void CorpusManifest::save(const fs::path& path, const PhonemeInventory& inventory) const {
  auto out = open_out(path);
  out << "#sample_rate=" << sample_rate << "\tgeneration_seed=" << generation_seed << "\n";
  for (const auto& u : entries) {
    out << u.utt_id << '\t' << u.language << '\t' << u.speaker_id << '\t' << u.prev_utt.value_or("-") << '\t'
        << u.text << '\t' << detokenize(u.phonemes.ids, inventory) << '\t' << u.wav_path << '\n';
  }
}

CorpusManifest CorpusManifest::load(const fs::path& path, const PhonemeInventory& inventory) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0][0] != '#') throw FormatError("manifest header missing in " + path.string());
  CorpusManifest m;
  for (const auto& field : split_fields(std::string_view(lines[0]).substr(1), '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("bad manifest header field: " + field);
    const auto key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "sample_rate") m.sample_rate = std::stoi(value);
    else if (key == "generation_seed") m.generation_seed = std::stoull(value);
  }
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_fields(lines[i], '\t');
    if (f.size() != 7) throw FormatError("manifest line " + std::to_string(i + 1) + " has " + std::to_string(f.size()) + " fields");
    Utterance u;
    u.utt_id = f[0];
    u.language = f[1];
    u.speaker_id = f[2];
    if (f[3] != "-") u.prev_utt = f[3];
    u.text = f[4];
    u.phonemes = {parse_labels(f[5], inventory), f[1]};
    u.wav_path = f[6];
    m.entries.push_back(std::move(u));
  }
  std::set<std::string> ids;
  for (const auto& u : m.entries)
    if (!ids.insert(u.utt_id).second) throw FormatError("duplicate utt_id " + u.utt_id);
  for (const auto& u : m.entries) {
    if (!u.prev_utt) continue;
    const auto* p = m.find(*u.prev_utt);
    if (!p || p->speaker_id != u.speaker_id || p->language != u.language)
      throw FormatError("unresolvable prev_utt for " + u.utt_id);
  }
  return m;
}

const SpeakerProfile& Corpus::speaker(std::string_view id) const {
  for (const auto& s : speakers)
    if (s.speaker_id == id) return s;
  throw InvalidArgument("unknown speaker " + std::string(id));
}

int Corpus::language_index(std::string_view language) const {
  for (size_t i = 0; i < languages.size(); ++i)
    if (languages[i] == language) return static_cast<int>(i);
  throw InvalidArgument("unknown language " + std::string(language));
}

bool Corpus::is_eval(const Utterance& u) const { return speaker(u.speaker_id).held_out; }

std::vector<const Utterance*> Corpus::split(bool eval) const {
  std::vector<const Utterance*> out;
  for (const auto& u : manifest.entries)
    if (is_eval(u) == eval) out.push_back(&u);
  return out;
}

std::vector<float> Corpus::waveform(const Utterance& u) const {
  if (auto it = cache.find(u.utt_id); it != cache.end()) return it->second;
  if (root.empty()) throw InvalidArgument("no waveform available for " + u.utt_id);
  return read_wav(root / u.wav_path).samples;
}

const Utterance* Corpus::parallel(const Utterance& u, std::string_view language) const {
  // Parallel renderings share the speaker and the sentence index; only the
  // language component of the ID differs.
  const std::string prefix = u.speaker_id + "-" + u.language + "-";
  if (u.utt_id.rfind(prefix, 0) != 0) return nullptr;
  return manifest.find(u.speaker_id + "-" + std::string(language) + "-" + u.utt_id.substr(prefix.size()));
}

std::string Corpus::translate(std::string_view text, std::string_view from, std::string_view to) const {
  const int a = language_index(from), b = language_index(to);
  std::vector<int> concepts;
  for (const auto& w : split_ws(text)) {
    const auto& words = dictionary[a];
    const auto it = std::find(words.begin(), words.end(), w);
    if (it == words.end()) throw InvalidArgument("word '" + w + "' not in the " + std::string(from) + " dictionary");
    concepts.push_back(static_cast<int>(it - words.begin()));
  }
  if (a % 2 == 1) std::reverse(concepts.begin(), concepts.end());
  return join(render(concepts, dictionary[b], b));
}

std::vector<double> Corpus::phoneme_durations(const PhonemeSequence& s, std::string_view language,
                                              const SpeakerProfile& spk) const {
  const double scale = spk.scale_for(language);
  std::vector<double> d;
  for (int id : s.ids) d.push_back(voice.base_duration(id) * scale);
  return d;
}

std::vector<long> segment_boundaries(const PhonemeSequence& phonemes, const SpeakerProfile& speaker,
                                     std::string_view language, const VoiceModel& voice) {
  const double scale = speaker.scale_for(language);
  std::vector<long> b{0};
  double t = 0.0;
  for (int id : phonemes.ids) {
    t += voice.base_duration(id) * scale;
    b.push_back(std::lround(t * voice.sample_rate));
  }
  return b;
}

std::vector<float> synth_waveform(const PhonemeSequence& phonemes, const SpeakerProfile& speaker,
                                  std::string_view language, const VoiceModel& voice) {
  if (phonemes.ids.empty()) throw InvalidArgument("synth_waveform: empty phoneme sequence");
  const auto bounds = segment_boundaries(phonemes, speaker, language, voice);
  const int n = static_cast<int>(phonemes.ids.size());
  const long total = bounds.back();
  const double sr = voice.sample_rate;
  const int harmonics =
      static_cast<int>(std::floor(std::min(voice.max_harmonic_hz, 0.4875 * sr) / speaker.f0));
  std::vector<double> omega(harmonics), theta(harmonics);
  for (int h = 1; h <= harmonics; ++h) {
    omega[h - 1] = 2.0 * std::numbers::pi * h * speaker.f0 / sr;
    Rng r(derive_seed(0x5EED, h));
    theta[h - 1] = 2.0 * std::numbers::pi * r.uniform();
  }
  const long xh = std::lround(voice.crossfade * sr / 2.0);
  std::vector<double> out(total, 0.0), amp(harmonics);
  for (int k = 0; k < n; ++k) {
    const int p = phonemes.ids[k];
    for (int h = 1; h <= harmonics; ++h)
      amp[h - 1] = voice.amplitude * std::pow(h, speaker.tilt) * std::pow(10.0, voice.envelope_db(p, h * speaker.f0) / 20.0);
    const long lo = k == 0 ? 0 : std::max(0L, bounds[k] - xh);
    const long hi = k == n - 1 ? total : std::min(total, bounds[k + 1] + xh);
    for (long t = lo; t < hi; ++t) {
      double w = 1.0;
      if (k > 0 && t < bounds[k] + xh) w *= (t - (bounds[k] - xh) + 0.5) / (2.0 * xh);
      if (k < n - 1 && t >= bounds[k + 1] - xh) w *= 1.0 - (t - (bounds[k + 1] - xh) + 0.5) / (2.0 * xh);
      double s = 0.0;
      for (int h = 0; h < harmonics; ++h) s += amp[h] * std::sin(omega[h] * t + theta[h]);
      out[t] += w * s;
    }
  }
  return std::vector<float>(out.begin(), out.end());
}

const Utterance& adjacent_pair(const Utterance& utt, const CorpusManifest& manifest) {
  if (!utt.prev_utt) throw InvalidArgument("utterance " + utt.utt_id + " starts a chain; skip it as a training sample");
  const Utterance& p = manifest.at(*utt.prev_utt);
  if (p.speaker_id != utt.speaker_id || p.language != utt.language)
    throw FormatError("prev_utt of " + utt.utt_id + " belongs to another speaker or language");
  return p;
}

Corpus generate_corpus(const CorpusSpec& spec, uint64_t seed) {
  if (spec.num_languages < 2) throw InvalidArgument("corpus needs at least 2 languages");
  if (spec.num_languages > 26) throw InvalidArgument("at most 26 languages");
  if (spec.num_speakers < 4) throw InvalidArgument("corpus needs at least 4 speakers");
  if (spec.utts_per_speaker < 2) throw InvalidArgument("corpus needs at least 2 utterances per speaker and language");
  if (spec.eval_speakers < 0 || spec.eval_utts < 1) throw InvalidArgument("invalid held-out split size");
  if (spec.min_words < 1 || spec.max_words < spec.min_words) throw InvalidArgument("invalid sentence length range");
  if (spec.num_concepts < 2) throw InvalidArgument("need at least 2 concepts");
  if (spec.sample_rate < 8000) throw InvalidArgument("sample rate must be at least 8000 Hz");

  Rng rng(seed);
  Corpus c;
  const int num_ph = static_cast<int>(std::size(kPhonemeLabels));
  for (int i = 0; i < spec.num_languages; ++i) c.languages.push_back(language_code(i));

  // Voice model: phoneme timbres are distinct formant pairs.
  c.voice.sample_rate = spec.sample_rate;
  for (int k = 0; k < kNumFormants; ++k)
    c.voice.formant_centers.push_back(kFormantLo * std::pow(kFormantHi / kFormantLo, double(k) / (kNumFormants - 1)));
  std::vector<std::vector<int>> pairs;
  for (int a = 0; a < kNumFormants; ++a)
    for (int b = a + 1; b < kNumFormants; ++b) pairs.push_back({a, b});
  rng.shuffle(pairs.begin(), pairs.end());
  for (int p = 0; p < num_ph; ++p) {
    PhonemeVoicing v;
    v.base_duration = std::round(rng.uniform(60.0, 140.0)) / 1000.0;
    v.formants = pairs[p];
    c.voice.phonemes.push_back(v);
  }

  // Words: shared forms, each language maps concepts onto a permutation of them.
  std::vector<std::string> forms;
  while (true) {
    forms.clear();
    std::set<std::string> seen;
    while (static_cast<int>(forms.size()) < spec.num_concepts) {
      const double r = rng.uniform();
      const int len = r < 0.2 ? 1 : (r < 0.7 ? 2 : 3);
      std::string w;
      while (static_cast<int>(w.size()) < len) {
        const char ch = kPhonemeLabels[rng.below(num_ph)][0];
        if (w.empty() || w.back() != ch) w += ch;
      }
      if (seen.insert(w).second) forms.push_back(w);
    }
    std::set<char> covered;
    for (const auto& w : forms) covered.insert(w.begin(), w.end());
    if (static_cast<int>(covered.size()) == num_ph || spec.num_concepts * 3 < num_ph) break;
  }
  for (int l = 0; l < spec.num_languages; ++l) {
    std::vector<int> perm(spec.num_concepts);
    for (int i = 0; i < spec.num_concepts; ++i) perm[i] = i;
    if (l > 0) rng.shuffle(perm.begin(), perm.end());
    std::vector<std::string> words;
    Lexicon lex(c.languages[l]);
    for (int i = 0; i < spec.num_concepts; ++i) {
      words.push_back(forms[perm[i]]);
      std::vector<std::string> ph;
      for (char ch : words.back()) ph.emplace_back(1, ch);
      lex.add(words.back(), ph);
    }
    c.dictionary.push_back(words);
    c.lexicons.emplace(c.languages[l], std::move(lex));
  }
  std::vector<Lexicon> lex_list;
  for (const auto& [_, lex] : c.lexicons) lex_list.push_back(lex);
  c.inventory = build_inventory(lex_list);
  // Voice entries are indexed by phoneme ID; labels that ended up unused by
  // the lexicons are dropped so the indexing stays dense.
  {
    std::vector<PhonemeVoicing> by_id;
    for (int id = 0; id < c.inventory.num_phonemes(); ++id) {
      const auto& label = c.inventory.label(id);
      const auto* it = std::find_if(std::begin(kPhonemeLabels), std::end(kPhonemeLabels),
                                    [&](const char* s) { return label == s; });
      by_id.push_back(c.voice.phonemes[it - std::begin(kPhonemeLabels)]);
    }
    c.voice.phonemes = std::move(by_id);
  }

  // Speakers.
  auto far_enough = [&](double f0) {
    for (const auto& s : c.speakers)
      if (std::abs(s.f0 - f0) < kMinF0Gap) return false;
    return true;
  };
  auto make_speaker = [&](const std::string& id, double f0, double tilt, bool held_out) {
    SpeakerProfile s;
    s.speaker_id = id;
    s.f0 = f0;
    s.tilt = tilt;
    s.held_out = held_out;
    for (int l = 0; l < spec.num_languages; ++l) s.duration_scale[c.languages[l]] = nominal_scale(l, spec.num_languages);
    c.speakers.push_back(std::move(s));
  };
  const double llo = std::log(kTrainF0Lo), lhi = std::log(kTrainF0Hi);
  for (int i = 0; i < spec.num_speakers; ++i) {
    double f0;
    int tries = 0;
    do {
      f0 = std::exp(llo + (lhi - llo) * (i + rng.uniform()) / spec.num_speakers);
      if (++tries > 1000) throw InvalidArgument("too many speakers for the f0 range");
    } while (!far_enough(f0));
    char id[16];
    std::snprintf(id, sizeof id, "s%02d", i);
    make_speaker(id, std::round(f0 * 100) / 100, std::round(rng.uniform(-0.9, -0.1) * 1000) / 1000, false);
  }
  for (int i = 0; i < spec.eval_speakers; ++i) {
    double f0;
    int tries = 0;
    do {
      f0 = std::exp(rng.uniform(std::log(kEvalF0Lo), std::log(kEvalF0Hi)));
      if (++tries > 1000) throw InvalidArgument("too many speakers for the f0 range");
    } while (!far_enough(f0));
    char id[16];
    std::snprintf(id, sizeof id, "e%02d", i);
    make_speaker(id, std::round(f0 * 100) / 100, std::round(rng.uniform(-0.8, -0.2) * 1000) / 1000, true);
  }

  auto sentence = [&]() {
    while (true) {
      const int n = spec.min_words + static_cast<int>(rng.below(spec.max_words - spec.min_words + 1));
      std::vector<int> concepts;
      while (static_cast<int>(concepts.size()) < n) {
        const int k = static_cast<int>(rng.below(spec.num_concepts));
        if (concepts.empty() || concepts.back() != k) concepts.push_back(k);
      }
      bool ok = true;
      for (int l = 0; l < spec.num_languages && ok; ++l) ok = !has_adjacent_repeat(render(concepts, c.dictionary[l], l));
      if (ok) return concepts;
    }
  };

  c.manifest.sample_rate = spec.sample_rate;
  c.manifest.generation_seed = seed;
  auto add_utt = [&](const SpeakerProfile& spk, int l, int index, const std::vector<int>& concepts) {
    Utterance u;
    char id[64];
    std::snprintf(id, sizeof id, "%s-%s-%03d", spk.speaker_id.c_str(), c.languages[l].c_str(), index);
    u.utt_id = id;
    u.speaker_id = spk.speaker_id;
    u.language = c.languages[l];
    u.text = join(render(concepts, c.dictionary[l], l));
    u.phonemes = phonemize(u.text, c.lexicons.at(u.language), c.inventory);
    if (index > 0) {
      std::snprintf(id, sizeof id, "%s-%s-%03d", spk.speaker_id.c_str(), c.languages[l].c_str(), index - 1);
      u.prev_utt = id;
    }
    u.wav_path = "wav/" + u.utt_id + ".wav";
    c.cache[u.utt_id] = quantize_pcm16(synth_waveform(u.phonemes, spk, u.language, c.voice));
    c.manifest.entries.push_back(std::move(u));
  };
  for (const auto& spk : c.speakers) {
    if (spk.held_out) continue;
    for (int l = 0; l < spec.num_languages; ++l)
      for (int j = 0; j < spec.utts_per_speaker; ++j) add_utt(spk, l, j, sentence());
  }
  for (const auto& spk : c.speakers) {
    if (!spk.held_out) continue;
    std::vector<std::vector<int>> sentences;
    for (int j = 0; j < spec.eval_utts; ++j) sentences.push_back(sentence());
    for (int l = 0; l < spec.num_languages; ++l)
      for (int j = 0; j < spec.eval_utts; ++j) add_utt(spk, l, j, sentences[j]);
  }
  return c;
}

void Corpus::save(const fs::path& dir) const {
  fs::create_directories(dir / "wav");
  manifest.save(dir / "manifest.tsv", inventory);
  for (const auto& [_, lex] : lexicons) lex.save(dir / ("lexicon." + lex.language()));
  {
    auto out = open_out(dir / "dictionary.tsv");
    out << "#concept";
    for (const auto& l : languages) out << '\t' << l;
    out << '\n';
    for (size_t k = 0; k < dictionary[0].size(); ++k) {
      out << k;
      for (const auto& words : dictionary) out << '\t' << words[k];
      out << '\n';
    }
  }
  {
    auto out = open_out(dir / "speakers.tsv");
    out << "#speaker_id\tf0\ttilt\tsplit\tduration_scale\n";
    for (const auto& s : speakers) {
      out << s.speaker_id << '\t' << fmt_double(s.f0) << '\t' << fmt_double(s.tilt) << '\t'
          << (s.held_out ? "eval" : "train") << '\t';
      bool first = true;
      for (const auto& [lang, scale] : s.duration_scale) {
        out << (first ? "" : ",") << lang << '=' << fmt_double(scale);
        first = false;
      }
      out << '\n';
    }
  }
  {
    auto out = open_out(dir / "voice.tsv");
    out << "#sample_rate=" << voice.sample_rate << "\tamplitude=" << fmt_double(voice.amplitude)
        << "\tcrossfade=" << fmt_double(voice.crossfade) << "\tformant_gain_db=" << fmt_double(voice.formant_gain_db)
        << "\tformant_width_oct=" << fmt_double(voice.formant_width_oct)
        << "\tmax_harmonic_hz=" << fmt_double(voice.max_harmonic_hz) << "\tformants=";
    for (size_t k = 0; k < voice.formant_centers.size(); ++k)
      out << (k ? "," : "") << fmt_double(voice.formant_centers[k]);
    out << '\n';
    for (int p = 0; p < voice.num_phonemes(); ++p) {
      out << inventory.label(p) << '\t' << fmt_double(voice.phonemes[p].base_duration) << '\t';
      for (size_t k = 0; k < voice.phonemes[p].formants.size(); ++k)
        out << (k ? "," : "") << voice.phonemes[p].formants[k];
      out << '\n';
    }
  }
  for (const auto& u : manifest.entries) {
    const auto path = dir / u.wav_path;
    write_wav(path, waveform(u), manifest.sample_rate);
  }
}

Corpus Corpus::load(const fs::path& dir) {
  Corpus c;
  c.root = dir;
  std::vector<Lexicon> lex_list;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().filename().string().rfind("lexicon.", 0) == 0) lex_list.push_back(Lexicon::load(entry.path()));
  }
  std::sort(lex_list.begin(), lex_list.end(), [](const Lexicon& a, const Lexicon& b) { return a.language() < b.language(); });
  if (lex_list.empty()) throw FormatError("no lexicon files in " + dir.string());
  c.inventory = build_inventory(lex_list);
  for (auto& lex : lex_list) c.lexicons.emplace(lex.language(), lex);

  const auto dict_lines = read_lines(dir / "dictionary.tsv");
  {
    const auto header = split_fields(std::string_view(dict_lines.at(0)).substr(1), '\t');
    c.languages.assign(header.begin() + 1, header.end());
    c.dictionary.assign(c.languages.size(), {});
    for (size_t i = 1; i < dict_lines.size(); ++i) {
      const auto f = split_fields(dict_lines[i], '\t');
      if (f.size() != c.languages.size() + 1) throw FormatError("bad dictionary line");
      for (size_t l = 0; l < c.languages.size(); ++l) c.dictionary[l].push_back(f[l + 1]);
    }
  }
  for (const auto& line : read_lines(dir / "speakers.tsv")) {
    if (line[0] == '#') continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 5) throw FormatError("bad speakers line: " + line);
    SpeakerProfile s;
    s.speaker_id = f[0];
    s.f0 = to_double(f[1]);
    s.tilt = to_double(f[2]);
    s.held_out = f[3] == "eval";
    for (const auto& kv : split_fields(f[4], ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("bad duration scale: " + kv);
      s.duration_scale[kv.substr(0, eq)] = to_double(kv.substr(eq + 1));
    }
    c.speakers.push_back(std::move(s));
  }
  const auto voice_lines = read_lines(dir / "voice.tsv");
  for (const auto& field : split_fields(std::string_view(voice_lines.at(0)).substr(1), '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw FormatError("bad voice header field: " + field);
    const auto key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "sample_rate") c.voice.sample_rate = std::stoi(value);
    else if (key == "amplitude") c.voice.amplitude = to_double(value);
    else if (key == "crossfade") c.voice.crossfade = to_double(value);
    else if (key == "formant_gain_db") c.voice.formant_gain_db = to_double(value);
    else if (key == "formant_width_oct") c.voice.formant_width_oct = to_double(value);
    else if (key == "max_harmonic_hz") c.voice.max_harmonic_hz = to_double(value);
    else if (key == "formants")
      for (const auto& v : split_fields(value, ',')) c.voice.formant_centers.push_back(to_double(v));
  }
  c.voice.phonemes.resize(c.inventory.num_phonemes());
  for (size_t i = 1; i < voice_lines.size(); ++i) {
    const auto f = split_fields(voice_lines[i], '\t');
    if (f.size() != 3) throw FormatError("bad voice line: " + voice_lines[i]);
    auto& v = c.voice.phonemes.at(c.inventory.id(f[0]));
    v.base_duration = to_double(f[1]);
    for (const auto& k : split_fields(f[2], ',')) v.formants.push_back(std::stoi(k));
  }
  c.manifest = CorpusManifest::load(dir / "manifest.tsv", c.inventory);
  return c;
}

}  // namespace vallex
