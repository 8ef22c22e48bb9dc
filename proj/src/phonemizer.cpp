#include "vallex/phonemizer.hpp"

#include <cctype>
#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "vallex/common.hpp"

namespace vallex {

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

PhonemeInventory::PhonemeInventory(std::vector<std::string> phoneme_labels) {
  std::sort(phoneme_labels.begin(), phoneme_labels.end());
  phoneme_labels.erase(std::unique(phoneme_labels.begin(), phoneme_labels.end()), phoneme_labels.end());
  for (const auto& l : phoneme_labels) {
    if (l.empty() || l.front() == '<') throw InvalidArgument("invalid phoneme label '" + l + "'");
  }
  num_phonemes_ = static_cast<int>(phoneme_labels.size());
  labels_ = std::move(phoneme_labels);
  for (auto s : {kPad, kBos, kEos, kMask, kBlank}) labels_.emplace_back(s);
  for (int i = 0; i < size(); ++i) id_of_.emplace(labels_[i], i);
}

int PhonemeInventory::id(std::string_view label) const {
  auto found = find(label);
  if (!found) throw InvalidArgument("unknown phoneme label '" + std::string(label) + "'");
  return *found;
}

std::optional<int> PhonemeInventory::find(std::string_view label) const {
  auto it = id_of_.find(std::string(label));
  if (it == id_of_.end()) return std::nullopt;
  return it->second;
}

const std::string& PhonemeInventory::label(int id) const {
  if (!valid(id)) throw InvalidArgument("phoneme id " + std::to_string(id) + " out of range");
  return labels_[id];
}

void Lexicon::add(const std::string& token, std::vector<std::string> phonemes) {
  if (token.empty() || phonemes.empty()) throw InvalidArgument("empty lexicon entry for '" + token + "'");
  auto [it, inserted] = entries_.emplace(token, phonemes);
  if (!inserted && it->second != phonemes) {
    throw InvalidArgument("lexicon[" + language_ + "]: token '" + token + "' has conflicting definitions");
  }
}

const std::vector<std::string>* Lexicon::find(std::string_view token) const {
  auto it = entries_.find(token);
  return it == entries_.end() ? nullptr : &it->second;
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open lexicon " + path.string());
  const std::string name = path.filename().string();
  const auto dot = name.rfind('.');
  if (dot == std::string::npos || dot + 1 == name.size()) {
    throw FormatError("lexicon filename needs a language suffix: " + name);
  }
  Lexicon lex(name.substr(dot + 1));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>phonemes");
    }
    lex.add(line.substr(0, tab), split_ws(std::string_view(line).substr(tab + 1)));
  }
  return lex;
}

void Lexicon::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& [token, phones] : entries_) {
    out << token << '\t';
    for (size_t i = 0; i < phones.size(); ++i) out << (i ? " " : "") << phones[i];
    out << '\n';
  }
}

PhonemeInventory build_inventory(std::span<const Lexicon> lexicons) {
  if (lexicons.empty()) throw InvalidArgument("build_inventory: no lexicons given");
  std::set<std::string> labels;
  for (const auto& lex : lexicons) {
    if (lex.empty()) throw InvalidArgument("build_inventory: lexicon '" + lex.language() + "' is empty");
    for (const auto& [token, phones] : lex.entries()) labels.insert(phones.begin(), phones.end());
  }
  return PhonemeInventory(std::vector<std::string>(labels.begin(), labels.end()));
}

PhonemeInventory build_inventory(std::span<const std::filesystem::path> lexicon_files) {
  std::vector<Lexicon> lexicons;
  for (const auto& p : lexicon_files) lexicons.push_back(Lexicon::load(p));
  return build_inventory(lexicons);
}

namespace {

void expand_into(const std::string& token, const Lexicon& lex, const PhonemeInventory& inv, std::vector<int>& out) {
  const auto* phones = lex.find(token);
  if (!phones) throw InvalidArgument("out-of-vocabulary token '" + token + "' for language " + lex.language());
  for (const auto& p : *phones) out.push_back(inv.id(p));
}

}  // namespace

PhonemeSequence phonemize(std::string_view text, const Lexicon& lexicon, const PhonemeInventory& inventory) {
  PhonemeSequence seq{{}, lexicon.language()};
  for (const auto& token : split_ws(text)) expand_into(token, lexicon, inventory, seq.ids);
  return seq;
}

PhonemeSequence phonemize(std::string_view text, std::string_view default_language,
                          const std::map<std::string, Lexicon, std::less<>>& lexicons,
                          const PhonemeInventory& inventory) {
  PhonemeSequence seq;
  std::map<std::string, int> votes;
  for (const auto& raw : split_ws(text)) {
    std::string token = raw;
    std::string lang(default_language);
    if (const auto at = raw.rfind('@'); at != std::string::npos && at > 0) {
      token = raw.substr(0, at);
      lang = raw.substr(at + 1);
    }
    auto it = lexicons.find(lang);
    if (it == lexicons.end()) throw InvalidArgument("no lexicon for language '" + lang + "'");
    expand_into(token, it->second, inventory, seq.ids);
    ++votes[lang];
  }
  seq.language = std::string(default_language);
  int best = votes.count(seq.language) ? votes[seq.language] : 0;
  for (const auto& [lang, n] : votes) {
    if (n > best) {
      best = n;
      seq.language = lang;
    }
  }
  return seq;
}

std::string detokenize(std::span<const int> ids, const PhonemeInventory& inventory) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += inventory.label(ids[i]);
  }
  return out;
}

std::vector<int> parse_labels(std::string_view labels, const PhonemeInventory& inventory) {
  std::vector<int> ids;
  for (const auto& l : split_ws(labels)) ids.push_back(inventory.id(l));
  return ids;
}

}  // namespace vallex
