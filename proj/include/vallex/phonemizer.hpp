#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace vallex {

/// A phoneme-ID sequence tagged with the language it was produced for.
/// The body never contains special IDs; prompt assembly adds those.
struct PhonemeSequence {
  std::vector<int> ids;
  std::string language;

  bool operator==(const PhonemeSequence&) const = default;
};

/// Unified phoneme inventory shared by every language. Phoneme labels are
/// sorted lexicographically and take IDs [0, n); the five specials follow.
class PhonemeInventory {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kEos = "<eos>";
  static constexpr std::string_view kMask = "<mask>";
  static constexpr std::string_view kBlank = "<blank>";

  PhonemeInventory() = default;
  explicit PhonemeInventory(std::vector<std::string> phoneme_labels);

  int size() const { return static_cast<int>(labels_.size()); }
  int num_phonemes() const { return num_phonemes_; }
  const std::vector<std::string>& labels() const { return labels_; }

  int id(std::string_view label) const;
  std::optional<int> find(std::string_view label) const;
  const std::string& label(int id) const;
  bool valid(int id) const { return id >= 0 && id < size(); }
  bool is_special(int id) const { return id >= num_phonemes_ && id < size(); }

  int pad() const { return num_phonemes_; }
  int bos() const { return num_phonemes_ + 1; }
  int eos() const { return num_phonemes_ + 2; }
  int mask() const { return num_phonemes_ + 3; }
  int blank() const { return num_phonemes_ + 4; }

  bool operator==(const PhonemeInventory& o) const { return labels_ == o.labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> id_of_;
  int num_phonemes_ = 0;
};

/// Token → phoneme-label expansions for one language.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::string language) : language_(std::move(language)) {}

  /// Adds an entry; re-adding a token with a different expansion throws.
  void add(const std::string& token, std::vector<std::string> phonemes);
  const std::vector<std::string>* find(std::string_view token) const;

  const std::string& language() const { return language_; }
  const std::map<std::string, std::vector<std::string>, std::less<>>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  /// "token<TAB>phoneme phoneme ..." per line; the language is the filename suffix
  /// after the last '.', e.g. lexicon.xa → "xa".
  static Lexicon load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::string language_;
  std::map<std::string, std::vector<std::string>, std::less<>> entries_;
};

PhonemeInventory build_inventory(std::span<const Lexicon> lexicons);
PhonemeInventory build_inventory(std::span<const std::filesystem::path> lexicon_files);

/// Whitespace-separated tokens, each expanded through the lexicon in order.
PhonemeSequence phonemize(std::string_view text, const Lexicon& lexicon, const PhonemeInventory& inventory);

/// Code-switch form: a token may carry an explicit "@lang" suffix selecting another
/// lexicon; untagged tokens use default_language. The result's language is the
/// majority language over tokens (ties go to default_language).
PhonemeSequence phonemize(std::string_view text, std::string_view default_language,
                          const std::map<std::string, Lexicon, std::less<>>& lexicons,
                          const PhonemeInventory& inventory);

/// Space-joined labels.
std::string detokenize(std::span<const int> ids, const PhonemeInventory& inventory);

/// Inverse of detokenize.
std::vector<int> parse_labels(std::string_view labels, const PhonemeInventory& inventory);

std::vector<std::string> split_ws(std::string_view s);

}  // namespace vallex
