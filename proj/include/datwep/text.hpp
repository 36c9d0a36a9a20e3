#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "datwep/errors.hpp"
#include "datwep/tensor.hpp"

namespace datwep::text {

/// Character-level vocabulary with five reserved ids: <pad>=0, <sos>, <eos>, <sow>, <eow>.
class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kSos = 1;
  static constexpr std::int64_t kEos = 2;
  static constexpr std::int64_t kSow = 3;
  static constexpr std::int64_t kEow = 4;
  static constexpr std::int64_t kFirstChar = 5;

  static constexpr std::array<std::string_view, 5> kSpecialNames = {"<pad>", "<sos>", "<eos>",
                                                                     "<sow>", "<eow>"};

  /// a-z, 0-9 and space.
  static Vocabulary standard() {
    std::string chars = " ";
    for (char c = 'a'; c <= 'z'; ++c) chars += c;
    for (char c = '0'; c <= '9'; ++c) chars += c;
    return from_characters(chars);
  }

  /// Vocabulary over the given characters, assigned ids in order of first appearance.
  static Vocabulary from_characters(std::string_view chars) {
    Vocabulary v;
    for (char c : chars) {
      if (v.char_to_id_.count(c)) continue;
      const auto id = static_cast<std::int64_t>(kFirstChar + v.id_to_char_.size());
      v.char_to_id_[c] = id;
      v.id_to_char_.push_back(c);
    }
    return v;
  }

  std::size_t size() const noexcept { return kFirstChar + id_to_char_.size(); }

  bool contains(char c) const { return char_to_id_.count(c) != 0; }

  std::int64_t id(char c) const {
    auto it = char_to_id_.find(c);
    if (it == char_to_id_.end()) {
      throw UnknownCharacterError(std::string("character '") + c + "' is not in the vocabulary");
    }
    return it->second;
  }

  static bool is_special(std::int64_t id) noexcept { return id >= 0 && id < kFirstChar; }

  char character(std::int64_t id) const {
    if (id < kFirstChar || id >= static_cast<std::int64_t>(size())) {
      throw IndexError("token id " + std::to_string(id) + " is not a character token");
    }
    return id_to_char_[static_cast<std::size_t>(id - kFirstChar)];
  }

  /// One "token<TAB>id" line per entry; specials are spelled <pad>, <sos>, ...
  void save(std::ostream& os) const {
    for (std::size_t i = 0; i < kSpecialNames.size(); ++i) os << kSpecialNames[i] << '\t' << i << '\n';
    for (std::size_t i = 0; i < id_to_char_.size(); ++i)
      os << id_to_char_[i] << '\t' << (kFirstChar + static_cast<std::int64_t>(i)) << '\n';
  }

  static Vocabulary load(std::istream& is) {
    std::map<std::int64_t, std::string> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) {
        throw FormatError("vocabulary line " + std::to_string(lineno) + " has no tab separator");
      }
      const std::string token = line.substr(0, tab);
      std::int64_t id = 0;
      try {
        id = std::stoll(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw FormatError("vocabulary line " + std::to_string(lineno) + " has a bad id");
      }
      if (!entries.emplace(id, token).second) {
        throw FormatError("duplicate vocabulary id " + std::to_string(id));
      }
    }
    for (std::size_t i = 0; i < kSpecialNames.size(); ++i) {
      auto it = entries.find(static_cast<std::int64_t>(i));
      if (it == entries.end() || it->second != kSpecialNames[i]) {
        throw FormatError("vocabulary must map " + std::string(kSpecialNames[i]) + " to id " +
                          std::to_string(i));
      }
    }
    Vocabulary v;
    std::int64_t expect = kFirstChar;
    for (auto it = entries.lower_bound(kFirstChar); it != entries.end(); ++it, ++expect) {
      if (it->first != expect) throw FormatError("vocabulary ids must be contiguous");
      if (it->second.size() != 1) {
        throw FormatError("vocabulary entry '" + it->second + "' is not a single character");
      }
      const char c = it->second[0];
      if (!v.char_to_id_.emplace(c, it->first).second) {
        throw FormatError(std::string("character '") + c + "' appears twice in vocabulary");
      }
      v.id_to_char_.push_back(c);
    }
    if (entries.begin()->first < 0) throw FormatError("negative vocabulary id");
    return v;
  }

  void save_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write vocabulary file " + path);
    save(os);
  }

  static Vocabulary load_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read vocabulary file " + path);
    return load(is);
  }

  bool operator==(const Vocabulary& o) const { return id_to_char_ == o.id_to_char_; }

 private:
  std::map<char, std::int64_t> char_to_id_;
  std::vector<char> id_to_char_;
};

struct TokenSequence {
  std::vector<std::int64_t> ids;  // always l_max long
  std::size_t true_length = 0;    // tokens before padding

  std::size_t max_length() const noexcept { return ids.size(); }
};

/// Lowercase, drop ASCII punctuation and split on whitespace.
inline std::vector<std::string> normalize_words(std::string_view question) {
  std::vector<std::string> words;
  std::string cur;
  for (char raw : question) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline std::string normalize_question(std::string_view question) {
  std::string out;
  for (const auto& w : normalize_words(question)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

/// Number of tokens a question occupies before padding: 2 + sum(len(word) + 2).
inline std::size_t token_count(std::string_view question) {
  std::size_t n = 2;
  for (const auto& w : normalize_words(question)) n += w.size() + 2;
  return n;
}

inline constexpr std::size_t kDefaultMaxLength = 70;

/// <sos>, then <sow> chars <eow> per word, then <eos>, right-padded with <pad> to l_max.
inline TokenSequence tokenize(std::string_view question, const Vocabulary& vocab,
                              std::size_t l_max = kDefaultMaxLength) {
  TokenSequence seq;
  seq.ids.reserve(l_max);
  seq.ids.push_back(Vocabulary::kSos);
  for (const auto& w : normalize_words(question)) {
    seq.ids.push_back(Vocabulary::kSow);
    for (char c : w) seq.ids.push_back(vocab.id(c));
    seq.ids.push_back(Vocabulary::kEow);
  }
  seq.ids.push_back(Vocabulary::kEos);
  if (seq.ids.size() > l_max) {
    throw OverflowError("question needs " + std::to_string(seq.ids.size()) +
                        " tokens, maximum is " + std::to_string(l_max));
  }
  seq.true_length = seq.ids.size();
  seq.ids.resize(l_max, Vocabulary::kPad);
  return seq;
}

/// Inverse of tokenize(): words joined by single spaces.
inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  const auto& ids = seq.ids;
  if (seq.true_length < 2 || seq.true_length > ids.size()) {
    throw StructureError("true_length outside [2, l_max]");
  }
  if (ids[0] != Vocabulary::kSos) throw StructureError("sequence must start with <sos>");
  std::string out;
  bool in_word = false;
  bool word_has_chars = false;
  std::size_t i = 1;
  for (; i < seq.true_length; ++i) {
    const std::int64_t t = ids[i];
    if (t == Vocabulary::kSow) {
      if (in_word) throw StructureError("<sow> inside a word");
      in_word = true;
      word_has_chars = false;
      if (!out.empty()) out += ' ';
    } else if (t == Vocabulary::kEow) {
      if (!in_word) throw StructureError("<eow> without matching <sow>");
      if (!word_has_chars) throw StructureError("empty word");
      in_word = false;
    } else if (t == Vocabulary::kEos) {
      break;
    } else if (Vocabulary::is_special(t)) {
      throw StructureError("unexpected special token inside sequence");
    } else {
      if (!in_word) throw StructureError("character outside a word");
      out += vocab.character(t);
      word_has_chars = true;
    }
  }
  if (in_word) throw StructureError("word not closed before <eos>");
  if (i != seq.true_length - 1 || ids[i] != Vocabulary::kEos) {
    throw StructureError("<eos> must be the last token before padding");
  }
  for (std::size_t j = seq.true_length; j < ids.size(); ++j) {
    if (ids[j] != Vocabulary::kPad) throw StructureError("non-pad token after <eos>");
  }
  return out;
}

/// Fixed sinusoidal position encodings: even dims sin(pos / 10000^(2i/d)),
/// odd dims cos(pos / 10000^(2i/d)), where i is the dimension-pair index.
class PositionalEncoder {
 public:
  explicit PositionalEncoder(std::size_t d_emb = 8, std::size_t max_len = kDefaultMaxLength)
      : d_emb_(d_emb), max_len_(max_len) {
    if (d_emb == 0 || max_len == 0) throw ValidationError("positional encoder sizes must be > 0");
  }

  std::size_t d_emb() const noexcept { return d_emb_; }
  std::size_t max_len() const noexcept { return max_len_; }

  std::vector<double> encode(std::size_t pos) const {
    if (pos >= max_len_) {
      throw IndexError("position " + std::to_string(pos) + " outside [0, " +
                       std::to_string(max_len_) + ")");
    }
    std::vector<double> pe(d_emb_);
    for (std::size_t j = 0; j < d_emb_; ++j) {
      const double pair = static_cast<double>(j / 2);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * pair / static_cast<double>(d_emb_));
      pe[j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return pe;
  }

  /// [max_len, d_emb] table of encode(pos) rows.
  Tensor table() const {
    Tensor t(Shape{max_len_, d_emb_});
    for (std::size_t p = 0; p < max_len_; ++p) {
      const auto row = encode(p);
      std::copy(row.begin(), row.end(), t.ptr() + p * d_emb_);
    }
    return t;
  }

 private:
  std::size_t d_emb_;
  std::size_t max_len_;
};

/// 1 at positions before true_length, 0 at padding.
inline std::vector<double> padding_mask(const TokenSequence& seq) {
  std::vector<double> m(seq.ids.size(), 0.0);
  for (std::size_t i = 0; i < seq.true_length && i < m.size(); ++i) m[i] = 1.0;
  return m;
}

inline std::string token_name(std::int64_t id, const Vocabulary& vocab) {
  if (Vocabulary::is_special(id)) return std::string(Vocabulary::kSpecialNames[static_cast<std::size_t>(id)]);
  return std::string(1, vocab.character(id));
}

}  // namespace datwep::text
