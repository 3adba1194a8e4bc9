#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace im2tex::text {

inline constexpr int kPad = 0;
inline constexpr int kStart = 1;
inline constexpr int kEnd = 2;
inline constexpr int kUnk = 3;
inline constexpr std::size_t kNumSpecials = 4;

inline constexpr std::size_t kDefaultMaxLen = 151;
inline constexpr std::size_t kDefaultVocabSize = 540;

// Splits a single-line LaTeX formula into symbols:
//   \name    backslash + maximal ASCII-letter run
//   \c       backslash + one other character
//   c        any other character (a UTF-8 sequence counts as one)
// Whitespace separates tokens and is never a token itself. A trailing lone
// backslash throws TokenizeError carrying its byte offset.
std::vector<std::string> tokenize(std::string_view formula);

// Symbol <-> id map. Ids 0..3 are <pad>, <start>, <end>, <unk>; the rest are
// ordered by descending corpus frequency, ties broken lexicographically.
class Vocab {
 public:
  struct Entry {
    std::string symbol;
    std::size_t frequency = 0;
  };

  Vocab();

  // Keeps the max_size most frequent symbols of the tokenised corpus.
  static Vocab build(std::span<const std::string> formulas, std::size_t max_size = kDefaultVocabSize);
  // Non-special entries in the given order.
  static Vocab from_entries(std::vector<Entry> entries);

  std::size_t size() const { return entries_.size(); }
  // kUnk for unknown symbols.
  int id(std::string_view symbol) const;
  std::optional<int> find(std::string_view symbol) const;
  const std::string& symbol(int id) const;
  std::size_t frequency(int id) const;
  static bool is_special(int id) { return id >= 0 && id < static_cast<int>(kNumSpecials); }
  const std::vector<Entry>& entries() const { return entries_; }
  // Sum of all recorded frequencies.
  std::size_t total_count() const;

  // "<symbol>\t<frequency>" per line, specials first with frequency 0.
  std::string serialize() const;
  static Vocab parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

 private:
  void index();

  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> ids_;
};

// ids has exactly max_len entries: start, symbol ids, end, then pad.
// Sequences produced by decoding may lack the end marker when generation hit
// the length cap; true_len is then max_len.
struct TokenSequence {
  std::vector<int> ids;
  std::size_t true_len = 0;

  bool operator==(const TokenSequence&) const = default;
};

// Throws LengthError when tokens do not fit in max_len - 2 slots.
TokenSequence encode(std::span<const std::string> tokens, const Vocab& vocab,
                     std::size_t max_len = kDefaultMaxLen);

// Space-joined non-special symbols up to the first end marker; unknown ids
// render as "<unk>".
std::string decode(const TokenSequence& seq, const Vocab& vocab);
std::string decode_ids(std::span<const int> ids, const Vocab& vocab);
// Same walk, returning the symbols.
std::vector<std::string> decode_tokens(std::span<const int> ids, const Vocab& vocab);

// Most and least frequent non-special symbols, one per line.
std::string frequency_report(const Vocab& vocab, std::size_t top_n);

// One formula per line; line number (0-based) is the formula id.
std::vector<std::string> read_formula_file(const std::filesystem::path& path);
std::vector<std::string> split_formula_lines(std::string_view text);

}  // namespace im2tex::text
