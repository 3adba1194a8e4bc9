#include "im2tex/textproc.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "im2tex/errors.hpp"

namespace im2tex::text {
namespace {

constexpr std::string_view kSpecialNames[kNumSpecials] = {"<pad>", "<start>", "<end>", "<unk>"};

bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Length of the UTF-8 sequence starting with lead byte c (1 for ASCII or
// malformed bytes).
std::size_t utf8_length(unsigned char c) {
  if (c >= 0xF0) return 4;
  if (c >= 0xE0) return 3;
  if (c >= 0xC0) return 2;
  return 1;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<std::string> tokenize(std::string_view formula) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < formula.size()) {
    const char c = formula[i];
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (c == '\\') {
      if (i + 1 >= formula.size()) throw TokenizeError("trailing lone backslash", i);
      std::size_t j = i + 1;
      if (is_alpha(formula[j])) {
        while (j < formula.size() && is_alpha(formula[j])) ++j;
      } else {
        j += utf8_length(static_cast<unsigned char>(formula[j]));
      }
      j = std::min(j, formula.size());
      tokens.emplace_back(formula.substr(i, j - i));
      i = j;
      continue;
    }
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(c)), formula.size() - i);
    tokens.emplace_back(formula.substr(i, len));
    i += len;
  }
  return tokens;
}

Vocab::Vocab() {
  for (std::string_view name : kSpecialNames) entries_.push_back({std::string(name), 0});
  index();
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!ids_.emplace(entries_[i].symbol, static_cast<int>(i)).second) {
      throw InputError("duplicate vocabulary symbol '" + entries_[i].symbol + "'");
    }
  }
}

Vocab Vocab::build(std::span<const std::string> formulas, std::size_t max_size) {
  if (formulas.empty()) throw InputError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const std::string& f : formulas) {
    for (std::string& tok : tokenize(f)) ++counts[std::move(tok)];
  }
  std::vector<Entry> entries;
  entries.reserve(counts.size());
  for (auto& [sym, n] : counts) entries.push_back({sym, n});
  // counts is already lexicographic, so a stable sort on frequency keeps the
  // tie-break.
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.frequency > b.frequency; });
  if (entries.size() > max_size) entries.resize(max_size);
  return from_entries(std::move(entries));
}

Vocab Vocab::from_entries(std::vector<Entry> entries) {
  Vocab v;
  for (Entry& e : entries) v.entries_.push_back(std::move(e));
  v.index();
  return v;
}

int Vocab::id(std::string_view symbol) const { return find(symbol).value_or(kUnk); }

std::optional<int> Vocab::find(std::string_view symbol) const {
  const auto it = ids_.find(std::string(symbol));
  if (it == ids_.end() || is_special(it->second)) return std::nullopt;
  return it->second;
}

const std::string& Vocab::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) {
    throw IndexError("vocabulary id " + std::to_string(id) + " out of range");
  }
  return entries_[static_cast<std::size_t>(id)].symbol;
}

std::size_t Vocab::frequency(int id) const {
  symbol(id);
  return entries_[static_cast<std::size_t>(id)].frequency;
}

std::size_t Vocab::total_count() const {
  std::size_t total = 0;
  for (const Entry& e : entries_) total += e.frequency;
  return total;
}

std::string Vocab::serialize() const {
  std::string out;
  for (const Entry& e : entries_) {
    out += e.symbol;
    out += '\t';
    out += std::to_string(e.frequency);
    out += '\n';
  }
  return out;
}

Vocab Vocab::parse(std::string_view text) {
  std::vector<Entry> entries;
  std::size_t line_no = 0;
  for (const std::string& line : split_formula_lines(text)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos || tab == 0) throw ParseError("expected '<symbol>\\t<frequency>'", line_no);
    Entry e{line.substr(0, tab), 0};
    const std::string_view num = std::string_view(line).substr(tab + 1);
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), e.frequency);
    if (ec != std::errc() || ptr != num.data() + num.size() || num.empty()) {
      throw ParseError("bad frequency '" + std::string(num) + "'", line_no);
    }
    entries.push_back(std::move(e));
  }
  if (entries.size() < kNumSpecials) throw ParseError("vocabulary is missing the special symbols", line_no);
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (entries[i].symbol != kSpecialNames[i]) {
      throw ParseError("expected special symbol " + std::string(kSpecialNames[i]), i + 1);
    }
  }
  entries.erase(entries.begin(), entries.begin() + kNumSpecials);
  return from_entries(std::move(entries));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) { return parse(read_file(path)); }

TokenSequence encode(std::span<const std::string> tokens, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw ContractError("encode: max_len must leave room for start and end");
  if (tokens.size() > max_len - 2) {
    throw LengthError("formula has " + std::to_string(tokens.size()) + " tokens, room for " +
                          std::to_string(max_len - 2),
                      tokens.size() - (max_len - 2));
  }
  TokenSequence seq;
  seq.ids.assign(max_len, kPad);
  seq.ids[0] = kStart;
  for (std::size_t i = 0; i < tokens.size(); ++i) seq.ids[i + 1] = vocab.id(tokens[i]);
  seq.ids[tokens.size() + 1] = kEnd;
  seq.true_len = tokens.size() + 2;
  return seq;
}

std::vector<std::string> decode_tokens(std::span<const int> ids, const Vocab& vocab) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kEnd) break;
    if (id == kPad || id == kStart) continue;
    out.push_back(id == kUnk ? std::string(kSpecialNames[kUnk]) : vocab.symbol(id));
  }
  return out;
}

std::string decode_ids(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (const std::string& tok : decode_tokens(ids, vocab)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

std::string decode(const TokenSequence& seq, const Vocab& vocab) { return decode_ids(seq.ids, vocab); }

std::string frequency_report(const Vocab& vocab, std::size_t top_n) {
  const auto& entries = vocab.entries();
  const std::size_t n = entries.size() - kNumSpecials;
  const std::size_t shown = std::min(top_n, n);
  std::ostringstream out;
  out << "symbols: " << n << " (+" << kNumSpecials << " specials), tokens: " << vocab.total_count()
      << "\n";
  out << "most frequent:\n";
  for (std::size_t i = 0; i < shown; ++i) {
    const auto& e = entries[kNumSpecials + i];
    out << "  " << e.symbol << "\t" << e.frequency << "\n";
  }
  out << "least frequent:\n";
  for (std::size_t i = 0; i < shown; ++i) {
    const auto& e = entries[entries.size() - 1 - i];
    out << "  " << e.symbol << "\t" << e.frequency << "\n";
  }
  return out.str();
}

std::vector<std::string> split_formula_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    start = end + 1;
  }
  return lines;
}

std::vector<std::string> read_formula_file(const std::filesystem::path& path) {
  return split_formula_lines(read_file(path));
}

}  // namespace im2tex::text
