#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "im2tex/errors.hpp"
#include "im2tex/rng.hpp"
#include "im2tex/textproc.hpp"

using namespace im2tex;
using namespace im2tex::text;
using Tokens = std::vector<std::string>;

TEST_SUITE("tokenize") {
  TEST_CASE("grammar examples") {
    CHECK(tokenize("\\frac{a}{b}") == Tokens{"\\frac", "{", "a", "}", "{", "b", "}"});
    CHECK(tokenize("x^2") == Tokens{"x", "^", "2"});
    CHECK(tokenize("\\alpha +\\beta") == Tokens{"\\alpha", "+", "\\beta"});
  }

  TEST_CASE("escapes, digits and whitespace") {
    CHECK(tokenize("\\{ 12 \\,") == Tokens{"\\{", "1", "2", "\\,"});
    CHECK(tokenize("\\alpha2") == Tokens{"\\alpha", "2"});
    CHECK(tokenize("  \t ").empty());
    CHECK(tokenize("a\tb\nc") == Tokens{"a", "b", "c"});
  }

  TEST_CASE("multi-byte characters stay whole") {
    CHECK(tokenize("\xCE\xB1+1") == Tokens{"\xCE\xB1", "+", "1"});
  }

  TEST_CASE("trailing lone backslash reports its offset") {
    try {
      tokenize("x + \\");
      FAIL("expected TokenizeError");
    } catch (const TokenizeError& e) {
      CHECK(e.offset() == 4);
    }
  }
}

TEST_SUITE("vocab") {
  TEST_CASE("direct count and tie-break") {
    const std::vector<std::string> corpus{"a a b"};
    const Vocab v = Vocab::build(corpus, 540);
    REQUIRE(v.size() == 6);
    CHECK(v.symbol(4) == "a");
    CHECK(v.symbol(5) == "b");
    CHECK(v.frequency(4) == 2);
    CHECK(v.frequency(5) == 1);
    const std::vector<std::string> tie{"b a"};
    const Vocab t = Vocab::build(tie, 540);
    CHECK(t.symbol(4) == "a");
    CHECK(t.symbol(5) == "b");
  }

  TEST_CASE("specials occupy ids 0-3") {
    const Vocab v;
    CHECK(v.symbol(kPad) == "<pad>");
    CHECK(v.symbol(kStart) == "<start>");
    CHECK(v.symbol(kEnd) == "<end>");
    CHECK(v.symbol(kUnk) == "<unk>");
    CHECK(v.id("<pad>") == kUnk);  // specials are not symbols
  }

  TEST_CASE("truncation keeps the most frequent symbols") {
    // Symbol s<i> occurs i+1 times, so s0..s59 are the 60 rarest.
    std::vector<std::string> corpus;
    std::map<std::string, std::size_t> expected;
    for (int i = 0; i < 600; ++i) {
      const std::string sym = "\\s" + std::string(1, static_cast<char>('a' + i / 26 % 26)) +
                              std::string(1, static_cast<char>('a' + i % 26)) +
                              std::string(1, static_cast<char>('a' + i / 676));
      std::string line;
      for (int r = 0; r <= i; ++r) line += sym + " ";
      corpus.push_back(line);
      expected[sym] = static_cast<std::size_t>(i + 1);
    }
    const Vocab v = Vocab::build(corpus, 540);
    CHECK(v.size() == 544);
    std::size_t min_kept = SIZE_MAX;
    for (std::size_t id = kNumSpecials; id < v.size(); ++id) {
      min_kept = std::min(min_kept, v.frequency(static_cast<int>(id)));
      CHECK(expected.at(v.symbol(static_cast<int>(id))) == v.frequency(static_cast<int>(id)));
    }
    CHECK(min_kept == 61);
  }

  TEST_CASE("empty corpus") { CHECK_THROWS_AS(Vocab::build({}, 10), InputError); }

  TEST_CASE("file format round trip and errors") {
    const std::vector<std::string> corpus{"\\frac{a}{b} + a", "x^2"};
    const Vocab v = Vocab::build(corpus);
    const std::string text = v.serialize();
    CHECK(text.rfind("<pad>\t0\n<start>\t0\n<end>\t0\n<unk>\t0\n", 0) == 0);
    const Vocab back = Vocab::parse(text);
    CHECK(back.serialize() == text);
    CHECK_THROWS_AS(Vocab::parse("a\t1\n"), ParseError);
    CHECK_THROWS_AS(Vocab::parse("<pad>\t0\n<start>\t0\n<end>\t0\n<unk>\t0\nx\tmany\n"), ParseError);
  }

  TEST_CASE("frequency table sums to the corpus token count") {
    Rng rng(12);
    const Tokens alphabet{"a", "b", "\\pi", "+", "1", "{", "}"};
    std::vector<std::string> corpus;
    std::size_t total = 0;
    for (int i = 0; i < 200; ++i) {
      std::string f;
      const std::size_t n = rng.below(10);
      for (std::size_t t = 0; t < n; ++t) f += alphabet[rng.below(alphabet.size())] + " ";
      total += n;
      corpus.push_back(f);
    }
    CHECK(Vocab::build(corpus).total_count() == total);
  }
}

TEST_SUITE("encode/decode") {
  const Vocab vocab = Vocab::from_entries({{"a", 3}, {"x", 2}, {"^", 1}, {"2", 1}});

  TEST_CASE("layout") {
    const TokenSequence empty = encode(Tokens{}, vocab);
    CHECK(empty.ids.size() == 151);
    CHECK(empty.true_len == 2);
    CHECK(empty.ids[0] == kStart);
    CHECK(empty.ids[1] == kEnd);
    for (std::size_t i = 2; i < 151; ++i) CHECK(empty.ids[i] == kPad);

    const TokenSequence one = encode(Tokens{"a"}, vocab);
    CHECK(std::vector<int>(one.ids.begin(), one.ids.begin() + 4) == std::vector<int>{1, 4, 2, 0});
    CHECK(one.true_len == 3);

    const TokenSequence full = encode(Tokens(149, "x"), vocab);
    CHECK(full.true_len == 151);
    CHECK(full.ids[150] == kEnd);
    CHECK(std::count(full.ids.begin(), full.ids.end(), kPad) == 0);
  }

  TEST_CASE("over-length carries the overflow") {
    try {
      encode(Tokens(152, "a"), vocab);
      FAIL("expected LengthError");
    } catch (const LengthError& e) {
      CHECK(e.overflow() == 3);
    }
  }

  TEST_CASE("unknown symbols map to unk and decode as a marker") {
    const TokenSequence s = encode(Tokens{"a", "\\zeta"}, vocab);
    CHECK(s.ids[2] == kUnk);
    CHECK(decode(s, vocab) == "a <unk>");
  }

  TEST_CASE("decode examples") {
    CHECK(decode(encode(tokenize("x ^ 2"), vocab), vocab) == "x ^ 2");
    CHECK(decode(TokenSequence{std::vector<int>(151, kPad), 0}, vocab).empty());
    const std::vector<int> early_end{kStart, 4, kEnd, 5, 5};
    CHECK(decode_ids(early_end, vocab) == "a");
  }

  TEST_CASE("round trip over random in-vocabulary formulas") {
    Rng rng(2);
    const Tokens alphabet{"a", "x", "^", "2"};
    for (int trial = 0; trial < 1000; ++trial) {
      Tokens toks;
      const std::size_t n = rng.below(150);
      std::string formula;
      for (std::size_t t = 0; t < n; ++t) {
        toks.push_back(alphabet[rng.below(alphabet.size())]);
        formula += toks.back();
        formula += rng.below(2) ? " " : "";
      }
      std::string joined;
      for (const auto& t : toks) joined += (joined.empty() ? "" : " ") + t;
      CHECK(decode(encode(tokenize(formula), vocab), vocab) == joined);
    }
  }

  TEST_CASE("encode is injective") {
    Rng rng(3);
    const Tokens alphabet{"a", "x", "^", "2"};
    std::map<std::vector<int>, Tokens> seen;
    for (int trial = 0; trial < 500; ++trial) {
      Tokens toks;
      const std::size_t n = rng.below(6);
      for (std::size_t t = 0; t < n; ++t) toks.push_back(alphabet[rng.below(4)]);
      const auto [it, inserted] = seen.emplace(encode(toks, vocab).ids, toks);
      if (!inserted) CHECK(it->second == toks);
    }
  }
}

TEST_CASE("frequency report lists both ends") {
  const std::vector<std::string> corpus{"a a a b b c"};
  const std::string report = frequency_report(Vocab::build(corpus), 1);
  CHECK(report.find("most frequent:\n  a\t3") != std::string::npos);
  CHECK(report.find("least frequent:\n  c\t1") != std::string::npos);
}

TEST_CASE("formula lines keep their 0-based ids") {
  const auto lines = split_formula_lines("x\r\n\ny^2\n");
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "x");
  CHECK(lines[1].empty());
  CHECK(lines[2] == "y^2");
}
