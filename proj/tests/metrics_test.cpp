#include <array>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "im2tex/errors.hpp"
#include "im2tex/metrics.hpp"
#include "im2tex/rng.hpp"
#include "json.hpp"

using namespace im2tex;
using namespace im2tex::metrics;

namespace {

TokenList toks(const std::string& s) {
  TokenList out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

TokenList chars(const std::string& s) {
  TokenList out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

// The textbook recursive definition.
std::size_t lev_rec(const TokenList& a, std::size_t i, const TokenList& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = lev_rec(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  return std::min({sub, lev_rec(a, i + 1, b, j) + 1, lev_rec(a, i, b, j + 1) + 1});
}

std::vector<TokenList> all_lists(std::size_t max_len) {
  std::vector<TokenList> out{{}};
  std::vector<TokenList> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<TokenList> next;
    for (const auto& l : frontier) {
      for (const char* s : {"a", "b", "c"}) {
        TokenList x = l;
        x.push_back(s);
        next.push_back(x);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

TokenList random_list(Rng& rng, std::size_t len, int alphabet) {
  TokenList out;
  for (std::size_t i = 0; i < len; ++i) out.push_back(std::string(1, static_cast<char>('a' + rng.below(static_cast<std::uint64_t>(alphabet)))));
  return out;
}

}  // namespace

TEST_SUITE("levenshtein") {
  TEST_CASE("examples") {
    const TokenList x = toks("\\frac { a } { b }");
    CHECK(levenshtein(x, x).distance == 0);
    CHECK(levenshtein(x, x).normalized == 0.0);
    const TokenList empty;
    CHECK(levenshtein(empty, x).distance == x.size());
    CHECK(levenshtein(empty, x).normalized == 1.0);
    CHECK(levenshtein(empty, empty).normalized == 0.0);
    const EditDistance k = levenshtein(chars("kitten"), chars("sitting"));
    CHECK(k.distance == 3);
    CHECK(k.normalized == 3.0 / 7.0);
  }

  TEST_CASE("dynamic programme equals the recursion on every pair up to length 6") {
    const auto lists = all_lists(6);
    REQUIRE(lists.size() == 1093);
    std::size_t checked = 0;
    for (const auto& a : lists) {
      for (const auto& b : lists) {
        // Recursive definition, memoized so 1.2M pairs stay cheap.
        std::array<std::array<int, 7>, 7> memo;
        for (auto& row : memo) row.fill(-1);
        std::function<std::size_t(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t j) -> std::size_t {
          if (i == a.size()) return b.size() - j;
          if (j == b.size()) return a.size() - i;
          if (memo[i][j] >= 0) return static_cast<std::size_t>(memo[i][j]);
          const std::size_t v = std::min({rec(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), rec(i + 1, j) + 1, rec(i, j + 1) + 1});
          memo[i][j] = static_cast<int>(v);
          return v;
        };
        REQUIRE(levenshtein(a, b).distance == rec(0, 0));
        ++checked;
      }
    }
    CHECK(checked == 1093u * 1093u);
    // Spot-check the memo against the unmemoized recursion.
    Rng rng(4);
    for (int t = 0; t < 300; ++t) {
      const auto& a = lists[rng.below(lists.size())];
      const auto& b = lists[rng.below(lists.size())];
      CHECK(levenshtein(a, b).distance == lev_rec(a, 0, b, 0));
    }
  }

  TEST_CASE("metric axioms on random triples") {
    Rng rng(5);
    for (int t = 0; t < 2000; ++t) {
      const TokenList a = random_list(rng, rng.below(7), 3), b = random_list(rng, rng.below(7), 3),
                      c = random_list(rng, rng.below(7), 3);
      const auto ab = levenshtein(a, b), ba = levenshtein(b, a);
      CHECK(ab.distance == ba.distance);
      CHECK((ab.distance == 0) == (a == b));
      CHECK(levenshtein(a, c).distance <= ab.distance + levenshtein(b, c).distance);
      CHECK(ab.normalized >= 0.0);
      CHECK(ab.normalized <= 1.0);
    }
  }
}

TEST_SUITE("bleu") {
  TEST_CASE("hand-computed n-gram example") {
    const double s = bleu4(toks("a b c d e"), toks("a b c d f"));
    CHECK(std::abs(s - std::pow(0.2, 0.25)) <= 1e-9);
    CHECK(std::abs(s - 0.66874) <= 1e-5);
  }

  TEST_CASE("identity scores one") {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
      const TokenList x = random_list(rng, 4 + rng.below(30), 8);
      CHECK(bleu4(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("disjoint, empty, brevity and short candidates") {
    CHECK(bleu4(toks("a b c d e f"), toks("u v w x y z")) < 0.05);
    CHECK(bleu4({}, toks("a b")) == 0.0);
    // Brevity: perfect 4-gram precision but half the reference length.
    const double bp = bleu4(toks("a b c d"), toks("a b c d e f g h"));
    CHECK(bp == doctest::Approx(std::exp(1.0 - 2.0)).epsilon(1e-12));
    // Two tokens: only unigram and bigram orders, both exact.
    CHECK(bleu4(toks("a b"), toks("a b")) == doctest::Approx(1.0));
    // Smoothed missing orders: "a b x c" vs "a b c d": p1 3/4, p2 1/3, p3 smoothed 1/4, p4 smoothed 1/2.
    const double smooth = bleu4(toks("a b x c"), toks("a b c d"));
    CHECK(smooth == doctest::Approx(std::pow(0.75 * (1.0 / 3.0) * 0.25 * 0.5, 0.25)).epsilon(1e-12));
  }

  TEST_CASE("range") {
    Rng rng(10);
    for (int t = 0; t < 500; ++t) {
      const double s = bleu4(random_list(rng, rng.below(10), 4), random_list(rng, 1 + rng.below(10), 4));
      CHECK(s >= 0.0);
      CHECK(s <= 1.0 + 1e-12);
    }
  }
}

TEST_SUITE("evaluate") {
  const data::Dataset ds = data::make_synthetic_dataset({3, 6, 6, {}});

  TEST_CASE("perfect decoder") {
    const Evaluation ev = evaluate(ds.samples, ds.vocab, [](const data::ImageSample& s) { return s.target; });
    CHECK(ev.report.n_samples == 3);
    CHECK(ev.report.mean_levenshtein_norm == 0.0);
    CHECK(ev.report.exact_match_rate == 1.0);
    for (const auto& s : ev.samples) {
      CHECK(s.exact);
      CHECK(s.prediction == s.reference);
    }
  }

  TEST_CASE("model that ends immediately") {
    models::Model m = models::make_model(models::make_config(models::Arch::cnn_gru, models::Preset::desk, ds.vocab.size()), 1);
    for (double& w : m.params.at("dec.out.w").mutable_values()) w = 0.0;
    m.params.at("dec.out.b").mutable_values()[text::kEnd] = 50.0;
    const Evaluation ev = evaluate(m, ds.samples, ds.vocab);
    CHECK(ev.report.mean_levenshtein_norm == 1.0);
    CHECK(ev.report.mean_bleu4 == 0.0);
    CHECK(ev.report.empty_predictions == 3);
    CHECK(ev.report.exact_match_rate == 0.0);
    CHECK(ev.report.masked_token_accuracy > 0.0);  // the end label itself is predicted
  }

  TEST_CASE("report means recomputed from per-sample values") {
    // Deterministic corruptions of the first two samples; the third is kept.
    const Evaluation ev = evaluate(ds.samples, ds.vocab, [&](const data::ImageSample& s) {
      text::TokenSequence t = s.target;
      if (s.source_id == ds.samples[0].source_id) {
        t.ids[1] = t.ids[2];
      } else if (s.source_id == ds.samples[1].source_id) {
        t.ids[1] = 4;
      }
      return t;
    });
    double lev = 0, bleu = 0, exact = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const auto pred = toks(ev.samples[i].prediction), ref = toks(ev.samples[i].reference);
      CHECK(ev.samples[i].lev == levenshtein(pred, ref).distance);
      lev += levenshtein(pred, ref).normalized;
      bleu += bleu4(pred, ref);
      exact += pred == ref ? 1 : 0;
    }
    CHECK(ev.report.mean_levenshtein_norm == doctest::Approx(lev / 3));
    CHECK(ev.report.mean_bleu4 == doctest::Approx(bleu / 3));
    CHECK(ev.report.exact_match_rate == doctest::Approx(exact / 3));
    CHECK(ev.report.exact_match_rate < 1.0);

    const auto report = nlohmann::json::parse(report_to_json(ev.report));
    CHECK(report.at("n_samples") == 3);
    CHECK(report.contains("mean_bleu4_sentence_averaged"));
    const std::string lines = predictions_to_jsonl(ev.samples);
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 3);
    const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
    for (const char* key : {"id", "prediction", "reference", "lev", "lev_norm", "bleu4"}) CHECK(first.contains(key));
  }

  TEST_CASE("errors carry the sample index") {
    try {
      evaluate(ds.samples, ds.vocab, [&](const data::ImageSample& s) -> text::TokenSequence {
        if (s.source_id == ds.samples[2].source_id) throw LengthError("boom", 1);
        return s.target;
      });
      FAIL("expected an error");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("sample 2") != std::string::npos);
    }
    CHECK_THROWS_AS(evaluate({}, ds.vocab, [](const data::ImageSample& s) { return s.target; }), InputError);
  }
}
