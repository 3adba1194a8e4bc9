#include "im2tex/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "im2tex/errors.hpp"
#include "im2tex/train.hpp"
#include "json.hpp"

namespace im2tex::metrics {
namespace {

using NGram = std::vector<std::string>;

std::map<NGram, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  std::map<NGram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[NGram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::string join(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

}  // namespace

EditDistance levenshtein(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  EditDistance d;
  d.distance = prev[b.size()];
  const std::size_t longest = std::max(a.size(), b.size());
  d.normalized = longest == 0 ? 0.0 : static_cast<double>(d.distance) / static_cast<double>(longest);
  return d;
}

double bleu4(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty()) return 0.0;
  const std::size_t orders = std::min<std::size_t>(4, candidate.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto cand = ngram_counts(candidate, n);
    const auto ref = ngram_counts(reference, n);
    std::size_t matched = 0;
    for (const auto& [gram, count] : cand) {
      const auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    const double total = static_cast<double>(candidate.size() - n + 1);
    double p = static_cast<double>(matched) / total;
    if (matched == 0) {
      // Unigram misses are not smoothed: no shared token means no credit.
      if (n == 1) return 0.0;
      p = 1.0 / (2.0 * total);
    }
    log_sum += std::log(p);
  }
  const double geo = std::exp(log_sum / static_cast<double>(orders));
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return geo * bp;
}

SampleScore score_sample(std::size_t id, std::span<const std::string> prediction,
                         std::span<const std::string> reference) {
  SampleScore s;
  s.id = id;
  s.prediction = join(prediction);
  s.reference = join(reference);
  const EditDistance d = levenshtein(prediction, reference);
  s.lev = d.distance;
  s.lev_norm = d.normalized;
  s.bleu4 = bleu4(prediction, reference);
  s.exact = std::equal(prediction.begin(), prediction.end(), reference.begin(), reference.end());
  return s;
}

EvalReport summarize(std::span<const SampleScore> scores) {
  if (scores.empty()) throw InputError("evaluate: empty dataset");
  EvalReport r;
  r.n_samples = scores.size();
  double lev = 0.0, bleu = 0.0, exact = 0.0;
  for (const SampleScore& s : scores) {
    lev += s.lev_norm;
    bleu += s.bleu4;
    exact += s.exact ? 1.0 : 0.0;
    if (s.prediction.empty()) ++r.empty_predictions;
  }
  const double n = static_cast<double>(scores.size());
  r.mean_levenshtein_norm = lev / n;
  r.mean_bleu4 = bleu / n;
  r.exact_match_rate = exact / n;
  return r;
}

Evaluation evaluate(std::span<const data::ImageSample> dataset, const text::Vocab& vocab,
                    const Decoder& decoder) {
  if (dataset.empty()) throw InputError("evaluate: empty dataset");
  Evaluation ev;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    text::TokenSequence predicted;
    try {
      predicted = decoder(dataset[i]);
    } catch (const Error& e) {
      throw InputError("sample " + std::to_string(i) + ": " + e.what());
    }
    const auto pred = text::decode_tokens(predicted.ids, vocab);
    const auto ref = text::decode_tokens(dataset[i].target.ids, vocab);
    ev.samples.push_back(score_sample(dataset[i].source_id, pred, ref));
  }
  ev.report = summarize(ev.samples);
  return ev;
}

Evaluation evaluate(const models::Model& model, std::span<const data::ImageSample> dataset,
                    const text::Vocab& vocab) {
  Evaluation ev = evaluate(dataset, vocab, [&](const data::ImageSample& s) {
    return models::greedy_decode(model, s.image);
  });
  ev.report.masked_token_accuracy =
      train::teacher_forced_metrics(model, dataset, false).masked_accuracy;
  return ev;
}

std::string report_to_json(const EvalReport& r) {
  const nlohmann::json j{{"n_samples", r.n_samples},
                         {"mean_levenshtein_norm", r.mean_levenshtein_norm},
                         {"mean_bleu4_sentence_averaged", r.mean_bleu4},
                         {"exact_match_rate", r.exact_match_rate},
                         {"masked_token_accuracy", r.masked_token_accuracy},
                         {"empty_predictions", r.empty_predictions}};
  return j.dump(2) + "\n";
}

std::string predictions_to_jsonl(std::span<const SampleScore> scores) {
  std::string out;
  for (const SampleScore& s : scores) {
    const nlohmann::json j{{"id", s.id},          {"prediction", s.prediction},
                           {"reference", s.reference}, {"lev", s.lev},
                           {"lev_norm", s.lev_norm},   {"bleu4", s.bleu4}};
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace im2tex::metrics
