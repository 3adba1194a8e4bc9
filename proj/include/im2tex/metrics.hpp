#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "im2tex/dataio.hpp"
#include "im2tex/models.hpp"

namespace im2tex::metrics {

using TokenList = std::vector<std::string>;

struct EditDistance {
  std::size_t distance = 0;
  double normalized = 0.0;  // distance / max(len(a), len(b)); 0 when both empty
};
EditDistance levenshtein(std::span<const std::string> a, std::span<const std::string> b);

// Sentence-level BLEU-4 against a single reference. Zero precisions for
// n >= 2 are smoothed to 1/(2*count); candidates shorter than four tokens use
// only the realizable orders. An empty candidate scores 0.
double bleu4(std::span<const std::string> candidate, std::span<const std::string> reference);

struct SampleScore {
  std::size_t id = 0;
  std::string prediction;
  std::string reference;
  std::size_t lev = 0;
  double lev_norm = 0.0;
  double bleu4 = 0.0;
  bool exact = false;
};
SampleScore score_sample(std::size_t id, std::span<const std::string> prediction,
                         std::span<const std::string> reference);

struct EvalReport {
  std::size_t n_samples = 0;
  double mean_levenshtein_norm = 0.0;
  double mean_bleu4 = 0.0;  // sentence-averaged
  double exact_match_rate = 0.0;
  double masked_token_accuracy = 0.0;
  std::size_t empty_predictions = 0;  // scored 0 BLEU by convention
};

// Arithmetic means of per-sample scores. masked_token_accuracy is left for
// the caller.
EvalReport summarize(std::span<const SampleScore> scores);

struct Evaluation {
  EvalReport report;
  std::vector<SampleScore> samples;
};
using Decoder = std::function<text::TokenSequence(const data::ImageSample&)>;
// Scores whatever `decoder` emits; masked_token_accuracy stays 0.
Evaluation evaluate(std::span<const data::ImageSample> dataset, const text::Vocab& vocab,
                    const Decoder& decoder);

// Greedy-decodes every sample and scores it against its target.
Evaluation evaluate(const models::Model& model, std::span<const data::ImageSample> dataset,
                    const text::Vocab& vocab);

std::string report_to_json(const EvalReport& report);
// One JSON object per line: id, prediction, reference, lev, lev_norm, bleu4.
std::string predictions_to_jsonl(std::span<const SampleScore> scores);

}  // namespace im2tex::metrics
