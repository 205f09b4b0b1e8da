#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scenebert/corpus.hpp"
#include "scenebert/scene_lang.hpp"

namespace scenebert {

// Count statistics over a tokenized corpus; smoothing happens at query time.
struct CooccurrenceTable {
  int object_token_count = 0;
  int category_count = 0;
  int grid_cells = 0;
  double alpha = 1.0;
  std::int64_t total_tokens = 0;
  std::vector<std::int64_t> token_counts;  // indexed by token - 2
  std::vector<std::int64_t> pair_counts;   // category x category, row-major, symmetric

  void save(const std::string& path) const;
  static CooccurrenceTable load(const std::string& path);
};

// Token unigrams plus symmetric category pair counts over every unordered
// position pair (a same-category pair bumps its diagonal cell twice).
CooccurrenceTable fit_counts(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                             double alpha = 1.0);

// Minimum over positions of the add-alpha smoothed token marginal.
double unigram_score(const CooccurrenceTable& table, const TokenSequence& tokens);

// Each position's support is the best smoothed conditional P(cat_i | cat_j)
// over the other positions; the score is the minimum support. A single-word
// sentence falls back to the smoothed category marginal.
double cooccurrence_score(const CooccurrenceTable& table, const SceneSentence& sentence);

// Exact predictive confidence under the synthetic world: theme posterior from
// the other words, then the posterior-predictive probability of the word
// itself. A context impossible under every theme gives confidence 0.
std::vector<double> bayes_oracle_confidences(const SyntheticWorldSpec& world,
                                             const SceneSentence& s);

double bayes_oracle_score(const SyntheticWorldSpec& world, const SceneSentence& s);

// Mean negative log predictive probability over every (sentence, position)
// pair; the loss an ideally calibrated masked predictor would attain.
double bayes_oracle_nll(const SyntheticWorldSpec& world, const std::vector<SceneSentence>& corpus);

}  // namespace scenebert
