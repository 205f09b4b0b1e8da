#include "scenebert/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "scenebert/util.hpp"

namespace scenebert {

namespace {

void check_table(const CooccurrenceTable& t) {
  if (t.object_token_count < 1 || t.category_count < 1 || t.grid_cells < 1 ||
      t.object_token_count != t.category_count * t.grid_cells)
    throw std::invalid_argument("baselines: inconsistent table dimensions");
  if (t.alpha <= 0.0) throw std::invalid_argument("baselines: smoothing alpha must be positive");
  if (t.token_counts.size() != static_cast<std::size_t>(t.object_token_count) ||
      t.pair_counts.size() !=
          static_cast<std::size_t>(t.category_count) * static_cast<std::size_t>(t.category_count))
    throw std::invalid_argument("baselines: table count arrays have the wrong size");
}

int token_category(const CooccurrenceTable& t, int token) {
  const int obj = token - Vocabulary::kFirstObjectToken;
  if (obj < 0 || obj >= t.object_token_count)
    throw std::out_of_range("baselines: token " + std::to_string(token) +
                            " is not an object token of this table");
  return obj / t.grid_cells;
}

// Probability of one word under one theme.
double word_prob(const SyntheticWorldSpec& world, int theme, const SceneWord& w) {
  if (w.category_index / world.group_size != theme) return 0.0;
  const double cat_p = 1.0 / world.group_size;
  const double loc_p = w.cell == world.home_cell(w.category_index)
                           ? world.home_prob
                           : (1.0 - world.home_prob) / (world.grid.cell_count() - 1);
  return cat_p * loc_p;
}

void check_world_sentence(const SyntheticWorldSpec& world, const SceneSentence& s) {
  for (const SceneWord& w : s) {
    if (w.category_index < 0 || w.category_index >= world.category_count())
      throw std::out_of_range("baselines: category " + std::to_string(w.category_index) +
                              " outside the synthetic world");
    if (w.cell < 1 || w.cell > world.grid.cell_count())
      throw std::out_of_range("baselines: cell " + std::to_string(w.cell) +
                              " outside the synthetic world grid");
  }
}

}  // namespace

CooccurrenceTable fit_counts(const std::vector<TokenSequence>& corpus, const Vocabulary& vocab,
                             double alpha) {
  CooccurrenceTable t;
  t.object_token_count = vocab.object_token_count();
  t.category_count = vocab.category_count();
  t.grid_cells = vocab.grid().cell_count();
  t.alpha = alpha;
  t.token_counts.assign(static_cast<std::size_t>(t.object_token_count), 0);
  t.pair_counts.assign(
      static_cast<std::size_t>(t.category_count) * static_cast<std::size_t>(t.category_count), 0);
  check_table(t);

  for (const TokenSequence& tokens : corpus) {
    for (int tok : tokens) {
      const int obj = tok - Vocabulary::kFirstObjectToken;
      if (obj < 0 || obj >= t.object_token_count)
        throw std::out_of_range("baselines: token " + std::to_string(tok) +
                                " outside the vocabulary while fitting");
      ++t.token_counts[static_cast<std::size_t>(obj)];
      ++t.total_tokens;
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const int ci = token_category(t, tokens[i]);
      for (std::size_t j = i + 1; j < tokens.size(); ++j) {
        const int cj = token_category(t, tokens[j]);
        ++t.pair_counts[static_cast<std::size_t>(ci) * t.category_count + cj];
        ++t.pair_counts[static_cast<std::size_t>(cj) * t.category_count + ci];
      }
    }
  }
  return t;
}

double unigram_score(const CooccurrenceTable& table, const TokenSequence& tokens) {
  check_table(table);
  if (tokens.empty()) throw std::invalid_argument("baselines: cannot score an empty sentence");
  const double denom =
      static_cast<double>(table.total_tokens) + table.alpha * table.object_token_count;
  double score = 1.0;
  for (int tok : tokens) {
    const int obj = tok - Vocabulary::kFirstObjectToken;
    if (obj < 0 || obj >= table.object_token_count)
      throw std::out_of_range("baselines: token " + std::to_string(tok) +
                              " is not an object token of this table");
    const double p =
        (static_cast<double>(table.token_counts[static_cast<std::size_t>(obj)]) + table.alpha) /
        denom;
    score = std::min(score, p);
  }
  return score;
}

double cooccurrence_score(const CooccurrenceTable& table, const SceneSentence& sentence) {
  check_table(table);
  if (sentence.empty()) throw std::invalid_argument("baselines: cannot score an empty sentence");
  const int c = table.category_count;
  std::vector<std::int64_t> col_sum(static_cast<std::size_t>(c), 0);
  for (int a = 0; a < c; ++a)
    for (int b = 0; b < c; ++b)
      col_sum[static_cast<std::size_t>(b)] +=
          table.pair_counts[static_cast<std::size_t>(a) * c + b];

  std::vector<int> cats;
  cats.reserve(sentence.size());
  for (const SceneWord& w : sentence) {
    if (w.category_index < 0 || w.category_index >= c)
      throw std::out_of_range("baselines: category " + std::to_string(w.category_index) +
                              " outside this table");
    cats.push_back(w.category_index);
  }

  if (cats.size() == 1) {
    std::int64_t cat_total = 0;
    for (int cell = 0; cell < table.grid_cells; ++cell)
      cat_total += table.token_counts[static_cast<std::size_t>(cats[0]) * table.grid_cells + cell];
    const double denom = static_cast<double>(table.total_tokens) + table.alpha * c;
    return (static_cast<double>(cat_total) + table.alpha) / denom;
  }

  double score = 1.0;
  for (std::size_t i = 0; i < cats.size(); ++i) {
    double support = 0.0;
    for (std::size_t j = 0; j < cats.size(); ++j) {
      if (j == i) continue;
      const double cond =
          (static_cast<double>(
               table.pair_counts[static_cast<std::size_t>(cats[i]) * c + cats[j]]) +
           table.alpha) /
          (static_cast<double>(col_sum[static_cast<std::size_t>(cats[j])]) + table.alpha * c);
      support = std::max(support, cond);
    }
    score = std::min(score, support);
  }
  return score;
}

void CooccurrenceTable::save(const std::string& path) const {
  check_table(*this);
  const nlohmann::json j{{"object_token_count", object_token_count},
                         {"category_count", category_count},
                         {"grid_cells", grid_cells},
                         {"alpha", alpha},
                         {"total_tokens", total_tokens},
                         {"token_counts", token_counts},
                         {"pair_counts", pair_counts}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("baselines: cannot write " + path);
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("baselines: write failed for " + path);
}

CooccurrenceTable CooccurrenceTable::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("baselines: malformed table file " + path + ": " + e.what());
  }
  CooccurrenceTable t;
  t.object_token_count = j.at("object_token_count").get<int>();
  t.category_count = j.at("category_count").get<int>();
  t.grid_cells = j.at("grid_cells").get<int>();
  t.alpha = j.at("alpha").get<double>();
  t.total_tokens = j.at("total_tokens").get<std::int64_t>();
  t.token_counts = j.at("token_counts").get<std::vector<std::int64_t>>();
  t.pair_counts = j.at("pair_counts").get<std::vector<std::int64_t>>();
  check_table(t);
  return t;
}

std::vector<double> bayes_oracle_confidences(const SyntheticWorldSpec& world,
                                             const SceneSentence& s) {
  world.validate();
  check_world_sentence(world, s);
  if (s.empty()) throw std::invalid_argument("baselines: cannot score an empty sentence");

  std::vector<double> out(s.size(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<double> likelihood(static_cast<std::size_t>(world.n_themes), 1.0);
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j == i) continue;
      for (int theme = 0; theme < world.n_themes; ++theme)
        likelihood[static_cast<std::size_t>(theme)] *= word_prob(world, theme, s[j]);
    }
    double denom = 0.0;
    for (double l : likelihood) denom += l;
    if (denom == 0.0) {
      out[i] = 0.0;  // the context itself is impossible under every theme
      continue;
    }
    double conf = 0.0;
    for (int theme = 0; theme < world.n_themes; ++theme)
      conf += likelihood[static_cast<std::size_t>(theme)] / denom * word_prob(world, theme, s[i]);
    out[i] = conf;
  }
  return out;
}

double bayes_oracle_score(const SyntheticWorldSpec& world, const SceneSentence& s) {
  const std::vector<double> conf = bayes_oracle_confidences(world, s);
  return *std::min_element(conf.begin(), conf.end());
}

double bayes_oracle_nll(const SyntheticWorldSpec& world,
                        const std::vector<SceneSentence>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("baselines: empty corpus");
  double sum = 0.0;
  std::int64_t count = 0;
  for (const SceneSentence& s : corpus) {
    const std::vector<double> conf = bayes_oracle_confidences(world, s);
    for (double c : conf) {
      if (c <= 0.0)
        throw std::domain_error("baselines: impossible context in a world-generated corpus");
      sum += -std::log(c);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

}  // namespace scenebert
