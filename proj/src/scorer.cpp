#include "scenebert/scorer.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace scenebert {

namespace {

// Confidence of the original token at one masked position, from the model's
// full output row.
double strict_confidence(const Eigen::RowVectorXf& row, int token, int k, int object_tokens) {
  const double p = static_cast<double>(row(token));
  if (k == 0 || k >= object_tokens) return p;
  int ahead = 0;
  for (int j = Vocabulary::kFirstObjectToken; j < Vocabulary::kFirstObjectToken + object_tokens;
       ++j)
    if (row(j) > row(token) || (row(j) == row(token) && j < token)) ++ahead;
  return ahead < k ? p : 0.0;
}

double relax_confidence(const Eigen::RowVectorXf& row, int token, int k, int grid_cells,
                        int category_count) {
  std::vector<double> mass(static_cast<std::size_t>(category_count), 0.0);
  for (int c = 0; c < category_count; ++c) {
    double m = 0.0;
    for (int cell = 0; cell < grid_cells; ++cell)
      m += static_cast<double>(row(Vocabulary::kFirstObjectToken + c * grid_cells + cell));
    mass[static_cast<std::size_t>(c)] = m;
  }
  const int cat = (token - Vocabulary::kFirstObjectToken) / grid_cells;
  const double p = mass[static_cast<std::size_t>(cat)];
  if (k == 0 || k >= category_count) return p;
  int ahead = 0;
  for (int c = 0; c < category_count; ++c)
    if (mass[static_cast<std::size_t>(c)] > p ||
        (mass[static_cast<std::size_t>(c)] == p && c < cat)) ++ahead;
  return ahead < k ? p : 0.0;
}

ConsistencyReport score_sentence(const ModelParams<float>& params, const ModelConfig& cfg,
                                 const TokenSequence& tokens, ScoreVariant variant, int k,
                                 int grid_cells) {
  if (tokens.empty()) throw std::invalid_argument("scorer: cannot score an empty sentence");
  if (k < 0) throw std::invalid_argument("scorer: k must be nonnegative (0 means the full list)");
  const int object_tokens = cfg.object_token_count();
  int category_count = 0;
  if (variant == ScoreVariant::relax) {
    if (grid_cells < 1 || object_tokens % grid_cells != 0)
      throw std::invalid_argument("scorer: grid cell count does not divide the object tokens");
    category_count = object_tokens / grid_cells;
  }

  ConsistencyReport report;
  report.variant = variant;
  report.k = k == 0 ? (variant == ScoreVariant::strict ? object_tokens
                                                       : category_count)
                    : std::min(k, variant == ScoreVariant::strict ? object_tokens
                                                                  : category_count);
  report.score = 1.0;
  report.per_position.reserve(tokens.size());

  // All leave-one-out maskings of the sentence in one packed batch.
  std::vector<TrainExample> maskings;
  maskings.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    MaskVector vis(tokens.size(), 1);
    vis[i] = 0;
    maskings.push_back(TrainExample{tokens, std::move(vis)});
  }
  const Mat<float> dists = masked_distributions<float>(params, cfg, maskings);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Eigen::RowVectorXf row = dists.row(static_cast<Eigen::Index>(i));
    const double c = variant == ScoreVariant::strict
                         ? strict_confidence(row, tokens[i], k, object_tokens)
                         : relax_confidence(row, tokens[i], k, grid_cells, category_count);
    report.per_position.push_back(
        PositionConfidence{static_cast<int>(i), tokens[i], c});
    report.score = std::min(report.score, c);
  }
  return report;
}

}  // namespace

std::string score_variant_name(ScoreVariant v) {
  return v == ScoreVariant::strict ? "strict" : "relax";
}

ScoreVariant score_variant_from_name(const std::string& name) {
  if (name == "strict") return ScoreVariant::strict;
  if (name == "relax") return ScoreVariant::relax;
  throw std::invalid_argument("scorer: unknown variant '" + name + "'");
}

ConsistencyReport consistency_score_strict(const ModelParams<float>& params,
                                           const ModelConfig& cfg, const TokenSequence& tokens,
                                           int k) {
  return score_sentence(params, cfg, tokens, ScoreVariant::strict, k, 0);
}

ConsistencyReport consistency_score_relax(const ModelParams<float>& params,
                                          const ModelConfig& cfg, int grid_cells,
                                          const TokenSequence& tokens, int k) {
  return score_sentence(params, cfg, tokens, ScoreVariant::relax, k, grid_cells);
}

std::vector<ScoreOutcome> score_batch(const ModelParams<float>& params, const ModelConfig& cfg,
                                      const std::vector<TokenSequence>& batch,
                                      ScoreVariant variant, int k, int grid_cells, int workers) {
  std::vector<ScoreOutcome> out(batch.size());
  if (batch.empty()) return out;
  const std::size_t n_threads =
      std::max<std::size_t>(1, std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)),
                                                     batch.size()));
  const auto run_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      out[i].index = i;
      try {
        out[i].report = score_sentence(params, cfg, batch[i], variant, k, grid_cells);
        out[i].ok = true;
      } catch (const std::exception& e) {
        out[i].ok = false;
        out[i].error = e.what();
      }
    }
  };
  if (n_threads == 1) {
    run_range(0, batch.size());
    return out;
  }
  std::vector<std::thread> threads;
  threads.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    const std::size_t lo = batch.size() * t / n_threads;
    const std::size_t hi = batch.size() * (t + 1) / n_threads;
    threads.emplace_back(run_range, lo, hi);
  }
  for (std::thread& t : threads) t.join();
  return out;
}

std::string report_json_line(const std::string& scene_id, const ConsistencyReport& report) {
  nlohmann::json per = nlohmann::json::array();
  for (const PositionConfidence& pc : report.per_position)
    per.push_back({{"position", pc.position}, {"token", pc.token}, {"confidence", pc.confidence}});
  const nlohmann::json j{{"scene_id", scene_id},
                         {"variant", score_variant_name(report.variant)},
                         {"k", report.k},
                         {"score", report.score},
                         {"per_position", std::move(per)}};
  return j.dump();
}

}  // namespace scenebert
