#pragma once

#include <string>
#include <vector>

#include "scenebert/model.hpp"

namespace scenebert {

enum class ScoreVariant { strict, relax };

std::string score_variant_name(ScoreVariant v);
ScoreVariant score_variant_from_name(const std::string& name);

struct PositionConfidence {
  int position = 0;
  int token = 0;
  double confidence = 0.0;
};

struct ConsistencyReport {
  ScoreVariant variant = ScoreVariant::strict;
  int k = 0;           // list length actually applied
  double score = 0.0;  // minimum confidence across positions
  std::vector<PositionConfidence> per_position;
};

// Masks each position in turn and asks the model for the original token
// there. The sentence score is the minimum confidence; a token outside the
// top k gets confidence 0. k = 0 means no truncation.
ConsistencyReport consistency_score_strict(const ModelParams<float>& params,
                                           const ModelConfig& cfg, const TokenSequence& tokens,
                                           int k = 0);

// Same sweep, but a token's confidence is the probability mass of its
// category summed across all grid cells, and k truncates the ranking of
// category masses instead of single tokens.
ConsistencyReport consistency_score_relax(const ModelParams<float>& params,
                                          const ModelConfig& cfg, int grid_cells,
                                          const TokenSequence& tokens, int k = 0);

struct ScoreOutcome {
  std::size_t index = 0;
  bool ok = false;
  ConsistencyReport report;
  std::string error;
};

// Scores a batch, optionally across threads. Results come back indexed by
// input position, identical for any worker count; per-item failures land in
// the outcome instead of aborting the batch.
std::vector<ScoreOutcome> score_batch(const ModelParams<float>& params, const ModelConfig& cfg,
                                      const std::vector<TokenSequence>& batch,
                                      ScoreVariant variant, int k, int grid_cells, int workers);

// One report as a JSONL row.
std::string report_json_line(const std::string& scene_id, const ConsistencyReport& report);

}  // namespace scenebert
