#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace scenebert {

// Scores for one benign/adversarial pairing. The detection rule flags a
// sentence as adversarial when its score falls below the threshold.
struct ScoredSet {
  std::vector<double> benign;
  std::vector<double> adversarial;
};

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

// Thresholds are the distinct scores of both sets plus a sentinel below the
// minimum and one above the maximum, so the curve always reaches (0,0) and
// (1,1).
std::vector<RocPoint> roc_curve(const ScoredSet& set);

// Probability that a random adversarial score sits below a random benign
// score, ties counting half; equals the trapezoidal area under roc_curve.
double auc(const ScoredSet& set);

// Histogram of scores in [0,1] over equal-width bins; the top edge belongs to
// the last bin.
std::vector<std::int64_t> score_density(const std::vector<double>& scores, int n_bins = 50);

struct EvalPair {
  std::string tag;
  ScoredSet set;
};

// Writes metrics.json plus per-tag roc_<tag>.csv and density_<tag>_benign /
// _adversarial.csv files under out_dir.
void write_report(const std::vector<EvalPair>& pairs, int n_bins, const std::string& out_dir,
                  const nlohmann::json& metadata);

}  // namespace scenebert
