#include "scenebert/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "scenebert/util.hpp"

namespace scenebert {

namespace {

void check_set(const ScoredSet& set) {
  if (set.benign.empty() || set.adversarial.empty())
    throw std::invalid_argument("eval: both score sets must be nonempty");
}

std::size_t count_below(const std::vector<double>& sorted, double threshold) {
  return static_cast<std::size_t>(
      std::lower_bound(sorted.begin(), sorted.end(), threshold) - sorted.begin());
}

}  // namespace

std::vector<RocPoint> roc_curve(const ScoredSet& set) {
  check_set(set);
  std::vector<double> benign = set.benign;
  std::vector<double> adv = set.adversarial;
  std::sort(benign.begin(), benign.end());
  std::sort(adv.begin(), adv.end());

  std::vector<double> thresholds;
  thresholds.reserve(benign.size() + adv.size() + 2);
  thresholds.push_back(std::min(benign.front(), adv.front()) - 1.0);
  std::vector<double> merged;
  merged.reserve(benign.size() + adv.size());
  std::merge(benign.begin(), benign.end(), adv.begin(), adv.end(), std::back_inserter(merged));
  for (double s : merged)
    if (thresholds.empty() || s != thresholds.back()) thresholds.push_back(s);
  thresholds.push_back(std::max(benign.back(), adv.back()) + 1.0);

  std::vector<RocPoint> curve;
  curve.reserve(thresholds.size());
  for (double t : thresholds) {
    RocPoint p;
    p.threshold = t;
    p.fpr = static_cast<double>(count_below(benign, t)) / static_cast<double>(benign.size());
    p.tpr = static_cast<double>(count_below(adv, t)) / static_cast<double>(adv.size());
    curve.push_back(p);
  }
  return curve;
}

double auc(const ScoredSet& set) {
  check_set(set);
  std::vector<double> benign = set.benign;
  std::vector<double> adv = set.adversarial;
  std::sort(benign.begin(), benign.end());
  std::sort(adv.begin(), adv.end());

  // Count (adversarial < benign) pairs exactly, ties worth one half.
  std::size_t lt = 0, le = 0;
  double wins = 0.0;
  for (double b : benign) {
    while (lt < adv.size() && adv[lt] < b) ++lt;
    if (le < lt) le = lt;
    while (le < adv.size() && adv[le] <= b) ++le;
    wins += static_cast<double>(lt) + 0.5 * static_cast<double>(le - lt);
  }
  return wins / (static_cast<double>(benign.size()) * static_cast<double>(adv.size()));
}

std::vector<std::int64_t> score_density(const std::vector<double>& scores, int n_bins) {
  if (n_bins < 1) throw std::invalid_argument("eval: need at least one density bin");
  if (scores.empty()) throw std::invalid_argument("eval: cannot bin an empty score set");
  std::vector<std::int64_t> bins(static_cast<std::size_t>(n_bins), 0);
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0))
      throw std::domain_error("eval: score " + format_double(s) + " outside [0, 1]");
    const int b = std::min(static_cast<int>(s * n_bins), n_bins - 1);
    ++bins[static_cast<std::size_t>(b)];
  }
  return bins;
}

namespace {

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& curve) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write " + path);
  out << "threshold,fpr,tpr\n";
  for (const RocPoint& p : curve)
    out << format_double(p.threshold) << ',' << format_double(p.fpr) << ','
        << format_double(p.tpr) << '\n';
  if (!out) throw std::runtime_error("eval: write failed for " + path);
}

void write_density_csv(const std::string& path, const std::vector<std::int64_t>& bins) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write " + path);
  out << "bin_lo,bin_hi,count\n";
  const int n = static_cast<int>(bins.size());
  for (int b = 0; b < n; ++b)
    out << format_double(static_cast<double>(b) / n) << ','
        << format_double(static_cast<double>(b + 1) / n) << ',' << bins[static_cast<std::size_t>(b)]
        << '\n';
  if (!out) throw std::runtime_error("eval: write failed for " + path);
}

}  // namespace

void write_report(const std::vector<EvalPair>& pairs, int n_bins, const std::string& out_dir,
                  const nlohmann::json& metadata) {
  if (pairs.empty()) throw std::invalid_argument("eval: nothing to report");
  std::filesystem::create_directories(out_dir);
  nlohmann::json aucs;
  for (const EvalPair& pair : pairs) {
    if (pair.tag.empty() || pair.tag.find_first_of("/\\ ") != std::string::npos)
      throw std::invalid_argument("eval: tag '" + pair.tag + "' is not filename-safe");
    aucs[pair.tag] = auc(pair.set);
    write_roc_csv(out_dir + "/roc_" + pair.tag + ".csv", roc_curve(pair.set));
    write_density_csv(out_dir + "/density_" + pair.tag + "_benign.csv",
                      score_density(pair.set.benign, n_bins));
    write_density_csv(out_dir + "/density_" + pair.tag + "_adversarial.csv",
                      score_density(pair.set.adversarial, n_bins));
  }
  const nlohmann::json j{{"metadata", metadata}, {"aucs", std::move(aucs)}};
  std::ofstream out(out_dir + "/metrics.json", std::ios::binary);
  if (!out) throw std::runtime_error("eval: cannot write " + out_dir + "/metrics.json");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("eval: write failed for metrics.json");
}

}  // namespace scenebert
