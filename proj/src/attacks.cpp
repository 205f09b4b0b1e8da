#include "scenebert/attacks.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "json.hpp"

#include "scenebert/rng.hpp"

namespace scenebert {

namespace {

constexpr int kResampleBound = 64;

void check_pool(const std::vector<int>& pool, int n_categories) {
  for (int c : pool)
    if (c < 0 || (n_categories > 0 && c >= n_categories))
      throw std::invalid_argument("attacks: pool category " + std::to_string(c) +
                                  " out of range");
}

}  // namespace

std::string attack_type_name(AttackType t) {
  switch (t) {
    case AttackType::misclassification: return "misclassification";
    case AttackType::hiding: return "hiding";
    case AttackType::appearing: return "appearing";
  }
  throw std::logic_error("attacks: unknown attack type");
}

AttackType attack_type_from_name(const std::string& name) {
  if (name == "misclassification") return AttackType::misclassification;
  if (name == "hiding") return AttackType::hiding;
  if (name == "appearing") return AttackType::appearing;
  throw std::invalid_argument("attacks: unknown attack type '" + name + "'");
}

std::vector<int> PoolPolicy::candidates(const SceneSentence& s) const {
  if (n_categories < 1) throw std::invalid_argument("attacks: pool policy without categories");
  std::vector<int> out;
  if (kind == Kind::uniform) {
    out.resize(static_cast<std::size_t>(n_categories));
    for (int c = 0; c < n_categories; ++c) out[static_cast<std::size_t>(c)] = c;
    return out;
  }
  if (group_size < 1 || n_categories % group_size != 0)
    throw std::invalid_argument("attacks: cross-theme pool needs a theme width that divides " +
                                std::to_string(n_categories));
  std::set<int> present_themes;
  for (const SceneWord& w : s) present_themes.insert(w.category_index / group_size);
  for (int c = 0; c < n_categories; ++c)
    if (!present_themes.count(c / group_size)) out.push_back(c);
  return out;
}

AttackRecord attack_misclassify(const SceneSentence& benign, std::uint64_t seed,
                                const std::vector<int>& pool) {
  if (benign.empty()) throw attack_infeasible_error("attacks: cannot misclassify in an empty scene");
  check_pool(pool, 0);
  Rng rng(seed);
  const std::size_t victim = static_cast<std::size_t>(rng.uniform_below(benign.size()));
  const int from = benign[victim].category_index;
  std::vector<int> usable;
  usable.reserve(pool.size());
  for (int c : pool)
    if (c != from) usable.push_back(c);
  if (usable.empty())
    throw attack_infeasible_error(
        "attacks: no replacement category remains once the victim's own is excluded");
  const int to = usable[static_cast<std::size_t>(rng.uniform_below(usable.size()))];

  AttackRecord r;
  r.type = AttackType::misclassification;
  r.seed = seed;
  r.benign = benign;
  r.attacked = benign;
  r.attacked[victim].category_index = to;
  sort_canonical(r.attacked);
  r.target = AttackTarget{static_cast<int>(victim), benign[victim].cell, from, to};
  return r;
}

AttackRecord attack_hide(const SceneSentence& benign, std::uint64_t seed) {
  if (benign.size() < 2)
    throw attack_infeasible_error("attacks: hiding needs at least two objects");
  Rng rng(seed);
  const std::size_t victim = static_cast<std::size_t>(rng.uniform_below(benign.size()));

  AttackRecord r;
  r.type = AttackType::hiding;
  r.seed = seed;
  r.benign = benign;
  r.attacked = benign;
  r.attacked.erase(r.attacked.begin() + static_cast<std::ptrdiff_t>(victim));
  r.target =
      AttackTarget{static_cast<int>(victim), benign[victim].cell, benign[victim].category_index,
                   -1};
  return r;
}

AttackRecord attack_appear(const SceneSentence& benign, std::uint64_t seed,
                           const std::vector<int>& pool, const GridSpec& grid) {
  if (pool.empty()) throw attack_infeasible_error("attacks: empty insertion pool");
  check_pool(pool, 0);
  const int cells = grid.cell_count();
  std::set<std::pair<int, int>> present;  // (category, cell)
  for (const SceneWord& w : benign) present.emplace(w.category_index, w.cell);
  std::size_t occupied = 0;
  for (int c : pool)
    for (int cell = 1; cell <= cells; ++cell)
      if (present.count({c, cell})) ++occupied;
  const std::size_t combos = pool.size() * static_cast<std::size_t>(cells);
  if (occupied == combos)
    throw attack_infeasible_error(
        "attacks: scene already occupies every (cell, category) insertion candidate");

  Rng rng(seed);
  SceneWord inserted{0, -1};
  bool found = false;
  for (int attempt = 0; attempt < kResampleBound && !found; ++attempt) {
    const int c = pool[static_cast<std::size_t>(rng.uniform_below(pool.size()))];
    const int cell = 1 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(cells)));
    if (!present.count({c, cell})) {
      inserted = SceneWord{cell, c};
      found = true;
    }
  }
  if (!found) {
    // Enumerate the free combinations instead of resampling forever.
    std::vector<SceneWord> free;
    free.reserve(combos - occupied);
    for (int c : pool)
      for (int cell = 1; cell <= cells; ++cell)
        if (!present.count({c, cell})) free.push_back(SceneWord{cell, c});
    inserted = free[static_cast<std::size_t>(rng.uniform_below(free.size()))];
  }

  AttackRecord r;
  r.type = AttackType::appearing;
  r.seed = seed;
  r.benign = benign;
  r.attacked = benign;
  r.attacked.push_back(inserted);
  sort_canonical(r.attacked);
  r.target = AttackTarget{-1, inserted.cell, -1, inserted.category_index};
  return r;
}

std::vector<AttackRecord> generate_attack_set(
    const std::vector<std::pair<std::string, SceneSentence>>& corpus, AttackType type,
    std::size_t count, std::uint64_t master_seed, const PoolPolicy& policy, const GridSpec& grid) {
  if (corpus.empty()) throw std::invalid_argument("attacks: empty scene corpus");
  std::vector<AttackRecord> records;
  records.reserve(count);
  Rng picker(master_seed);
  std::uint64_t draw_index = 0;
  std::size_t skipped = 0;
  const std::uint64_t max_draws = static_cast<std::uint64_t>(count) * 64 + 1024;
  while (records.size() < count && draw_index < max_draws) {
    const std::size_t idx = static_cast<std::size_t>(picker.uniform_below(corpus.size()));
    const std::uint64_t seed = mix_seed(master_seed, draw_index);
    ++draw_index;
    const auto& [scene_id, benign] = corpus[idx];
    try {
      AttackRecord r;
      switch (type) {
        case AttackType::misclassification:
          r = attack_misclassify(benign, seed, policy.candidates(benign));
          break;
        case AttackType::hiding:
          r = attack_hide(benign, seed);
          break;
        case AttackType::appearing:
          r = attack_appear(benign, seed, policy.candidates(benign), grid);
          break;
      }
      r.scene_id = scene_id;
      records.push_back(std::move(r));
    } catch (const attack_infeasible_error& e) {
      ++skipped;
      std::fprintf(stderr, "attacks: skipping scene '%s': %s\n", scene_id.c_str(), e.what());
    }
  }
  if (records.size() < count)
    throw std::runtime_error("attacks: produced only " + std::to_string(records.size()) + " of " +
                             std::to_string(count) + " requested attacks after " +
                             std::to_string(draw_index) + " draws (" + std::to_string(skipped) +
                             " infeasible)");
  return records;
}

namespace {

nlohmann::json sentence_to_json(const SceneSentence& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const SceneWord& w : s) arr.push_back({w.cell, w.category_index});
  return arr;
}

SceneSentence sentence_from_json(const nlohmann::json& arr, const std::string& where) {
  SceneSentence s;
  for (const nlohmann::json& pair : arr) {
    if (!pair.is_array() || pair.size() != 2)
      throw std::runtime_error("attacks: malformed word in " + where);
    s.push_back(SceneWord{pair[0].get<int>(), pair[1].get<int>()});
  }
  return s;
}

}  // namespace

void write_attacks_jsonl(const std::string& path, const std::vector<AttackRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("attacks: cannot write " + path);
  for (const AttackRecord& r : records) {
    nlohmann::json target;
    switch (r.type) {
      case AttackType::misclassification:
        target = {{"index", r.target.index},
                  {"cell", r.target.cell},
                  {"from_category", r.target.from_category},
                  {"to_category", r.target.to_category}};
        break;
      case AttackType::hiding:
        target = {{"index", r.target.index},
                  {"cell", r.target.cell},
                  {"category", r.target.from_category}};
        break;
      case AttackType::appearing:
        target = {{"cell", r.target.cell}, {"category", r.target.to_category}};
        break;
    }
    const nlohmann::json j{{"scene_id", r.scene_id},
                           {"attack_type", attack_type_name(r.type)},
                           {"seed", r.seed},
                           {"benign", sentence_to_json(r.benign)},
                           {"attacked", sentence_to_json(r.attacked)},
                           {"target", std::move(target)}};
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("attacks: write failed for " + path);
}

std::vector<AttackRecord> read_attacks_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("attacks: cannot open " + path);
  std::vector<AttackRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("attacks: malformed JSON at " + where + ": " + e.what());
    }
    AttackRecord r;
    r.scene_id = j.at("scene_id").get<std::string>();
    r.type = attack_type_from_name(j.at("attack_type").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.benign = sentence_from_json(j.at("benign"), where);
    r.attacked = sentence_from_json(j.at("attacked"), where);
    const nlohmann::json& t = j.at("target");
    switch (r.type) {
      case AttackType::misclassification:
        r.target = AttackTarget{t.at("index").get<int>(), t.at("cell").get<int>(),
                                t.at("from_category").get<int>(), t.at("to_category").get<int>()};
        break;
      case AttackType::hiding:
        r.target = AttackTarget{t.at("index").get<int>(), t.at("cell").get<int>(),
                                t.at("category").get<int>(), -1};
        break;
      case AttackType::appearing:
        r.target = AttackTarget{-1, t.at("cell").get<int>(), -1, t.at("category").get<int>()};
        break;
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace scenebert
