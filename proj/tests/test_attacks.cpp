#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <set>

#include "scenebert/attacks.hpp"
#include "scenebert/corpus.hpp"
#include "scenebert/util.hpp"

using namespace scenebert;

namespace {

std::vector<int> full_pool(int n) {
  std::vector<int> pool(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
  return pool;
}

std::multiset<std::pair<int, int>> as_multiset(const SceneSentence& s) {
  std::multiset<std::pair<int, int>> m;
  for (const SceneWord& w : s) m.emplace(w.cell, w.category_index);
  return m;
}

bool is_canonical(const SceneSentence& s) {
  SceneSentence sorted = s;
  sort_canonical(sorted);
  return sorted == s;
}

}  // namespace

TEST_CASE("attack type names round-trip") {
  for (AttackType t :
       {AttackType::misclassification, AttackType::hiding, AttackType::appearing})
    CHECK(attack_type_from_name(attack_type_name(t)) == t);
  CHECK_THROWS_AS(attack_type_from_name("vanishing"), std::invalid_argument);
}

TEST_CASE("misclassification swaps one category in place") {
  const SceneSentence benign{{1, 0}, {3, 2}, {7, 5}};
  const AttackRecord r = attack_misclassify(benign, 99, full_pool(8));
  CHECK(r.type == AttackType::misclassification);
  CHECK(r.seed == 99);
  CHECK(r.benign == benign);
  CHECK(r.attacked.size() == benign.size());
  CHECK(is_canonical(r.attacked));
  CHECK(r.target.index >= 0);
  CHECK(r.target.index < 3);
  CHECK(r.target.from_category !=
        r.target.to_category);
  CHECK(r.target.cell == benign[static_cast<std::size_t>(r.target.index)].cell);
  CHECK(r.target.from_category ==
        benign[static_cast<std::size_t>(r.target.index)].category_index);

  // Same multiset of cells, exactly one category changed.
  std::multiset<int> cells_before, cells_after;
  for (const SceneWord& w : benign) cells_before.insert(w.cell);
  for (const SceneWord& w : r.attacked) cells_after.insert(w.cell);
  CHECK(cells_before == cells_after);
  CHECK(as_multiset(r.attacked).count({r.target.cell, r.target.to_category}) >= 1);

  CHECK(attack_misclassify(benign, 99, full_pool(8)).attacked == r.attacked);
  CHECK_THROWS_AS(attack_misclassify({}, 1, full_pool(8)), attack_infeasible_error);
  CHECK_THROWS_AS(attack_misclassify({{1, 0}}, 1, {0}), attack_infeasible_error);
}

TEST_CASE("hiding removes exactly one word") {
  const SceneSentence benign{{1, 0}, {3, 2}, {7, 5}};
  const AttackRecord r = attack_hide(benign, 5);
  CHECK(r.attacked.size() == 2);
  CHECK(r.target.to_category == -1);
  auto remaining = as_multiset(benign);
  remaining.erase(remaining.find({r.target.cell, r.target.from_category}));
  CHECK(as_multiset(r.attacked) == remaining);
  CHECK(is_canonical(r.attacked));
  CHECK_THROWS_AS(attack_hide({{1, 0}}, 5), attack_infeasible_error);
}

TEST_CASE("appearing inserts a fresh word") {
  const GridSpec grid{2, 2};
  const SceneSentence benign{{1, 0}, {2, 1}};
  const AttackRecord r = attack_appear(benign, 12, full_pool(3), grid);
  CHECK(r.attacked.size() == 3);
  CHECK(is_canonical(r.attacked));
  CHECK(r.target.index == -1);
  CHECK(r.target.from_category == -1);
  const auto inserted = std::pair<int, int>{r.target.cell, r.target.to_category};
  CHECK(as_multiset(benign).count(inserted) == 0);
  CHECK(as_multiset(r.attacked).count(inserted) == 1);

  auto rest = as_multiset(r.attacked);
  rest.erase(rest.find(inserted));
  CHECK(rest == as_multiset(benign));
}

TEST_CASE("appearing detects saturation exactly") {
  const GridSpec grid{1, 2};
  SceneSentence saturated{{1, 0}, {2, 0}};
  CHECK_THROWS_AS(attack_appear(saturated, 3, {0}, grid), attack_infeasible_error);

  // One free spot left: the attack must find it.
  const SceneSentence nearly{{1, 0}};
  const AttackRecord r = attack_appear(nearly, 3, {0}, grid);
  CHECK(r.target.cell == 2);
  CHECK(r.target.to_category == 0);

  CHECK_THROWS_AS(attack_appear(nearly, 3, {}, grid), attack_infeasible_error);
}

TEST_CASE("cross-theme pools exclude every present theme") {
  PoolPolicy policy;
  policy.kind = PoolPolicy::Kind::cross_theme;
  policy.n_categories = 12;
  policy.group_size = 3;
  const SceneSentence s{{1, 0}, {2, 7}};  // themes 0 and 2
  const std::vector<int> pool = policy.candidates(s);
  CHECK(pool == std::vector<int>{3, 4, 5, 9, 10, 11});

  PoolPolicy uniform;
  uniform.n_categories = 5;
  CHECK(uniform.candidates(s) == full_pool(5));

  policy.group_size = 5;
  CHECK_THROWS_AS(policy.candidates(s), std::invalid_argument);
}

TEST_CASE("attack sets are reproducible from recorded seeds") {
  const SyntheticWorldSpec world;
  const auto sentences = generate_synthetic(world, 200, 31);
  std::vector<std::pair<std::string, SceneSentence>> corpus;
  for (std::size_t i = 0; i < sentences.size(); ++i)
    corpus.emplace_back("s" + std::to_string(i), sentences[i]);

  PoolPolicy policy;
  policy.kind = PoolPolicy::Kind::cross_theme;
  policy.n_categories = world.category_count();
  policy.group_size = world.group_size;

  const auto records = generate_attack_set(corpus, AttackType::misclassification, 50, 77, policy,
                                           world.grid);
  REQUIRE(records.size() == 50);
  const auto again = generate_attack_set(corpus, AttackType::misclassification, 50, 77, policy,
                                         world.grid);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].scene_id == again[i].scene_id);
    CHECK(records[i].attacked == again[i].attacked);
    CHECK(records[i].seed == again[i].seed);

    // The recorded seed alone regenerates the attack from its benign scene.
    const AttackRecord replay =
        attack_misclassify(records[i].benign, records[i].seed, policy.candidates(records[i].benign));
    CHECK(replay.attacked == records[i].attacked);
    CHECK(replay.target.index == records[i].target.index);

    // Cross-theme: the new category's theme appears nowhere in the benign scene.
    std::set<int> themes;
    for (const SceneWord& w : records[i].benign) themes.insert(world.theme_of(w.category_index));
    CHECK(themes.count(world.theme_of(records[i].target.to_category)) == 0);
  }
}

TEST_CASE("infeasible scenes are skipped, not fatal") {
  std::vector<std::pair<std::string, SceneSentence>> corpus{
      {"single", {{1, 0}}},
      {"pair", {{1, 0}, {2, 1}}},
  };
  PoolPolicy policy;
  policy.n_categories = 4;
  const auto records =
      generate_attack_set(corpus, AttackType::hiding, 20, 3, policy, GridSpec{3, 3});
  REQUIRE(records.size() == 20);
  for (const AttackRecord& r : records) CHECK(r.scene_id == "pair");
}

TEST_CASE("an impossible request fails with a count report") {
  std::vector<std::pair<std::string, SceneSentence>> corpus{{"single", {{1, 0}}}};
  PoolPolicy policy;
  policy.n_categories = 4;
  try {
    generate_attack_set(corpus, AttackType::hiding, 5, 3, policy, GridSpec{3, 3});
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("attacks:") == 0);
    CHECK(msg.find("0 of 5") != std::string::npos);
  }
}

TEST_CASE("attack records round-trip through jsonl") {
  const SyntheticWorldSpec world;
  const auto sentences = generate_synthetic(world, 60, 13);
  std::vector<std::pair<std::string, SceneSentence>> corpus;
  for (std::size_t i = 0; i < sentences.size(); ++i)
    corpus.emplace_back("s" + std::to_string(i), sentences[i]);
  PoolPolicy policy;
  policy.n_categories = world.category_count();

  const std::string path =
      (std::filesystem::temp_directory_path() / "scenebert_attacks_test.jsonl").string();
  for (AttackType type :
       {AttackType::misclassification, AttackType::hiding, AttackType::appearing}) {
    const auto records = generate_attack_set(corpus, type, 15, 5, policy, world.grid);
    write_attacks_jsonl(path, records);
    const auto loaded = read_attacks_jsonl(path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(loaded[i].scene_id == records[i].scene_id);
      CHECK(loaded[i].type == records[i].type);
      CHECK(loaded[i].seed == records[i].seed);
      CHECK(loaded[i].benign == records[i].benign);
      CHECK(loaded[i].attacked == records[i].attacked);
      CHECK(loaded[i].target.index == records[i].target.index);
      CHECK(loaded[i].target.cell == records[i].target.cell);
      CHECK(loaded[i].target.from_category == records[i].target.from_category);
      CHECK(loaded[i].target.to_category == records[i].target.to_category);
    }
    // Byte-stable serialization.
    const std::string first = read_file(path);
    write_attacks_jsonl(path, loaded);
    CHECK(read_file(path) == first);
  }
  std::filesystem::remove(path);
}
