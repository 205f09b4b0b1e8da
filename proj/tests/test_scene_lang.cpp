#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "scenebert/rng.hpp"
#include "scenebert/scene_lang.hpp"

using namespace scenebert;

namespace {

Vocabulary tiny_vocab() { return Vocabulary({"a", "b", "c", "d"}, GridSpec{2, 3}); }

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("vocabulary sizes for the built-in category sets") {
  const Vocabulary voc(voc_categories(), GridSpec{3, 3});
  CHECK(voc.category_count() == 20);
  CHECK(voc.object_token_count() == 180);
  CHECK(voc.size() == 182);

  const Vocabulary coco(coco_categories(), GridSpec{3, 3});
  CHECK(coco.category_count() == 80);
  CHECK(coco.object_token_count() == 720);
  CHECK(coco.size() == 722);
}

TEST_CASE("token layout groups cells within a category") {
  const Vocabulary v = tiny_vocab();
  CHECK(v.token_of(SceneWord{1, 0}) == 2);
  CHECK(v.token_of(SceneWord{6, 0}) == 7);
  CHECK(v.token_of(SceneWord{1, 1}) == 8);
  CHECK(v.token_of(SceneWord{4, 3}) == 2 + 3 * 6 + 3);
  CHECK(v.size() == 2 + 4 * 6);
}

TEST_CASE("token and word conversions invert each other over the whole range") {
  const Vocabulary v = tiny_vocab();
  for (int t = Vocabulary::kFirstObjectToken; t < v.size(); ++t) {
    const SceneWord w = v.word_of(t);
    CHECK(v.token_of(w) == t);
    CHECK(w.cell >= 1);
    CHECK(w.cell <= 6);
    CHECK(w.category_index >= 0);
    CHECK(w.category_index < 4);
  }
}

TEST_CASE("special tokens are not words") {
  const Vocabulary v = tiny_vocab();
  CHECK_THROWS_AS(v.word_of(Vocabulary::kPad), std::out_of_range);
  CHECK_THROWS_AS(v.word_of(Vocabulary::kMask), std::out_of_range);
  CHECK_THROWS_AS(v.word_of(v.size()), std::out_of_range);
  CHECK_THROWS_AS(v.word_of(-1), std::out_of_range);
}

TEST_CASE("token_of validates its word") {
  const Vocabulary v = tiny_vocab();
  CHECK_THROWS_AS(v.token_of(SceneWord{0, 0}), std::out_of_range);
  CHECK_THROWS_AS(v.token_of(SceneWord{7, 0}), std::out_of_range);
  CHECK_THROWS_AS(v.token_of(SceneWord{1, -1}), std::out_of_range);
  CHECK_THROWS_AS(v.token_of(SceneWord{1, 4}), std::out_of_range);
}

TEST_CASE("category names validate") {
  CHECK_THROWS_AS(Vocabulary({}, GridSpec{3, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}, GridSpec{3, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a", ""}, GridSpec{3, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"a"}, GridSpec{0, 3}), std::invalid_argument);
  const Vocabulary v = tiny_vocab();
  CHECK(v.category_index("c") == 2);
  CHECK(v.category_name(3) == "d");
  CHECK_THROWS_AS(v.category_index("nope"), std::out_of_range);
  CHECK_THROWS_AS(v.category_name(4), std::out_of_range);
}

TEST_CASE("grid cells are row-major with far edges clamped inward") {
  const GridSpec g{3, 3};
  CHECK(grid_cell_of(0.0, 0.0, g) == 1);
  CHECK(grid_cell_of(0.5, 0.0, g) == 2);
  CHECK(grid_cell_of(0.99, 0.0, g) == 3);
  CHECK(grid_cell_of(0.0, 0.5, g) == 4);
  CHECK(grid_cell_of(0.5, 0.5, g) == 5);
  CHECK(grid_cell_of(0.99, 0.99, g) == 9);
  CHECK(grid_cell_of(1.0, 1.0, g) == 9);
  CHECK(grid_cell_of(1.0, 0.0, g) == 3);

  const GridSpec wide{2, 4};
  CHECK(grid_cell_of(0.26, 0.0, wide) == 2);
  CHECK(grid_cell_of(0.26, 0.51, wide) == 6);

  CHECK_THROWS_AS(grid_cell_of(-0.01, 0.5, g), std::domain_error);
  CHECK_THROWS_AS(grid_cell_of(0.5, 1.01, g), std::domain_error);
  CHECK_THROWS_AS(grid_cell_of(0.5, 0.5, GridSpec{0, 3}), std::invalid_argument);
}

TEST_CASE("canonical order sorts by cell then category") {
  SceneSentence s{{5, 1}, {1, 3}, {5, 0}, {1, 3}, {2, 2}};
  sort_canonical(s);
  const SceneSentence want{{1, 3}, {1, 3}, {2, 2}, {5, 0}, {5, 1}};
  CHECK(s == want);
}

TEST_CASE("encode_scene validates boxes and sorts the result") {
  const Vocabulary v = tiny_vocab();
  std::vector<SceneObject> objs{
      {"d", 0.7, 0.6, 0.9, 0.9},   // center (0.8, 0.75) -> row 1, col 2 -> cell 6
      {"a", 0.0, 0.0, 0.2, 0.2},   // center (0.1, 0.1) -> cell 1
      {"b", 0.4, 0.0, 0.6, 0.3},   // center (0.5, 0.15) -> cell 2
  };
  const SceneSentence s = encode_scene(objs, v);
  const SceneSentence want{{1, 0}, {2, 1}, {6, 3}};
  CHECK(s == want);

  CHECK_THROWS_AS(encode_scene({{"a", 0.5, 0.0, 0.4, 0.2}}, v), std::domain_error);
  CHECK_THROWS_AS(encode_scene({{"a", -0.1, 0.0, 0.4, 0.2}}, v), std::domain_error);
  CHECK_THROWS_AS(encode_scene({{"a", 0.0, 0.0, 0.4, 1.2}}, v), std::domain_error);
  CHECK_THROWS_AS(encode_scene({{"zebra", 0.0, 0.0, 0.4, 0.2}}, v), std::out_of_range);
}

TEST_CASE("tokenize and detokenize invert on canonical sentences") {
  const Vocabulary v(voc_categories(), GridSpec{3, 3});
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    SceneSentence s;
    const std::size_t n = 1 + rng.uniform_below(12);
    for (std::size_t i = 0; i < n; ++i)
      s.push_back(SceneWord{1 + static_cast<int>(rng.uniform_below(9)),
                            static_cast<int>(rng.uniform_below(20))});
    sort_canonical(s);
    const TokenSequence tokens = tokenize(s, v);
    CHECK(detokenize(tokens, v) == s);
    for (std::size_t i = 1; i < s.size(); ++i) {
      const bool ordered = s[i - 1].cell < s[i].cell ||
                           (s[i - 1].cell == s[i].cell &&
                            s[i - 1].category_index <= s[i].category_index);
      CHECK(ordered);
    }
  }
}

TEST_CASE("canonical order makes tokens nondecreasing within a cell run") {
  // Tokens group by category first, so whole-token order is not monotone, but
  // within one cell the category order carries over to token order.
  const Vocabulary v = tiny_vocab();
  SceneSentence s{{2, 3}, {2, 0}, {2, 2}};
  sort_canonical(s);
  const TokenSequence tokens = tokenize(s, v);
  CHECK(std::is_sorted(tokens.begin(), tokens.end()));
}

TEST_CASE("vocabulary saves and loads unchanged") {
  const std::string path = temp_path("scenebert_vocab_test.json");
  const Vocabulary v = tiny_vocab();
  v.save(path);
  const Vocabulary loaded = Vocabulary::load(path);
  CHECK(loaded == v);
  CHECK(loaded.grid().rows == 2);
  CHECK(loaded.grid().cols == 3);
  std::remove(path.c_str());
  CHECK_THROWS_AS(Vocabulary::load(path), std::runtime_error);
}
