#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "scenebert/rng.hpp"
#include "scenebert/scene_lang.hpp"

namespace scenebert {

struct SceneRecord {
  std::string scene_id;
  std::vector<SceneObject> objects;
};

// One scene per line: {"scene_id": ..., "objects": [{"category", "bbox": [x0,y0,x1,y1]}]}.
std::vector<SceneRecord> read_scenes_jsonl(const std::string& path);
void write_scenes_jsonl(const std::string& path, const std::vector<SceneRecord>& records);

// Encodes every record against the vocabulary; bad boxes or unknown
// categories surface as errors naming the scene.
std::vector<std::pair<std::string, SceneSentence>> encode_records(
    const std::vector<SceneRecord>& records, const Vocabulary& vocab);

// COCO instances JSON -> scene records, box corners normalized by the image
// size and clamped to [0,1]. Annotations referencing unknown images or
// categories are integrity errors.
std::vector<SceneRecord> import_coco(const std::string& instances_json_path);

template <typename T>
std::vector<T> filter_min_objects(std::vector<T> items, std::size_t min_n);

// Seeded shuffle, then the first round(fraction * n) items form the first part.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_corpus(std::vector<T> items, double fraction,
                                                       std::uint64_t seed);

// Synthetic generator: categories come in disjoint themes of equal size, a
// scene draws one theme, and each object sits on its category's home cell
// with probability home_prob, otherwise uniformly on some other cell.
struct SyntheticWorldSpec {
  int n_themes = 5;
  int group_size = 4;
  GridSpec grid{3, 3};
  double home_prob = 0.6;
  int min_objects = 2;
  int max_objects = 6;

  int category_count() const { return n_themes * group_size; }
  int theme_of(int category_index) const { return category_index / group_size; }
  int home_cell(int category_index) const { return category_index % grid.cell_count() + 1; }
  void validate() const;

  std::vector<std::string> category_names() const;
  Vocabulary vocabulary() const;

  void save(const std::string& path) const;
  static SyntheticWorldSpec load(const std::string& path);

  bool operator==(const SyntheticWorldSpec&) const = default;
};

std::vector<SceneSentence> generate_synthetic(const SyntheticWorldSpec& world,
                                              std::size_t n_scenes, std::uint64_t seed);

// Renders sentences back into records (a box centered on each word's cell),
// so the synthetic corpus travels through the same files as imported data.
std::vector<SceneRecord> materialize_records(const std::vector<SceneSentence>& sentences,
                                             const SyntheticWorldSpec& world);

template <typename T>
std::vector<T> filter_min_objects(std::vector<T> items, std::size_t min_n) {
  std::erase_if(items, [min_n](const T& item) {
    if constexpr (std::is_same_v<T, SceneRecord>)
      return item.objects.size() < min_n;
    else if constexpr (std::is_same_v<T, SceneSentence>)
      return item.size() < min_n;
    else
      return item.second.size() < min_n;
  });
  return items;
}

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_corpus(std::vector<T> items, double fraction,
                                                       std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw std::invalid_argument("corpus: split fraction must lie in [0, 1]");
  Rng rng(seed);
  rng.shuffle(items);
  const std::size_t cut =
      static_cast<std::size_t>(static_cast<double>(items.size()) * fraction + 0.5);
  std::vector<T> head(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<T> tail(items.begin() + static_cast<std::ptrdiff_t>(cut), items.end());
  return {std::move(head), std::move(tail)};
}

}  // namespace scenebert
