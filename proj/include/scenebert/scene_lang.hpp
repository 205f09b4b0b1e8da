#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace scenebert {

struct GridSpec {
  int rows = 3;
  int cols = 3;

  int cell_count() const { return rows * cols; }
  bool operator==(const GridSpec&) const = default;
};

// One detected object, bbox corners as fractions of the image size.
struct SceneObject {
  std::string category;
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;
};

// A word of the scene language: which grid cell, which category.
struct SceneWord {
  int cell = 0;            // 1..rows*cols, row-major from the top-left
  int category_index = 0;  // 0..|C|-1

  bool operator==(const SceneWord&) const = default;
};

using SceneSentence = std::vector<SceneWord>;
using TokenSequence = std::vector<int>;

// Grid cell of a box center (cx, cy) in [0,1]^2, y pointing down.
// Centers on the far edge fall into the last row/column.
int grid_cell_of(double cx, double cy, const GridSpec& grid);

// Sorts by cell, then category index; equal words keep their input order.
void sort_canonical(SceneSentence& s);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kFirstObjectToken = 2;

  Vocabulary(std::vector<std::string> categories, GridSpec grid);

  const std::vector<std::string>& categories() const { return categories_; }
  const GridSpec& grid() const { return grid_; }
  int category_count() const { return static_cast<int>(categories_.size()); }
  int object_token_count() const { return category_count() * grid_.cell_count(); }
  int size() const { return kFirstObjectToken + object_token_count(); }

  int category_index(const std::string& name) const;  // throws on unknown
  const std::string& category_name(int index) const;

  int token_of(const SceneWord& w) const;
  SceneWord word_of(int token) const;  // rejects PAD, MASK, out-of-range

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const {
    return categories_ == other.categories_ && grid_ == other.grid_;
  }

 private:
  std::vector<std::string> categories_;
  GridSpec grid_;
  std::unordered_map<std::string, int> index_;
};

// Category names of the two built-in detector label sets.
std::vector<std::string> voc_categories();   // 20
std::vector<std::string> coco_categories();  // 80

// Objects -> sorted sentence. Validates every box and category.
SceneSentence encode_scene(const std::vector<SceneObject>& objects, const Vocabulary& vocab);

TokenSequence tokenize(const SceneSentence& s, const Vocabulary& vocab);
SceneSentence detokenize(const TokenSequence& tokens, const Vocabulary& vocab);

}  // namespace scenebert
