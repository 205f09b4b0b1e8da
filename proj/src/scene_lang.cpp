#include "scenebert/scene_lang.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace scenebert {

namespace {

void check_grid(const GridSpec& grid) {
  if (grid.rows < 1 || grid.cols < 1)
    throw std::invalid_argument("scene_lang: grid must be at least 1x1");
}

}  // namespace

int grid_cell_of(double cx, double cy, const GridSpec& grid) {
  check_grid(grid);
  if (!(cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0))
    throw std::domain_error("scene_lang: box center (" + std::to_string(cx) + ", " +
                            std::to_string(cy) + ") outside the unit square");
  const int col = std::min(static_cast<int>(cx * grid.cols), grid.cols - 1);
  const int row = std::min(static_cast<int>(cy * grid.rows), grid.rows - 1);
  return row * grid.cols + col + 1;
}

void sort_canonical(SceneSentence& s) {
  std::stable_sort(s.begin(), s.end(), [](const SceneWord& a, const SceneWord& b) {
    if (a.cell != b.cell) return a.cell < b.cell;
    return a.category_index < b.category_index;
  });
}

Vocabulary::Vocabulary(std::vector<std::string> categories, GridSpec grid)
    : categories_(std::move(categories)), grid_(grid) {
  check_grid(grid_);
  if (categories_.empty()) throw std::invalid_argument("scene_lang: empty category list");
  for (int i = 0; i < static_cast<int>(categories_.size()); ++i) {
    if (categories_[i].empty())
      throw std::invalid_argument("scene_lang: empty category name at index " + std::to_string(i));
    if (!index_.emplace(categories_[i], i).second)
      throw std::invalid_argument("scene_lang: duplicate category '" + categories_[i] + "'");
  }
}

int Vocabulary::category_index(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("scene_lang: unknown category '" + name + "'");
  return it->second;
}

const std::string& Vocabulary::category_name(int index) const {
  if (index < 0 || index >= category_count())
    throw std::out_of_range("scene_lang: category index " + std::to_string(index) +
                            " out of range [0, " + std::to_string(category_count()) + ")");
  return categories_[static_cast<std::size_t>(index)];
}

int Vocabulary::token_of(const SceneWord& w) const {
  if (w.cell < 1 || w.cell > grid_.cell_count())
    throw std::out_of_range("scene_lang: cell " + std::to_string(w.cell) + " out of range [1, " +
                            std::to_string(grid_.cell_count()) + "]");
  if (w.category_index < 0 || w.category_index >= category_count())
    throw std::out_of_range("scene_lang: category index " + std::to_string(w.category_index) +
                            " out of range [0, " + std::to_string(category_count()) + ")");
  return kFirstObjectToken + w.category_index * grid_.cell_count() + (w.cell - 1);
}

SceneWord Vocabulary::word_of(int token) const {
  if (token < kFirstObjectToken || token >= size())
    throw std::out_of_range("scene_lang: token " + std::to_string(token) +
                            " is not an object token");
  const int offset = token - kFirstObjectToken;
  return SceneWord{offset % grid_.cell_count() + 1, offset / grid_.cell_count()};
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::json j;
  j["categories"] = categories_;
  j["grid"] = {{"h", grid_.rows}, {"w", grid_.cols}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("scene_lang: cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("scene_lang: write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("scene_lang: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("scene_lang: malformed vocabulary file " + path + ": " + e.what());
  }
  if (!j.contains("categories") || !j.contains("grid"))
    throw std::runtime_error("scene_lang: " + path + " lacks categories/grid");
  GridSpec grid{j["grid"].at("h").get<int>(), j["grid"].at("w").get<int>()};
  return Vocabulary(j["categories"].get<std::vector<std::string>>(), grid);
}

std::vector<std::string> voc_categories() {
  return {"aeroplane", "bicycle", "bird",   "boat",        "bottle", "bus",       "car",
          "cat",       "chair",   "cow",    "diningtable", "dog",    "horse",     "motorbike",
          "person",    "pottedplant", "sheep", "sofa",     "train",  "tvmonitor"};
}

std::vector<std::string> coco_categories() {
  return {"person",        "bicycle",      "car",           "motorcycle",   "airplane",
          "bus",           "train",        "truck",         "boat",         "traffic light",
          "fire hydrant",  "stop sign",    "parking meter", "bench",        "bird",
          "cat",           "dog",          "horse",         "sheep",        "cow",
          "elephant",      "bear",         "zebra",         "giraffe",      "backpack",
          "umbrella",      "handbag",      "tie",           "suitcase",     "frisbee",
          "skis",          "snowboard",    "sports ball",   "kite",         "baseball bat",
          "baseball glove","skateboard",   "surfboard",     "tennis racket","bottle",
          "wine glass",    "cup",          "fork",          "knife",        "spoon",
          "bowl",          "banana",       "apple",         "sandwich",     "orange",
          "broccoli",      "carrot",       "hot dog",       "pizza",        "donut",
          "cake",          "chair",        "couch",         "potted plant", "bed",
          "dining table",  "toilet",       "tv",            "laptop",       "mouse",
          "remote",        "keyboard",     "cell phone",    "microwave",    "oven",
          "toaster",       "sink",         "refrigerator",  "book",         "clock",
          "vase",          "scissors",     "teddy bear",    "hair drier",   "toothbrush"};
}

SceneSentence encode_scene(const std::vector<SceneObject>& objects, const Vocabulary& vocab) {
  SceneSentence s;
  s.reserve(objects.size());
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const SceneObject& o = objects[i];
    if (!(o.x_min >= 0.0 && o.x_min <= o.x_max && o.x_max <= 1.0 && o.y_min >= 0.0 &&
          o.y_min <= o.y_max && o.y_max <= 1.0))
      throw std::domain_error("scene_lang: object " + std::to_string(i) +
                              " has an invalid box, corners must satisfy 0 <= min <= max <= 1");
    const int cell =
        grid_cell_of((o.x_min + o.x_max) / 2.0, (o.y_min + o.y_max) / 2.0, vocab.grid());
    s.push_back(SceneWord{cell, vocab.category_index(o.category)});
  }
  sort_canonical(s);
  return s;
}

TokenSequence tokenize(const SceneSentence& s, const Vocabulary& vocab) {
  TokenSequence tokens;
  tokens.reserve(s.size());
  for (const SceneWord& w : s) tokens.push_back(vocab.token_of(w));
  return tokens;
}

SceneSentence detokenize(const TokenSequence& tokens, const Vocabulary& vocab) {
  SceneSentence s;
  s.reserve(tokens.size());
  for (int t : tokens) s.push_back(vocab.word_of(t));
  return s;
}

}  // namespace scenebert
