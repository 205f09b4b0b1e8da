#include "scenebert/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "scenebert/util.hpp"

namespace scenebert {

namespace {

using nlohmann::json;

SceneObject object_from_json(const json& j, const std::string& where) {
  if (!j.contains("category") || !j.contains("bbox"))
    throw std::runtime_error("corpus: object without category/bbox in " + where);
  const json& box = j["bbox"];
  if (!box.is_array() || box.size() != 4)
    throw std::runtime_error("corpus: bbox must have four numbers in " + where);
  SceneObject o;
  o.category = j["category"].get<std::string>();
  o.x_min = box[0].get<double>();
  o.y_min = box[1].get<double>();
  o.x_max = box[2].get<double>();
  o.y_max = box[3].get<double>();
  return o;
}

}  // namespace

std::vector<SceneRecord> read_scenes_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("corpus: cannot open " + path);
  std::vector<SceneRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("corpus: malformed JSON at " + where + ": " + e.what());
    }
    if (!j.contains("scene_id") || !j.contains("objects"))
      throw std::runtime_error("corpus: missing scene_id/objects at " + where);
    SceneRecord r;
    r.scene_id = j["scene_id"].is_string() ? j["scene_id"].get<std::string>() : j["scene_id"].dump();
    for (const json& obj : j["objects"]) r.objects.push_back(object_from_json(obj, where));
    records.push_back(std::move(r));
  }
  return records;
}

void write_scenes_jsonl(const std::string& path, const std::vector<SceneRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  for (const SceneRecord& r : records) {
    json objs = json::array();
    for (const SceneObject& o : r.objects)
      objs.push_back({{"category", o.category}, {"bbox", {o.x_min, o.y_min, o.x_max, o.y_max}}});
    out << json{{"scene_id", r.scene_id}, {"objects", std::move(objs)}}.dump() << '\n';
  }
  if (!out) throw std::runtime_error("corpus: write failed for " + path);
}

std::vector<std::pair<std::string, SceneSentence>> encode_records(
    const std::vector<SceneRecord>& records, const Vocabulary& vocab) {
  std::vector<std::pair<std::string, SceneSentence>> out;
  out.reserve(records.size());
  for (const SceneRecord& r : records) {
    try {
      out.emplace_back(r.scene_id, encode_scene(r.objects, vocab));
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus: scene '" + r.scene_id + "': " + e.what());
    }
  }
  return out;
}

std::vector<SceneRecord> import_coco(const std::string& instances_json_path) {
  json j;
  try {
    j = json::parse(read_file(instances_json_path));
  } catch (const json::exception& e) {
    throw std::runtime_error("corpus: malformed COCO JSON in " + instances_json_path + ": " +
                             e.what());
  }
  if (!j.contains("images") || !j.contains("annotations") || !j.contains("categories"))
    throw std::runtime_error("corpus: " + instances_json_path +
                             " lacks images/annotations/categories");

  struct ImageInfo {
    double width, height;
    std::size_t record;
  };
  std::unordered_map<std::int64_t, ImageInfo> images;
  std::vector<SceneRecord> records;
  for (const json& img : j["images"]) {
    const auto id = img.at("id").get<std::int64_t>();
    const double w = img.at("width").get<double>();
    const double h = img.at("height").get<double>();
    if (w <= 0 || h <= 0)
      throw std::runtime_error("corpus: image " + std::to_string(id) + " has nonpositive size");
    if (!images.emplace(id, ImageInfo{w, h, records.size()}).second)
      throw std::runtime_error("corpus: duplicate image id " + std::to_string(id));
    records.push_back(SceneRecord{std::to_string(id), {}});
  }

  std::unordered_map<std::int64_t, std::string> categories;
  for (const json& cat : j["categories"])
    categories[cat.at("id").get<std::int64_t>()] = cat.at("name").get<std::string>();

  for (const json& ann : j["annotations"]) {
    const auto image_id = ann.at("image_id").get<std::int64_t>();
    const auto cat_id = ann.at("category_id").get<std::int64_t>();
    const auto img_it = images.find(image_id);
    if (img_it == images.end())
      throw std::runtime_error("corpus: annotation references unknown image " +
                               std::to_string(image_id));
    const auto cat_it = categories.find(cat_id);
    if (cat_it == categories.end())
      throw std::runtime_error("corpus: annotation references unknown category " +
                               std::to_string(cat_id));
    const json& box = ann.at("bbox");  // COCO convention: [x, y, width, height] in pixels
    if (!box.is_array() || box.size() != 4)
      throw std::runtime_error("corpus: annotation for image " + std::to_string(image_id) +
                               " has a malformed bbox");
    const ImageInfo& info = img_it->second;
    const auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
    SceneObject o;
    o.category = cat_it->second;
    o.x_min = clamp01(box[0].get<double>() / info.width);
    o.y_min = clamp01(box[1].get<double>() / info.height);
    o.x_max = clamp01((box[0].get<double>() + box[2].get<double>()) / info.width);
    o.y_max = clamp01((box[1].get<double>() + box[3].get<double>()) / info.height);
    if (o.x_min > o.x_max || o.y_min > o.y_max)
      throw std::runtime_error("corpus: annotation for image " + std::to_string(image_id) +
                               " has negative box extent");
    records[info.record].objects.push_back(std::move(o));
  }
  return records;
}

void SyntheticWorldSpec::validate() const {
  if (n_themes < 1 || group_size < 1)
    throw std::invalid_argument("corpus: world needs at least one theme of one category");
  if (grid.rows < 1 || grid.cols < 1) throw std::invalid_argument("corpus: world grid too small");
  if (grid.cell_count() < 2)
    throw std::invalid_argument("corpus: world needs at least two grid cells");
  if (!(home_prob >= 0.0 && home_prob <= 1.0))
    throw std::invalid_argument("corpus: home_prob must lie in [0, 1]");
  if (min_objects < 1 || max_objects < min_objects)
    throw std::invalid_argument("corpus: need 1 <= min_objects <= max_objects");
}

std::vector<std::string> SyntheticWorldSpec::category_names() const {
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(category_count()));
  for (int t = 0; t < n_themes; ++t)
    for (int g = 0; g < group_size; ++g)
      names.push_back("theme" + std::to_string(t) + "_obj" + std::to_string(g));
  return names;
}

Vocabulary SyntheticWorldSpec::vocabulary() const {
  validate();
  return Vocabulary(category_names(), grid);
}

void SyntheticWorldSpec::save(const std::string& path) const {
  nlohmann::json j{{"n_themes", n_themes},
                   {"group_size", group_size},
                   {"grid", {{"h", grid.rows}, {"w", grid.cols}}},
                   {"home_prob", home_prob},
                   {"min_objects", min_objects},
                   {"max_objects", max_objects}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("corpus: cannot write " + path);
  out << j.dump(2) << '\n';
}

SyntheticWorldSpec SyntheticWorldSpec::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corpus: malformed world file " + path + ": " + e.what());
  }
  SyntheticWorldSpec w;
  w.n_themes = j.at("n_themes").get<int>();
  w.group_size = j.at("group_size").get<int>();
  w.grid = GridSpec{j.at("grid").at("h").get<int>(), j.at("grid").at("w").get<int>()};
  w.home_prob = j.at("home_prob").get<double>();
  w.min_objects = j.at("min_objects").get<int>();
  w.max_objects = j.at("max_objects").get<int>();
  w.validate();
  return w;
}

std::vector<SceneSentence> generate_synthetic(const SyntheticWorldSpec& world,
                                              std::size_t n_scenes, std::uint64_t seed) {
  world.validate();
  Rng rng(seed);
  std::vector<SceneSentence> scenes;
  scenes.reserve(n_scenes);
  const int cells = world.grid.cell_count();
  for (std::size_t s = 0; s < n_scenes; ++s) {
    const int theme = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(world.n_themes)));
    const int m = world.min_objects +
                  static_cast<int>(rng.uniform_below(
                      static_cast<std::uint64_t>(world.max_objects - world.min_objects + 1)));
    SceneSentence sentence;
    sentence.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
      const int cat = theme * world.group_size +
                      static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(world.group_size)));
      const int home = world.home_cell(cat);
      int cell;
      if (rng.bernoulli(world.home_prob)) {
        cell = home;
      } else {
        cell = 1 + static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(cells - 1)));
        if (cell >= home) ++cell;
      }
      sentence.push_back(SceneWord{cell, cat});
    }
    sort_canonical(sentence);
    scenes.push_back(std::move(sentence));
  }
  return scenes;
}

std::vector<SceneRecord> materialize_records(const std::vector<SceneSentence>& sentences,
                                             const SyntheticWorldSpec& world) {
  const std::vector<std::string> names = world.category_names();
  std::vector<SceneRecord> records;
  records.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    SceneRecord r;
    r.scene_id = "synth" + std::to_string(i);
    for (const SceneWord& w : sentences[i]) {
      const int row = (w.cell - 1) / world.grid.cols;
      const int col = (w.cell - 1) % world.grid.cols;
      const double cw = 1.0 / world.grid.cols;
      const double ch = 1.0 / world.grid.rows;
      // Box of 60% cell size centered on the cell, so encoding round-trips.
      SceneObject o;
      o.category = names[static_cast<std::size_t>(w.category_index)];
      o.x_min = (col + 0.2) * cw;
      o.x_max = (col + 0.8) * cw;
      o.y_min = (row + 0.2) * ch;
      o.y_max = (row + 0.8) * ch;
      r.objects.push_back(std::move(o));
    }
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace scenebert
