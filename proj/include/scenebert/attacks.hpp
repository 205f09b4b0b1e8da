#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scenebert/scene_lang.hpp"

namespace scenebert {

enum class AttackType { misclassification, hiding, appearing };

std::string attack_type_name(AttackType t);
AttackType attack_type_from_name(const std::string& name);

// Raised when a particular draw cannot produce a valid attack (for example a
// one-object scene for hiding); the set generator skips such draws.
struct attack_infeasible_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AttackTarget {
  int index = -1;          // victim position in the benign sentence, -1 for appearing
  int cell = 0;            // victim's or the inserted word's cell
  int from_category = -1;  // original category, -1 for appearing
  int to_category = -1;    // replacement or inserted category, -1 for hiding
};

struct AttackRecord {
  std::string scene_id;
  AttackType type = AttackType::misclassification;
  std::uint64_t seed = 0;
  SceneSentence benign;
  SceneSentence attacked;
  AttackTarget target;
};

// Which categories an attack may introduce.
struct PoolPolicy {
  enum class Kind { uniform, cross_theme };
  Kind kind = Kind::uniform;
  int n_categories = 0;
  int group_size = 0;  // theme width, cross_theme only

  // Candidates for one benign sentence. cross_theme removes every theme that
  // already appears in the sentence.
  std::vector<int> candidates(const SceneSentence& s) const;
};

// Replaces one uniformly chosen word's category with a uniform pick from the
// pool (minus the victim's own category); the cell stays put.
AttackRecord attack_misclassify(const SceneSentence& benign, std::uint64_t seed,
                                const std::vector<int>& pool);

// Removes one uniformly chosen word. Needs at least two objects.
AttackRecord attack_hide(const SceneSentence& benign, std::uint64_t seed);

// Inserts a uniform (cell, pool category) word not already present. Exact
// saturation is detected up front; collisions re-sample a bounded number of
// times, then fall back to enumerating the free combinations.
AttackRecord attack_appear(const SceneSentence& benign, std::uint64_t seed,
                           const std::vector<int>& pool, const GridSpec& grid);

// Draws scenes uniformly until `count` attacks exist. Each draw gets its own
// seed derived from the master seed and the draw index, so any record can be
// regenerated from its benign sentence and recorded seed alone.
std::vector<AttackRecord> generate_attack_set(
    const std::vector<std::pair<std::string, SceneSentence>>& corpus, AttackType type,
    std::size_t count, std::uint64_t master_seed, const PoolPolicy& policy, const GridSpec& grid);

void write_attacks_jsonl(const std::string& path, const std::vector<AttackRecord>& records);
std::vector<AttackRecord> read_attacks_jsonl(const std::string& path);

}  // namespace scenebert
