#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "scenebert/attacks.hpp"
#include "scenebert/baselines.hpp"
#include "scenebert/corpus.hpp"
#include "scenebert/eval.hpp"
#include "scenebert/model.hpp"
#include "scenebert/rng.hpp"
#include "scenebert/scene_lang.hpp"
#include "scenebert/scorer.hpp"
#include "scenebert/util.hpp"

namespace {

using nlohmann::json;
using namespace scenebert;

std::string scalar_text(const json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

// JSON config files hold defaults for any flag the user left unset; flags
// always win. Flat keys name long options without the dashes; an object keyed
// by the subcommand name overrides the flat layer; keys matching nothing are
// ignored, so one file can configure a whole pipeline.
void apply_config_defaults(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("cli: config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object())
    throw std::runtime_error("cli: config file " + path + " must hold a JSON object");
  json merged = json::object();
  for (const auto& [key, value] : j.items())
    if (!value.is_object()) merged[key] = value;
  if (j.contains(cmd->get_name()) && j[cmd->get_name()].is_object())
    for (const auto& [key, value] : j[cmd->get_name()].items()) merged[key] = value;

  for (const auto& [key, value] : merged.items()) {
    if (key == "config" || value.is_null()) continue;
    CLI::Option* op = cmd->get_option_no_throw("--" + key);
    if (op == nullptr || op->count() > 0) continue;
    if (value.is_array())
      for (const json& v : value) op->add_result(scalar_text(v));
    else
      op->add_result(scalar_text(value));
    op->run_callback();
  }
}

void add_config_option(CLI::App& cmd, std::string& var) {
  cmd.add_option("--config", var, "JSON file with defaults for this command's flags")
      ->check(CLI::ExistingFile);
}

void require_value(const std::string& value, const char* flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

std::vector<std::string> with_config(std::vector<std::string> inputs, const std::string& config) {
  if (!config.empty()) inputs.push_back(config);
  return inputs;
}

std::string hash_string(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// The run manifest pins everything a rerun needs: resolved option values,
// seeds, and fingerprints of every input file. No clocks, no environment.
void write_manifest(const std::string& path, const std::string& command, const json& options,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json in = json::object();
  for (const std::string& p : inputs) in[p] = hash_string(fnv1a64_file(p));
  const json j{
      {"command", command}, {"options", options}, {"inputs", in}, {"outputs", outputs}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("io: cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("io: write failed for " + path);
}

GridSpec grid_from_string(const std::string& text) {
  const auto [rows, cols] = parse_grid_string(text);
  return GridSpec{rows, cols};
}

std::vector<std::string> read_category_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("io: cannot open " + path);
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  if (names.empty()) throw std::runtime_error("cli: category file " + path + " is empty");
  return names;
}

std::vector<std::pair<std::string, SceneSentence>> load_encoded_scenes(
    const std::string& scenes_path, const Vocabulary& vocab) {
  return encode_records(read_scenes_jsonl(scenes_path), vocab);
}

struct VocabArgs {
  std::string config;
  bool voc = false;
  bool coco = false;
  std::string categories_path;
  std::string grid = "3x3";
  std::string out = "vocab.json";
};

void setup_vocab(CLI::App& app) {
  auto args = std::make_shared<VocabArgs>();
  CLI::App* cmd = app.add_subcommand(
      "vocab", "Build a vocabulary from a category set and a grid");
  add_config_option(*cmd, args->config);
  CLI::Option* voc = cmd->add_flag("--voc", args->voc, "20-category detector label set");
  CLI::Option* coco = cmd->add_flag("--coco", args->coco, "80-category detector label set");
  CLI::Option* cat = cmd->add_option("--categories", args->categories_path,
                                     "file with one category name per line")
                         ->check(CLI::ExistingFile);
  voc->excludes(coco, cat);
  coco->excludes(cat);
  cmd->add_option("--grid", args->grid, "grid as RxC")->capture_default_str();
  cmd->add_option("--out", args->out, "output vocabulary path")->capture_default_str();
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    const GridSpec grid = grid_from_string(args->grid);
    std::vector<std::string> names;
    std::vector<std::string> inputs;
    if (args->voc) {
      names = voc_categories();
    } else if (args->coco) {
      names = coco_categories();
    } else if (!args->categories_path.empty()) {
      names = read_category_file(args->categories_path);
      inputs.push_back(args->categories_path);
    } else {
      throw CLI::RequiredError("one of --voc, --coco, --categories");
    }
    const Vocabulary vocab(names, grid);
    vocab.save(args->out);
    const json options{{"source", args->voc ? "voc" : (args->coco ? "coco" : "categories")},
                       {"categories", args->categories_path},
                       {"grid", args->grid},
                       {"out", args->out}};
    write_manifest(args->out + ".manifest.json", "vocab", options,
                   with_config(inputs, args->config), {args->out});
    std::cout << "object tokens: " << vocab.object_token_count() << "\n";
  });
}

struct ImportArgs {
  std::string config;
  std::string instances;
  std::string out;
  std::size_t min_objects = 0;
};

void setup_import(CLI::App& app) {
  auto args = std::make_shared<ImportArgs>();
  CLI::App* cmd = app.add_subcommand("import", "Convert COCO instance annotations to scenes");
  add_config_option(*cmd, args->config);
  cmd->add_option("--instances", args->instances, "COCO instances JSON")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", args->out, "output scenes JSONL");
  cmd->add_option("--min-objects", args->min_objects, "drop scenes with fewer objects")
      ->capture_default_str();
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    require_value(args->instances, "--instances");
    require_value(args->out, "--out");
    std::vector<SceneRecord> records = import_coco(args->instances);
    const std::size_t total = records.size();
    if (args->min_objects > 0) records = filter_min_objects(std::move(records), args->min_objects);
    write_scenes_jsonl(args->out, records);
    const json options{{"instances", args->instances},
                       {"out", args->out},
                       {"min-objects", args->min_objects}};
    write_manifest(args->out + ".manifest.json", "import", options,
                   with_config({args->instances}, args->config), {args->out});
    std::cout << "imported " << records.size() << " scenes (of " << total << " images)\n";
  });
}

struct SynthArgs {
  std::string config;
  std::string out_dir;
  int themes = 5;
  int group_size = 4;
  std::string grid = "3x3";
  double home_prob = 0.6;
  int min_objects = 2;
  int max_objects = 6;
  std::size_t scenes = 1000;
  std::uint64_t seed = 0;
};

void setup_synth(CLI::App& app) {
  auto args = std::make_shared<SynthArgs>();
  CLI::App* cmd = app.add_subcommand(
      "synth", "Generate a synthetic themed corpus with a known generative process");
  add_config_option(*cmd, args->config);
  cmd->add_option("--out-dir", args->out_dir, "directory for world, vocab and scenes");
  cmd->add_option("--themes", args->themes, "number of themes")->capture_default_str();
  cmd->add_option("--group-size", args->group_size, "categories per theme")
      ->capture_default_str();
  cmd->add_option("--grid", args->grid, "grid as RxC")->capture_default_str();
  cmd->add_option("--home-prob", args->home_prob, "chance an object sits on its home cell")
      ->capture_default_str();
  cmd->add_option("--min-objects", args->min_objects, "minimum objects per scene")
      ->capture_default_str();
  cmd->add_option("--max-objects", args->max_objects, "maximum objects per scene")
      ->capture_default_str();
  cmd->add_option("--scenes", args->scenes, "number of scenes")->capture_default_str();
  cmd->add_option("--seed", args->seed, "generator seed")->capture_default_str();
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    require_value(args->out_dir, "--out-dir");
    SyntheticWorldSpec world;
    world.n_themes = args->themes;
    world.group_size = args->group_size;
    world.grid = grid_from_string(args->grid);
    world.home_prob = args->home_prob;
    world.min_objects = args->min_objects;
    world.max_objects = args->max_objects;
    world.validate();

    std::filesystem::create_directories(args->out_dir);
    const std::string world_path = args->out_dir + "/world.json";
    const std::string vocab_path = args->out_dir + "/vocab.json";
    const std::string scenes_path = args->out_dir + "/scenes.jsonl";
    world.save(world_path);
    world.vocabulary().save(vocab_path);
    const std::vector<SceneSentence> sentences =
        generate_synthetic(world, args->scenes, args->seed);
    write_scenes_jsonl(scenes_path, materialize_records(sentences, world));

    const json options{{"out-dir", args->out_dir},     {"themes", args->themes},
                       {"group-size", args->group_size}, {"grid", args->grid},
                       {"home-prob", args->home_prob},   {"min-objects", args->min_objects},
                       {"max-objects", args->max_objects}, {"scenes", args->scenes},
                       {"seed", args->seed}};
    write_manifest(args->out_dir + "/manifest.json", "synth", options,
                   with_config({}, args->config), {world_path, vocab_path, scenes_path});
    std::cout << "generated " << sentences.size() << " scenes\n";
  });
}

struct TrainArgs {
  std::string config;
  std::string scenes;
  std::string vocab;
  std::string out;
  int layers = 6;
  int heads = 12;
  int hidden = 96;
  int ffn = 0;
  int max_seq_len = 64;
  double dropout = 0.1;
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t min_objects = 2;
  double holdout_fraction = 0.0;
  bool verbose = false;
};

void setup_train(CLI::App& app) {
  auto args = std::make_shared<TrainArgs>();
  CLI::App* cmd = app.add_subcommand("train", "Train the masked scene model on a corpus");
  add_config_option(*cmd, args->config);
  cmd->add_option("--scenes", args->scenes, "training scenes JSONL")->check(CLI::ExistingFile);
  cmd->add_option("--vocab", args->vocab, "vocabulary JSON")->check(CLI::ExistingFile);
  cmd->add_option("--out", args->out, "checkpoint output path");
  cmd->add_option("--layers", args->layers)->capture_default_str();
  cmd->add_option("--heads", args->heads)->capture_default_str();
  cmd->add_option("--hidden", args->hidden)->capture_default_str();
  cmd->add_option("--ffn", args->ffn, "feed-forward width, 0 means 4x hidden")
      ->capture_default_str();
  cmd->add_option("--max-seq-len", args->max_seq_len)->capture_default_str();
  cmd->add_option("--dropout", args->dropout)->capture_default_str();
  cmd->add_option("--epochs", args->epochs)->capture_default_str();
  cmd->add_option("--batch-size", args->batch_size)->capture_default_str();
  cmd->add_option("--lr", args->lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--seed", args->seed, "init and shuffle seed")->capture_default_str();
  cmd->add_option("--min-objects", args->min_objects, "drop shorter sentences before training")
      ->capture_default_str();
  cmd->add_option("--holdout-fraction", args->holdout_fraction,
                  "fraction of sentences held out and reported as masked NLL")
      ->capture_default_str();
  cmd->add_flag("--verbose", args->verbose, "epoch losses to stderr");
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    require_value(args->scenes, "--scenes");
    require_value(args->vocab, "--vocab");
    require_value(args->out, "--out");
    const Vocabulary vocab = Vocabulary::load(args->vocab);
    std::vector<std::pair<std::string, SceneSentence>> encoded =
        load_encoded_scenes(args->scenes, vocab);
    if (args->min_objects > 0)
      encoded = filter_min_objects(std::move(encoded), args->min_objects);
    std::vector<TokenSequence> sequences;
    sequences.reserve(encoded.size());
    for (const auto& [id, sentence] : encoded) sequences.push_back(tokenize(sentence, vocab));

    std::vector<TokenSequence> holdout;
    if (args->holdout_fraction > 0.0) {
      auto [head, tail] =
          split_corpus(std::move(sequences), args->holdout_fraction, mix_seed(args->seed, 2));
      holdout = std::move(head);
      sequences = std::move(tail);
    }
    if (sequences.empty()) throw std::runtime_error("cli: no training sentences left");

    ModelConfig cfg;
    cfg.n_layers = args->layers;
    cfg.n_heads = args->heads;
    cfg.hidden_dim = args->hidden;
    cfg.ffn_dim = args->ffn;
    cfg.max_seq_len = args->max_seq_len;
    cfg.vocab_size = vocab.size();
    cfg.dropout_prob = args->dropout;
    cfg.seed = args->seed;
    cfg.validate();

    ModelParams<float> params = init_params<float>(cfg);
    AdamState<float> adam = init_adam<float>(cfg, args->lr);
    TrainOptions opts;
    opts.epochs = args->epochs;
    opts.batch_size = args->batch_size;
    opts.seed = mix_seed(args->seed, 1);
    opts.verbose = args->verbose;
    const TrainResult<float> result = train<float>(params, cfg, adam, sequences, opts);
    save_checkpoint(args->out, params, cfg);

    const json options{{"scenes", args->scenes},
                       {"vocab", args->vocab},
                       {"out", args->out},
                       {"layers", args->layers},
                       {"heads", args->heads},
                       {"hidden", args->hidden},
                       {"ffn", cfg.resolved_ffn_dim()},
                       {"max-seq-len", args->max_seq_len},
                       {"dropout", args->dropout},
                       {"epochs", args->epochs},
                       {"batch-size", args->batch_size},
                       {"lr", args->lr},
                       {"seed", args->seed},
                       {"min-objects", args->min_objects},
                       {"holdout-fraction", args->holdout_fraction}};
    write_manifest(args->out + ".manifest.json", "train", options,
                   with_config({args->scenes, args->vocab}, args->config), {args->out});

    std::cout << "trained on " << sequences.size() << " sentences";
    if (!result.epoch_loss.empty())
      std::cout << ", final epoch loss " << format_double(result.epoch_loss.back());
    std::cout << "\n";
    if (!holdout.empty())
      std::cout << "holdout masked nll: "
                << format_double(evaluate_mlm_loss<float>(params, cfg, holdout)) << " over "
                << holdout.size() << " sentences\n";
  });
}

struct AttackArgs {
  std::string config;
  std::string scenes;
  std::string vocab;
  std::string out;
  std::string type;
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  std::string pool = "uniform";
  int group_size = 0;
};

void setup_attack(CLI::App& app) {
  auto args = std::make_shared<AttackArgs>();
  CLI::App* cmd = app.add_subcommand("attack", "Forge attacked variants of benign scenes");
  add_config_option(*cmd, args->config);
  cmd->add_option("--scenes", args->scenes, "benign scenes JSONL")->check(CLI::ExistingFile);
  cmd->add_option("--vocab", args->vocab, "vocabulary JSON")->check(CLI::ExistingFile);
  cmd->add_option("--out", args->out, "output attacks JSONL");
  cmd->add_option("--type", args->type, "misclassification, hiding or appearing");
  cmd->add_option("--count", args->count, "number of attacks")->capture_default_str();
  cmd->add_option("--seed", args->seed, "master seed")->capture_default_str();
  cmd->add_option("--pool", args->pool, "category pool: uniform or cross-theme")
      ->check(CLI::IsMember({"uniform", "cross-theme"}))
      ->capture_default_str();
  cmd->add_option("--group-size", args->group_size,
                  "theme width, required for the cross-theme pool")
      ->capture_default_str();
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    require_value(args->scenes, "--scenes");
    require_value(args->vocab, "--vocab");
    require_value(args->out, "--out");
    require_value(args->type, "--type");
    const Vocabulary vocab = Vocabulary::load(args->vocab);
    const auto corpus = load_encoded_scenes(args->scenes, vocab);
    PoolPolicy policy;
    policy.n_categories = vocab.category_count();
    if (args->pool == "cross-theme") {
      policy.kind = PoolPolicy::Kind::cross_theme;
      if (args->group_size < 1)
        throw std::runtime_error("cli: the cross-theme pool needs --group-size");
      policy.group_size = args->group_size;
    }
    const std::vector<AttackRecord> attacks =
        generate_attack_set(corpus, attack_type_from_name(args->type), args->count, args->seed,
                            policy, vocab.grid());
    write_attacks_jsonl(args->out, attacks);
    const json options{{"scenes", args->scenes}, {"vocab", args->vocab},
                       {"out", args->out},       {"type", args->type},
                       {"count", args->count},   {"seed", args->seed},
                       {"pool", args->pool},     {"group-size", args->group_size}};
    write_manifest(args->out + ".manifest.json", "attack", options,
                   with_config({args->scenes, args->vocab}, args->config), {args->out});
    std::cout << "generated " << attacks.size() << " " << args->type << " attacks\n";
  });
}

struct ScoreArgs {
  std::string config;
  std::string checkpoint;
  std::string vocab;
  std::string scenes;
  std::string attacks;
  std::string variant = "strict";
  int k = 0;
  int workers = 1;
  std::string out_dir;
};

void score_to_file(const std::string& path, const ModelParams<float>& params,
                   const ModelConfig& cfg, const std::vector<std::string>& ids,
                   const std::vector<TokenSequence>& batch, ScoreVariant variant, int k,
                   int grid_cells, int workers, std::size_t& failures) {
  const std::vector<ScoreOutcome> outcomes =
      score_batch(params, cfg, batch, variant, k, grid_cells, workers);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("io: cannot write " + path);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].ok) {
      out << report_json_line(ids[i], outcomes[i].report) << '\n';
    } else {
      out << json{{"scene_id", ids[i]}, {"error", outcomes[i].error}}.dump() << '\n';
      ++failures;
    }
  }
  if (!out) throw std::runtime_error("io: write failed for " + path);
}

void setup_score(CLI::App& app) {
  auto args = std::make_shared<ScoreArgs>();
  CLI::App* cmd = app.add_subcommand(
      "score", "Consistency-score scenes or attack pairs with a trained model");
  add_config_option(*cmd, args->config);
  cmd->add_option("--checkpoint", args->checkpoint, "trained model checkpoint");
  cmd->add_option("--vocab", args->vocab, "vocabulary JSON")->check(CLI::ExistingFile);
  CLI::Option* scenes = cmd->add_option("--scenes", args->scenes, "scenes JSONL to score")
                            ->check(CLI::ExistingFile);
  CLI::Option* attacks =
      cmd->add_option("--attacks", args->attacks, "attack set JSONL; scores both sides")
          ->check(CLI::ExistingFile);
  scenes->excludes(attacks);
  cmd->add_option("--variant", args->variant, "strict or relax")
      ->check(CLI::IsMember({"strict", "relax"}))
      ->capture_default_str();
  cmd->add_option("--k", args->k, "top-k cutoff, 0 keeps the full list")->capture_default_str();
  cmd->add_option("--workers", args->workers, "scoring threads")->capture_default_str();
  cmd->add_option("--out-dir", args->out_dir, "directory for score files");
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    require_value(args->checkpoint, "--checkpoint");
    require_value(args->vocab, "--vocab");
    require_value(args->out_dir, "--out-dir");
    if (args->scenes.empty() == args->attacks.empty())
      throw std::runtime_error("cli: pass exactly one of --scenes or --attacks");
    const Vocabulary vocab = Vocabulary::load(args->vocab);
    const Checkpoint ck = load_checkpoint(args->checkpoint);
    if (ck.config.vocab_size != vocab.size())
      throw std::runtime_error(
          "cli: vocabulary has " + std::to_string(vocab.size()) + " tokens but the checkpoint " +
          args->checkpoint + " was trained with " + std::to_string(ck.config.vocab_size));
    const ScoreVariant variant = score_variant_from_name(args->variant);
    const int grid_cells = vocab.grid().cell_count();
    if (args->k < 0) throw std::runtime_error("cli: --k must be nonnegative");

    std::filesystem::create_directories(args->out_dir);
    std::size_t failures = 0, total = 0;
    std::vector<std::string> out_files;
    std::vector<std::string> inputs{args->checkpoint, args->vocab};
    if (!args->scenes.empty()) {
      inputs.push_back(args->scenes);
      const auto corpus = load_encoded_scenes(args->scenes, vocab);
      std::vector<std::string> ids;
      std::vector<TokenSequence> batch;
      for (const auto& [id, sentence] : corpus) {
        ids.push_back(id);
        batch.push_back(tokenize(sentence, vocab));
      }
      total = batch.size();
      const std::string path = args->out_dir + "/scores.jsonl";
      score_to_file(path, ck.params, ck.config, ids, batch, variant, args->k, grid_cells,
                    args->workers, failures);
      out_files.push_back(path);
    } else {
      inputs.push_back(args->attacks);
      const std::vector<AttackRecord> records = read_attacks_jsonl(args->attacks);
      std::vector<std::string> ids;
      std::vector<TokenSequence> benign, attacked;
      for (const AttackRecord& r : records) {
        ids.push_back(r.scene_id);
        benign.push_back(tokenize(r.benign, vocab));
        attacked.push_back(tokenize(r.attacked, vocab));
      }
      total = 2 * records.size();
      const std::string benign_path = args->out_dir + "/benign.jsonl";
      const std::string adv_path = args->out_dir + "/adversarial.jsonl";
      score_to_file(benign_path, ck.params, ck.config, ids, benign, variant, args->k, grid_cells,
                    args->workers, failures);
      score_to_file(adv_path, ck.params, ck.config, ids, attacked, variant, args->k, grid_cells,
                    args->workers, failures);
      out_files.push_back(benign_path);
      out_files.push_back(adv_path);
    }

    const json options{{"checkpoint", args->checkpoint},
                       {"vocab", args->vocab},
                       {"scenes", args->scenes},
                       {"attacks", args->attacks},
                       {"variant", args->variant},
                       {"k", args->k},
                       {"workers", args->workers},
                       {"out-dir", args->out_dir}};
    write_manifest(args->out_dir + "/manifest.json", "score", options,
                   with_config(std::move(inputs), args->config), out_files);
    std::cout << "scored " << total << " sentences (" << args->variant << ", k=" << args->k
              << ")\n";
    if (failures > 0)
      throw std::runtime_error("scorer: " + std::to_string(failures) + " of " +
                               std::to_string(total) + " sentences failed, see the error rows");
  });
}

struct EvalArgs {
  std::string config;
  std::vector<std::string> pairs;
  int bins = 50;
  std::string out_dir;
};

std::vector<double> read_scores_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("io: cannot open " + path);
  std::vector<double> scores;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("eval: " + path + " line " + std::to_string(line_no) +
                               " is not JSON: " + e.what());
    }
    if (j.contains("error"))
      throw std::runtime_error("eval: " + path + " line " + std::to_string(line_no) +
                               " records a scoring failure: " + j["error"].get<std::string>());
    if (!j.contains("score"))
      throw std::runtime_error("eval: " + path + " line " + std::to_string(line_no) +
                               " has no score field");
    scores.push_back(j["score"].get<double>());
  }
  if (scores.empty()) throw std::runtime_error("eval: " + path + " holds no scores");
  return scores;
}

void setup_eval(CLI::App& app) {
  auto args = std::make_shared<EvalArgs>();
  CLI::App* cmd = app.add_subcommand(
      "eval", "Detection report (AUC, ROC, densities) from scored benign/adversarial pairs");
  add_config_option(*cmd, args->config);
  cmd->add_option("--pair", args->pairs,
                  "tag=benign_scores.jsonl:adversarial_scores.jsonl, repeatable");
  cmd->add_option("--bins", args->bins, "density histogram bins")->capture_default_str();
  cmd->add_option("--out-dir", args->out_dir, "report directory");
  cmd->callback([cmd, args] {
    apply_config_defaults(cmd, args->config);
    if (args->pairs.empty()) throw CLI::RequiredError("--pair");
    require_value(args->out_dir, "--out-dir");
    std::vector<EvalPair> pairs;
    std::vector<std::string> inputs;
    json pair_options = json::object();
    for (const std::string& text : args->pairs) {
      const std::size_t eq = text.find('=');
      const std::size_t colon = text.find(':', eq == std::string::npos ? 0 : eq + 1);
      if (eq == std::string::npos || colon == std::string::npos || eq == 0 ||
          colon == eq + 1 || colon + 1 >= text.size())
        throw std::runtime_error("cli: --pair must look like tag=benign.jsonl:adversarial.jsonl, "
                                 "got '" + text + "'");
      EvalPair pair;
      pair.tag = text.substr(0, eq);
      const std::string benign_path = text.substr(eq + 1, colon - eq - 1);
      const std::string adv_path = text.substr(colon + 1);
      pair.set.benign = read_scores_jsonl(benign_path);
      pair.set.adversarial = read_scores_jsonl(adv_path);
      inputs.push_back(benign_path);
      inputs.push_back(adv_path);
      pair_options[pair.tag] = {{"benign", benign_path}, {"adversarial", adv_path}};
      pairs.push_back(std::move(pair));
    }
    const json metadata{{"pairs", pair_options}, {"bins", args->bins}};
    write_report(pairs, args->bins, args->out_dir, metadata);
    for (const EvalPair& pair : pairs)
      std::cout << "auc " << pair.tag << ": " << format_double(auc(pair.set)) << "\n";

    std::vector<std::string> outputs{args->out_dir + "/metrics.json"};
    for (const EvalPair& pair : pairs) {
      outputs.push_back(args->out_dir + "/roc_" + pair.tag + ".csv");
      outputs.push_back(args->out_dir + "/density_" + pair.tag + "_benign.csv");
      outputs.push_back(args->out_dir + "/density_" + pair.tag + "_adversarial.csv");
    }
    const json options{{"pair", args->pairs}, {"bins", args->bins}, {"out-dir", args->out_dir}};
    write_manifest(args->out_dir + "/manifest.json", "eval", options,
                   with_config(std::move(inputs), args->config), outputs);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scene-language consistency pipeline: vocabularies, corpora, model training, "
               "attacks, scoring and detection reports"};
  app.require_subcommand(1);
  setup_vocab(app);
  setup_import(app);
  setup_synth(app);
  setup_train(app);
  setup_attack(app);
  setup_score(app);
  setup_eval(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "scenebert: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
