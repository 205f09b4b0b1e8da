#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "scenebert/model.hpp"
#include "scenebert/rng.hpp"

using namespace scenebert;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.hidden_dim = 16;
  cfg.ffn_dim = 32;
  cfg.max_seq_len = 8;
  cfg.vocab_size = 14;  // 3 categories on a 2x2 grid
  cfg.dropout_prob = 0.0;
  cfg.seed = 5;
  return cfg;
}

template <typename S>
bool params_identical(const ModelParams<S>& a, const ModelParams<S>& b) {
  const auto ta = named_tensors(a);
  const auto tb = named_tensors(b);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || ta[i].shape != tb[i].shape) return false;
    for (std::int64_t j = 0; j < ta[i].size(); ++j)
      if (ta[i].data[j] != tb[i].data[j]) return false;
  }
  return true;
}

TrainExample example(TokenSequence tokens, std::size_t masked) {
  MaskVector vis(tokens.size(), 1);
  vis[masked] = 0;
  return TrainExample{std::move(tokens), std::move(vis)};
}

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("config validation rejects bad shapes") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.hidden_dim = 15;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.vocab_size = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.dropout_prob = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.ffn_dim = 0;
  CHECK(cfg.resolved_ffn_dim() == 64);
}

TEST_CASE("parameter count matches the architecture arithmetic") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.hidden_dim = 4;
  cfg.ffn_dim = 8;
  cfg.max_seq_len = 3;
  cfg.vocab_size = 5;
  const auto params = zeros_like<float>(cfg);
  CHECK(parameter_count(params) == 229);
  CHECK(named_tensors(params).size() == 2 + 16 + 2);
}

TEST_CASE("initialization is seeded, clipped and leaves norms neutral") {
  const ModelConfig cfg = tiny_config();
  const auto a = init_params<float>(cfg);
  const auto b = init_params<float>(cfg);
  CHECK(params_identical(a, b));

  ModelConfig other = cfg;
  other.seed = 6;
  CHECK_FALSE(params_identical(a, init_params<float>(other)));

  for (const auto& t : named_tensors(a)) {
    const bool is_ln = t.name.find(".ln") != std::string::npos;
    const bool is_bias = t.name.ends_with(".b") || t.name.ends_with(".b1") ||
                         t.name.ends_with(".b2");
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const float v = t.data[i];
      if (is_ln) {
        CHECK(v == (t.name.ends_with(".scale") ? 1.0f : 0.0f));
      } else if (is_bias) {
        CHECK(v == 0.0f);
      } else {
        CHECK(std::abs(v) <= 0.04f);
      }
    }
  }
}

TEST_CASE("forward emits a proper distribution per position") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  const TokenSequence tokens{2, 5, 9, 13};
  const MaskVector vis{1, 0, 1, 1};
  const Mat<float> dist = forward<float>(params, cfg, tokens, vis);
  REQUIRE(dist.rows() == 4);
  REQUIRE(dist.cols() == cfg.vocab_size);
  for (Eigen::Index r = 0; r < dist.rows(); ++r) {
    CHECK(dist(r, Vocabulary::kPad) == 0.0f);
    CHECK(dist(r, Vocabulary::kMask) == 0.0f);
    double sum = 0.0;
    for (Eigen::Index c = 0; c < dist.cols(); ++c) {
      CHECK(dist(r, c) >= 0.0f);
      sum += dist(r, c);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("forward validates its inputs") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  CHECK_THROWS_AS(forward<float>(params, cfg, {}, {}), std::invalid_argument);
  CHECK_THROWS_AS(forward<float>(params, cfg, {2, 3}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(forward<float>(params, cfg, {Vocabulary::kPad}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(forward<float>(params, cfg, {Vocabulary::kMask}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(forward<float>(params, cfg, {cfg.vocab_size}, {1}), std::invalid_argument);
  const TokenSequence too_long(9, 2);
  CHECK_THROWS_AS(forward<float>(params, cfg, too_long, MaskVector(9, 1)),
                  std::invalid_argument);
}

TEST_CASE("masked position ignores the token it hides") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  TokenSequence tokens{3, 7, 11};
  const MaskVector vis{1, 0, 1};
  const Mat<float> base = forward<float>(params, cfg, tokens, vis);
  for (int alt = Vocabulary::kFirstObjectToken; alt < cfg.vocab_size; ++alt) {
    tokens[1] = alt;
    const Mat<float> swapped = forward<float>(params, cfg, tokens, vis);
    for (Eigen::Index c = 0; c < base.cols(); ++c) CHECK(swapped(1, c) == base(1, c));
  }
}

TEST_CASE("zero parameters give the uniform masked loss") {
  const ModelConfig cfg = tiny_config();
  const auto params = zeros_like<float>(cfg);
  const std::vector<TrainExample> batch{example({2, 6, 9}, 1), example({4, 5}, 0)};
  const auto lg = mlm_loss_and_grads<float>(params, cfg, batch);
  CHECK(lg.masked_positions == 2);
  CHECK(lg.loss == doctest::Approx(std::log(cfg.vocab_size - 2)).epsilon(1e-6));
  CHECK(evaluate_mlm_loss<float>(params, cfg, {{2, 6, 9}}) ==
        doctest::Approx(std::log(cfg.vocab_size - 2)).epsilon(1e-6));
}

TEST_CASE("packed scoring equals one-sentence forwards") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  Rng rng(31);
  std::vector<TrainExample> batch;
  for (int e = 0; e < 7; ++e) {
    const std::size_t n = 1 + rng.uniform_below(6);
    TokenSequence tokens;
    for (std::size_t i = 0; i < n; ++i)
      tokens.push_back(Vocabulary::kFirstObjectToken +
                       static_cast<int>(rng.uniform_below(12)));
    batch.push_back(example(std::move(tokens), rng.uniform_below(n)));
  }
  const Mat<float> packed = masked_distributions<float>(params, cfg, batch);
  REQUIRE(packed.rows() == 7);
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const Mat<float> single = forward<float>(params, cfg, batch[e].tokens, batch[e].visibility);
    int masked = -1;
    for (std::size_t i = 0; i < batch[e].visibility.size(); ++i)
      if (!batch[e].visibility[i]) masked = static_cast<int>(i);
    for (Eigen::Index c = 0; c < packed.cols(); ++c)
      CHECK(packed(static_cast<Eigen::Index>(e), c) ==
            doctest::Approx(single(masked, c)).epsilon(1e-4));
  }
}

TEST_CASE("masked_distributions insists on exactly one hidden position") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  CHECK_THROWS_AS(
      masked_distributions<float>(params, cfg, {TrainExample{{2, 3}, {1, 1}}}),
      std::invalid_argument);
  CHECK_THROWS_AS(
      masked_distributions<float>(params, cfg, {TrainExample{{2, 3}, {0, 0}}}),
      std::invalid_argument);
}

TEST_CASE("confidence applies the top-k rule with low-id tie break") {
  const ModelConfig cfg = tiny_config();
  auto params = zeros_like<float>(cfg);
  params.head_b(2) = 1.0f;
  params.head_b(3) = 0.5f;
  params.head_b(4) = 0.5f;
  const TokenSequence tokens{2, 7};
  const MaskVector vis{0, 1};
  const Mat<float> dist = forward<float>(params, cfg, tokens, vis);

  const double p2 = confidence<float>(params, cfg, tokens, vis, 2, 0);
  CHECK(p2 == doctest::Approx(dist(0, 2)));
  CHECK(confidence<float>(params, cfg, tokens, vis, 2, 0, 1) == doctest::Approx(dist(0, 2)));
  CHECK(confidence<float>(params, cfg, tokens, vis, 3, 0, 1) == 0.0);
  CHECK(confidence<float>(params, cfg, tokens, vis, 3, 0, 2) == doctest::Approx(dist(0, 3)));
  CHECK(confidence<float>(params, cfg, tokens, vis, 4, 0, 2) == 0.0);
  CHECK(confidence<float>(params, cfg, tokens, vis, 4, 0, 3) == doctest::Approx(dist(0, 4)));
  CHECK(confidence<float>(params, cfg, tokens, vis, 5, 0) == doctest::Approx(dist(0, 5)));

  CHECK_THROWS_AS(confidence<float>(params, cfg, tokens, vis, 2, 0, -1),
                  std::invalid_argument);
  CHECK_THROWS_AS(confidence<float>(params, cfg, tokens, {1, 1}, 2, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(confidence<float>(params, cfg, tokens, vis, 2, 5), std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg = tiny_config();
  cfg.seed = 11;
  auto params = init_params<double>(cfg);
  const std::vector<TrainExample> batch{example({2, 6, 9, 12}, 2), example({4, 5}, 0),
                                        example({3, 3, 8}, 1)};
  const auto analytic = mlm_loss_and_grads<double>(params, cfg, batch);

  auto tensors = named_tensors(params);
  const auto grads = named_tensors(analytic.grads);
  const double h = 1e-4;
  Rng rng(77);
  double max_rel = 0.0;
  int checked = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const std::int64_t n = tensors[t].size();
    for (int s = 0; s < 8; ++s) {
      const std::int64_t i = static_cast<std::int64_t>(
          rng.uniform_below(static_cast<std::uint64_t>(n)));
      const double saved = tensors[t].data[i];
      tensors[t].data[i] = saved + h;
      const double up = mlm_loss_and_grads<double>(params, cfg, batch).loss;
      tensors[t].data[i] = saved - h;
      const double down = mlm_loss_and_grads<double>(params, cfg, batch).loss;
      tensors[t].data[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = grads[t].data[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
      max_rel = std::max(max_rel, rel);
      ++checked;
    }
  }
  CHECK(checked == 8 * 36);
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("dropout is seeded and only active when asked") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_prob = 0.25;
  const auto params = init_params<float>(cfg);
  const std::vector<TrainExample> batch{example({2, 6, 9, 12}, 2), example({4, 5}, 0)};

  const auto off1 = mlm_loss_and_grads<float>(params, cfg, batch);
  const auto off2 = mlm_loss_and_grads<float>(params, cfg, batch, DropoutPlan{false, 3});
  CHECK(off1.loss == off2.loss);
  CHECK(params_identical(off1.grads, off2.grads));

  const auto on1 = mlm_loss_and_grads<float>(params, cfg, batch, DropoutPlan{true, 3});
  const auto on2 = mlm_loss_and_grads<float>(params, cfg, batch, DropoutPlan{true, 3});
  CHECK(on1.loss == on2.loss);
  CHECK(params_identical(on1.grads, on2.grads));

  const auto other = mlm_loss_and_grads<float>(params, cfg, batch, DropoutPlan{true, 4});
  CHECK(on1.loss != other.loss);
  CHECK(on1.loss != off1.loss);
}

TEST_CASE("one adam step applies the bias-corrected update") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.hidden_dim = 4;
  cfg.ffn_dim = 8;
  cfg.max_seq_len = 3;
  cfg.vocab_size = 5;
  auto params = zeros_like<float>(cfg);
  auto grads = zeros_like<float>(cfg);
  grads.tok_emb(0, 0) = 1.0f;
  grads.head_b(4) = -2.0f;
  auto adam = init_adam<float>(cfg, 0.1);
  adam_step(params, grads, adam);
  CHECK(adam.step == 1);
  // First step: m-hat = g, v-hat = g^2, update = lr * sign(g).
  CHECK(params.tok_emb(0, 0) == doctest::Approx(-0.1).epsilon(1e-4));
  CHECK(params.head_b(4) == doctest::Approx(0.1).epsilon(1e-4));
  CHECK(params.tok_emb(0, 1) == 0.0f);
}

TEST_CASE("training is deterministic in the seed and reduces the loss") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_prob = 0.1;
  std::vector<TokenSequence> corpus;
  Rng rng(13);
  for (int i = 0; i < 60; ++i) {
    // Cells of category c concentrate on token 2 + 4c + (c mod 4).
    const int c = static_cast<int>(rng.uniform_below(3));
    TokenSequence t;
    for (int j = 0; j < 3; ++j)
      t.push_back(2 + 4 * c + (rng.bernoulli(0.8) ? c % 4
                                                  : static_cast<int>(rng.uniform_below(4))));
    corpus.push_back(std::move(t));
  }

  TrainOptions opts;
  opts.epochs = 6;
  opts.batch_size = 8;
  opts.seed = 2;

  auto run = [&](std::uint64_t seed) {
    ModelConfig c2 = cfg;
    TrainOptions o2 = opts;
    o2.seed = seed;
    auto params = init_params<float>(c2);
    auto adam = init_adam<float>(c2, 1e-3);
    const auto result = train<float>(params, c2, adam, corpus, o2);
    return std::make_pair(std::move(params), result);
  };

  auto [p1, r1] = run(2);
  auto [p2, r2] = run(2);
  CHECK(params_identical(p1, p2));
  CHECK(r1.epoch_loss == r2.epoch_loss);
  auto [p3, r3] = run(9);
  CHECK_FALSE(params_identical(p1, p3));

  CHECK(r1.epoch_loss.front() <= std::log(12.0) + 0.1);
  CHECK(r1.epoch_loss.back() < r1.epoch_loss.front());
}

TEST_CASE("checkpoints round-trip bitwise") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  const std::string path = temp_file("scenebert_ck_test.bin");
  save_checkpoint(path, params, cfg);
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.config.same_shape(cfg));
  CHECK(ck.config.dropout_prob == cfg.dropout_prob);
  CHECK(ck.config.seed == cfg.seed);
  CHECK(params_identical(ck.params, params));

  save_checkpoint(path, params, cfg);
  const Checkpoint again = load_checkpoint(path, cfg);
  CHECK(params_identical(again.params, ck.params));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects corruption") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg);
  const std::string path = temp_file("scenebert_ck_corrupt.bin");
  save_checkpoint(path, params, cfg);
  const std::string full = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  }();

  const auto write_bytes = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
  };

  write_bytes(full.substr(0, full.size() - 3));
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       std::runtime_error);

  write_bytes(full + "x");
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("trailing"),
                       std::runtime_error);

  std::string bad_magic = full;
  bad_magic[0] = 'X';
  write_bytes(bad_magic);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  write_bytes(full.substr(0, 4));
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  write_bytes(full);
  ModelConfig other = cfg;
  other.hidden_dim = 32;
  other.n_heads = 4;
  try {
    load_checkpoint(path, other);
    FAIL("expected an architecture mismatch");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("hidden_dim") != std::string::npos);
    CHECK(msg.find("32") != std::string::npos);
  }
  std::remove(path.c_str());

  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains(path.c_str()),
                       std::runtime_error);
}

TEST_CASE("long sentences are truncated for training with a warning") {
  ModelConfig cfg = tiny_config();
  cfg.max_seq_len = 4;
  cfg.dropout_prob = 0.0;
  auto params = init_params<float>(cfg);
  auto adam = init_adam<float>(cfg);
  TrainOptions opts;
  opts.epochs = 1;
  const std::vector<TokenSequence> corpus{{2, 3, 4, 5, 6, 7}, {2, 3}};
  const auto result = train<float>(params, cfg, adam, corpus, opts);
  CHECK(result.truncated_sentences == 1);
}
