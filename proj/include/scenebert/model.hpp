#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "scenebert/scene_lang.hpp"

namespace scenebert {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 12;
  int hidden_dim = 96;
  int ffn_dim = 0;  // 0 means 4 * hidden_dim
  int max_seq_len = 64;
  int vocab_size = 0;  // 2 + |C| * grid cells, PAD=0 and MASK=1 included
  double dropout_prob = 0.1;
  std::uint64_t seed = 0;

  int resolved_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
  int head_dim() const { return hidden_dim / n_heads; }
  int object_token_count() const { return vocab_size - 2; }
  void validate() const;

  bool same_shape(const ModelConfig& other) const {
    return n_layers == other.n_layers && n_heads == other.n_heads &&
           hidden_dim == other.hidden_dim && resolved_ffn_dim() == other.resolved_ffn_dim() &&
           max_seq_len == other.max_seq_len && vocab_size == other.vocab_size;
  }
};

template <typename S>
struct LayerParams {
  Mat<S> attn_q_w, attn_k_w, attn_v_w, attn_o_w;  // hidden x hidden
  Vec<S> attn_q_b, attn_k_b, attn_v_b, attn_o_b;
  Vec<S> ln1_scale, ln1_shift;
  Mat<S> ffn_w1;  // hidden x ffn
  Vec<S> ffn_b1;
  Mat<S> ffn_w2;  // ffn x hidden
  Vec<S> ffn_b2;
  Vec<S> ln2_scale, ln2_shift;
};

template <typename S>
struct ModelParams {
  Mat<S> tok_emb;  // vocab x hidden
  Mat<S> pos_emb;  // max_seq_len x hidden
  std::vector<LayerParams<S>> layers;
  Mat<S> head_w;  // hidden x vocab
  Vec<S> head_b;
};

// Flat, named view over every tensor in serialization order.
template <typename S>
struct TensorRef {
  std::string name;
  S* data;  // contiguous, row-major
  std::vector<std::int64_t> shape;

  std::int64_t size() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
  }
};

template <typename S>
std::vector<TensorRef<S>> named_tensors(ModelParams<S>& params);
template <typename S>
std::vector<TensorRef<const S>> named_tensors(const ModelParams<S>& params);

template <typename S>
std::int64_t parameter_count(const ModelParams<S>& params);

// Weights from a seeded truncated normal (std 0.02, clipped at two
// deviations), biases zero, layer-norm scales one and shifts zero.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg);

template <typename S>
ModelParams<S> zeros_like(const ModelConfig& cfg);

// visibility[i] == 0 marks position i as masked; its embedding is the MASK
// token's regardless of tokens[i].
using MaskVector = std::vector<std::uint8_t>;

// Full encoder pass. Returns one row per position; each row is a probability
// distribution over object tokens (columns for PAD and MASK are exactly 0).
template <typename S>
Mat<S> forward(const ModelParams<S>& params, const ModelConfig& cfg, const TokenSequence& tokens,
               const MaskVector& visibility);

// Probability of `token` at masked position `position` if the token ranks
// inside the top k model outputs there, else 0. Ranks break probability ties
// toward the lower token id. k = 0 means the full list.
template <typename S>
double confidence(const ModelParams<S>& params, const ModelConfig& cfg,
                  const TokenSequence& tokens, const MaskVector& visibility, int token,
                  int position, int k = 0);

struct TrainExample {
  TokenSequence tokens;
  MaskVector visibility;
};

// Output distribution at each example's single masked position, one row per
// example. Examples run through the encoder as one packed batch, which is
// the fast path for scoring many maskings at once.
template <typename S>
Mat<S> masked_distributions(const ModelParams<S>& params, const ModelConfig& cfg,
                            const std::vector<TrainExample>& examples);

struct DropoutPlan {
  bool enabled = false;
  std::uint64_t seed = 0;
};

template <typename S>
struct LossAndGrads {
  double loss = 0.0;  // mean over masked positions of -log p(original token)
  std::int64_t masked_positions = 0;
  ModelParams<S> grads;
};

template <typename S>
LossAndGrads<S> mlm_loss_and_grads(const ModelParams<S>& params, const ModelConfig& cfg,
                                   const std::vector<TrainExample>& batch,
                                   const DropoutPlan& dropout = {});

template <typename S>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  ModelParams<S> m, v;
};

template <typename S>
AdamState<S> init_adam(const ModelConfig& cfg, double lr = 1e-3);

template <typename S>
void adam_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamState<S>& state);

struct TrainOptions {
  int epochs = 30;
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool verbose = false;  // epoch losses to stderr
};

template <typename S>
struct TrainResult {
  std::vector<double> epoch_loss;
  std::size_t truncated_sentences = 0;
};

// One uniformly chosen position is masked per sentence, re-drawn every epoch;
// sentences are reshuffled every epoch from the same seeded stream. Dropout
// is active here (and only here) when cfg.dropout_prob > 0.
template <typename S>
TrainResult<S> train(ModelParams<S>& params, const ModelConfig& cfg, AdamState<S>& adam,
                     const std::vector<TokenSequence>& corpus, const TrainOptions& opts);

// Mean masked-token loss over a corpus with every position masked in turn,
// dropout off. Useful as a held-out goodness measure.
template <typename S>
double evaluate_mlm_loss(const ModelParams<S>& params, const ModelConfig& cfg,
                         const std::vector<TokenSequence>& corpus);

// Checkpoint container format: 8-byte magic "SCNBERT1", little-endian uint64
// JSON header length, UTF-8 JSON header (config plus ordered tensor
// manifest), then raw little-endian float32 tensor data in manifest order.
void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

Checkpoint load_checkpoint(const std::string& path);

// Same, but rejects checkpoints whose architecture differs from `expected`,
// listing every differing field.
Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

template <typename T, typename S>
ModelParams<T> cast_params(const ModelParams<S>& p) {
  ModelParams<T> out;
  out.tok_emb = p.tok_emb.template cast<T>();
  out.pos_emb = p.pos_emb.template cast<T>();
  out.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerParams<S>& a = p.layers[i];
    LayerParams<T>& b = out.layers[i];
    b.attn_q_w = a.attn_q_w.template cast<T>();
    b.attn_k_w = a.attn_k_w.template cast<T>();
    b.attn_v_w = a.attn_v_w.template cast<T>();
    b.attn_o_w = a.attn_o_w.template cast<T>();
    b.attn_q_b = a.attn_q_b.template cast<T>();
    b.attn_k_b = a.attn_k_b.template cast<T>();
    b.attn_v_b = a.attn_v_b.template cast<T>();
    b.attn_o_b = a.attn_o_b.template cast<T>();
    b.ln1_scale = a.ln1_scale.template cast<T>();
    b.ln1_shift = a.ln1_shift.template cast<T>();
    b.ffn_w1 = a.ffn_w1.template cast<T>();
    b.ffn_b1 = a.ffn_b1.template cast<T>();
    b.ffn_w2 = a.ffn_w2.template cast<T>();
    b.ffn_b2 = a.ffn_b2.template cast<T>();
    b.ln2_scale = a.ln2_scale.template cast<T>();
    b.ln2_shift = a.ln2_shift.template cast<T>();
  }
  out.head_w = p.head_w.template cast<T>();
  out.head_b = p.head_b.template cast<T>();
  return out;
}

}  // namespace scenebert
