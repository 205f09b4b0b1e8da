#include "scenebert/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "scenebert/rng.hpp"

namespace scenebert {

namespace {

constexpr double kLnEps = 1e-5;

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

// Sentences of a batch are concatenated row-wise so that every per-position
// operation (projections, layer norm, feed-forward, output head) runs as one
// matrix product; only attention works on per-sentence row slices.
template <typename S>
struct LnCache {
  Mat<S> xhat;
  Vec<S> inv_std;
};

template <typename S>
struct PackedLayerCache {
  Mat<S> x;  // layer input, R x hidden
  Mat<S> q, k, v;
  std::vector<Mat<S>> probs;      // per (example, head), softmax output
  std::vector<Mat<S>> prob_drop;  // dropout masks over probs (empty when off)
  Mat<S> concat;
  Mat<S> attn_drop;
  LnCache<S> ln1;
  Mat<S> y;
  Mat<S> ffn_pre;
  Mat<S> ffn_act;
  Mat<S> ffn_drop;
  LnCache<S> ln2;
};

template <typename S>
struct PackedCache {
  std::vector<Eigen::Index> offset;  // per-example start row, last entry = R
  std::vector<int> effective;        // tokens after MASK substitution, size R
  std::vector<int> position;         // position within the owning example
  Mat<S> emb_drop;
  std::vector<PackedLayerCache<S>> layers;
  Mat<S> final_x;  // R x hidden
};

template <typename S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<S> m(rows, cols);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = rng.uniform() < p ? S(0) : keep_scale;
  return m;
}

template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Vec<S>& scale, const Vec<S>& shift, LnCache<S>& cache) {
  const Eigen::Index n = x.rows(), h = x.cols();
  cache.xhat.resize(n, h);
  cache.inv_std.resize(n);
  Mat<S> y(n, h);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).eval();
    const S var = centered.square().sum() / static_cast<S>(h);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = centered * inv;
    y.row(r) = cache.xhat.row(r).array() * scale.transpose().array() + shift.transpose().array();
  }
  return y;
}

// Gradient at the normalization input; scale/shift gradients accumulate.
template <typename S>
Mat<S> layer_norm_backward(const LnCache<S>& cache, const Vec<S>& scale, const Mat<S>& dy,
                           Vec<S>& g_scale, Vec<S>& g_shift) {
  const Eigen::Index n = dy.rows(), h = dy.cols();
  Mat<S> dx(n, h);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto dxhat = (dy.row(r).array() * scale.transpose().array()).eval();
    const S m1 = dxhat.mean();
    const S m2 = (dxhat * cache.xhat.row(r).array()).mean();
    dx.row(r) = (cache.inv_std(r) * (dxhat - m1 - cache.xhat.row(r).array() * m2)).matrix();
  }
  g_scale += (dy.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
  g_shift += dy.colwise().sum().transpose();
  return dx;
}

template <typename S>
void softmax_rows(Mat<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename S>
S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865476)));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
  const S Phi = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865476)));
  return Phi + x * phi;
}

void check_example(const ModelConfig& cfg, const TokenSequence& tokens,
                   const MaskVector& visibility) {
  if (tokens.empty()) throw std::invalid_argument("model: empty token sequence");
  if (tokens.size() != visibility.size())
    throw std::invalid_argument("model: tokens and visibility lengths differ");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw std::invalid_argument("model: sentence length " + std::to_string(tokens.size()) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < Vocabulary::kFirstObjectToken || tokens[i] >= cfg.vocab_size)
      throw std::invalid_argument("model: token " + std::to_string(tokens[i]) + " at position " +
                                  std::to_string(i) +
                                  " is not an object token; mask via the visibility vector");
}

// rng is non-null only when dropout is active for this batch.
template <typename S>
void forward_packed(const ModelParams<S>& params, const ModelConfig& cfg,
                    const std::vector<TrainExample>& examples, Rng* rng, PackedCache<S>& cache) {
  if (examples.empty()) throw std::invalid_argument("model: empty batch");
  cache.offset.assign(1, 0);
  for (const TrainExample& ex : examples) {
    check_example(cfg, ex.tokens, ex.visibility);
    cache.offset.push_back(cache.offset.back() +
                           static_cast<Eigen::Index>(ex.tokens.size()));
  }
  const Eigen::Index rows = cache.offset.back();
  const Eigen::Index h = cfg.hidden_dim;
  const int heads = cfg.n_heads;
  const Eigen::Index d = cfg.head_dim();
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));
  const double p = cfg.dropout_prob;
  const std::size_t n_ex = examples.size();

  cache.effective.resize(static_cast<std::size_t>(rows));
  cache.position.resize(static_cast<std::size_t>(rows));
  Mat<S> x(rows, h);
  for (std::size_t e = 0; e < n_ex; ++e) {
    const TrainExample& ex = examples[e];
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
      const Eigen::Index r = cache.offset[e] + static_cast<Eigen::Index>(i);
      const int tok = ex.visibility[i] ? ex.tokens[i] : Vocabulary::kMask;
      cache.effective[static_cast<std::size_t>(r)] = tok;
      cache.position[static_cast<std::size_t>(r)] = static_cast<int>(i);
      x.row(r) = params.tok_emb.row(tok) + params.pos_emb.row(static_cast<Eigen::Index>(i));
    }
  }
  if (rng) {
    cache.emb_drop = dropout_mask<S>(rows, h, p, *rng);
    x.array() *= cache.emb_drop.array();
  }

  cache.layers.assign(static_cast<std::size_t>(cfg.n_layers), PackedLayerCache<S>{});
  for (int l = 0; l < cfg.n_layers; ++l) {
    PackedLayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];
    const LayerParams<S>& lp = params.layers[static_cast<std::size_t>(l)];
    lc.x = x;

    lc.q.noalias() = x * lp.attn_q_w;
    lc.q.rowwise() += lp.attn_q_b.transpose();
    lc.k.noalias() = x * lp.attn_k_w;
    lc.k.rowwise() += lp.attn_k_b.transpose();
    lc.v.noalias() = x * lp.attn_v_w;
    lc.v.rowwise() += lp.attn_v_b.transpose();

    lc.probs.resize(n_ex * static_cast<std::size_t>(heads));
    if (rng) lc.prob_drop.resize(n_ex * static_cast<std::size_t>(heads));
    lc.concat.resize(rows, h);
    for (std::size_t e = 0; e < n_ex; ++e) {
      const Eigen::Index off = cache.offset[e];
      const Eigen::Index n = cache.offset[e + 1] - off;
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t slot = e * static_cast<std::size_t>(heads) +
                                 static_cast<std::size_t>(hd);
        Mat<S> scores = lc.q.block(off, hd * d, n, d) * lc.k.block(off, hd * d, n, d).transpose();
        scores *= inv_sqrt_d;
        softmax_rows(scores);
        lc.probs[slot] = scores;
        if (rng) {
          lc.prob_drop[slot] = dropout_mask<S>(n, n, p, *rng);
          scores.array() *= lc.prob_drop[slot].array();
        }
        lc.concat.block(off, hd * d, n, d).noalias() = scores * lc.v.block(off, hd * d, n, d);
      }
    }

    Mat<S> attn_out = lc.concat * lp.attn_o_w;
    attn_out.rowwise() += lp.attn_o_b.transpose();
    if (rng) {
      lc.attn_drop = dropout_mask<S>(rows, h, p, *rng);
      attn_out.array() *= lc.attn_drop.array();
    }

    lc.y = layer_norm<S>(Mat<S>(lc.x + attn_out), lp.ln1_scale, lp.ln1_shift, lc.ln1);

    lc.ffn_pre.noalias() = lc.y * lp.ffn_w1;
    lc.ffn_pre.rowwise() += lp.ffn_b1.transpose();
    lc.ffn_act = lc.ffn_pre.unaryExpr([](S v) { return gelu_scalar(v); });
    Mat<S> ffn_out = lc.ffn_act * lp.ffn_w2;
    ffn_out.rowwise() += lp.ffn_b2.transpose();
    if (rng) {
      lc.ffn_drop = dropout_mask<S>(rows, h, p, *rng);
      ffn_out.array() *= lc.ffn_drop.array();
    }

    x = layer_norm<S>(Mat<S>(lc.y + ffn_out), lp.ln2_scale, lp.ln2_shift, lc.ln2);
  }
  cache.final_x = std::move(x);
}

template <typename S>
void backward_packed(const ModelParams<S>& params, const ModelConfig& cfg,
                     const PackedCache<S>& cache, const Mat<S>& d_final, ModelParams<S>& g) {
  const int heads = cfg.n_heads;
  const Eigen::Index d = cfg.head_dim();
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));
  const std::size_t n_ex = cache.offset.size() - 1;
  const bool drop = cache.emb_drop.size() > 0;

  Mat<S> d_x = d_final;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const PackedLayerCache<S>& lc = cache.layers[static_cast<std::size_t>(l)];
    const LayerParams<S>& lp = params.layers[static_cast<std::size_t>(l)];
    LayerParams<S>& gl = g.layers[static_cast<std::size_t>(l)];

    Mat<S> d_r2 = layer_norm_backward<S>(lc.ln2, lp.ln2_scale, d_x, gl.ln2_scale, gl.ln2_shift);

    Mat<S> d_ffn_out = d_r2;
    if (drop) d_ffn_out.array() *= lc.ffn_drop.array();
    Mat<S> d_act = d_ffn_out * lp.ffn_w2.transpose();
    gl.ffn_w2.noalias() += lc.ffn_act.transpose() * d_ffn_out;
    gl.ffn_b2 += d_ffn_out.colwise().sum().transpose();
    Mat<S> d_pre =
        d_act.array() * lc.ffn_pre.unaryExpr([](S v) { return gelu_grad_scalar(v); }).array();
    Mat<S> d_y = d_pre * lp.ffn_w1.transpose();
    gl.ffn_w1.noalias() += lc.y.transpose() * d_pre;
    gl.ffn_b1 += d_pre.colwise().sum().transpose();
    d_y += d_r2;  // residual path around the feed-forward block

    Mat<S> d_r1 = layer_norm_backward<S>(lc.ln1, lp.ln1_scale, d_y, gl.ln1_scale, gl.ln1_shift);

    Mat<S> d_attn_out = d_r1;
    if (drop) d_attn_out.array() *= lc.attn_drop.array();
    Mat<S> d_concat = d_attn_out * lp.attn_o_w.transpose();
    gl.attn_o_w.noalias() += lc.concat.transpose() * d_attn_out;
    gl.attn_o_b += d_attn_out.colwise().sum().transpose();

    Mat<S> d_q = Mat<S>::Zero(d_x.rows(), cfg.hidden_dim);
    Mat<S> d_k = Mat<S>::Zero(d_x.rows(), cfg.hidden_dim);
    Mat<S> d_v = Mat<S>::Zero(d_x.rows(), cfg.hidden_dim);
    for (std::size_t e = 0; e < n_ex; ++e) {
      const Eigen::Index off = cache.offset[e];
      const Eigen::Index n = cache.offset[e + 1] - off;
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t slot = e * static_cast<std::size_t>(heads) +
                                 static_cast<std::size_t>(hd);
        const Mat<S>& probs = lc.probs[slot];
        const Mat<S> d_ch = d_concat.block(off, hd * d, n, d);
        Mat<S> probs_used = probs;
        if (drop) probs_used.array() *= lc.prob_drop[slot].array();
        d_v.block(off, hd * d, n, d).noalias() += probs_used.transpose() * d_ch;
        Mat<S> d_probs = d_ch * lc.v.block(off, hd * d, n, d).transpose();
        if (drop) d_probs.array() *= lc.prob_drop[slot].array();
        Mat<S> d_scores(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
          const S dot = (d_probs.row(r).array() * probs.row(r).array()).sum();
          d_scores.row(r) = probs.row(r).array() * (d_probs.row(r).array() - dot);
        }
        d_scores *= inv_sqrt_d;
        d_q.block(off, hd * d, n, d).noalias() += d_scores * lc.k.block(off, hd * d, n, d);
        d_k.block(off, hd * d, n, d).noalias() +=
            d_scores.transpose() * lc.q.block(off, hd * d, n, d);
      }
    }

    gl.attn_q_w.noalias() += lc.x.transpose() * d_q;
    gl.attn_q_b += d_q.colwise().sum().transpose();
    gl.attn_k_w.noalias() += lc.x.transpose() * d_k;
    gl.attn_k_b += d_k.colwise().sum().transpose();
    gl.attn_v_w.noalias() += lc.x.transpose() * d_v;
    gl.attn_v_b += d_v.colwise().sum().transpose();

    Mat<S> d_in = d_r1;  // residual path around attention
    d_in.noalias() += d_q * lp.attn_q_w.transpose();
    d_in.noalias() += d_k * lp.attn_k_w.transpose();
    d_in.noalias() += d_v * lp.attn_v_w.transpose();
    d_x = std::move(d_in);
  }

  if (drop) d_x.array() *= cache.emb_drop.array();
  for (Eigen::Index r = 0; r < d_x.rows(); ++r) {
    g.tok_emb.row(cache.effective[static_cast<std::size_t>(r)]) += d_x.row(r);
    g.pos_emb.row(cache.position[static_cast<std::size_t>(r)]) += d_x.row(r);
  }
}

// Softmax over object tokens only; PAD and MASK stay at probability zero.
template <typename S>
Vec<S> object_softmax(const Vec<S>& logits) {
  const Eigen::Index v = logits.size();
  Vec<S> p = Vec<S>::Zero(v);
  const auto seg = logits.segment(2, v - 2);
  const S mx = seg.maxCoeff();
  p.segment(2, v - 2) = (seg.array() - mx).exp();
  p.segment(2, v - 2) /= p.segment(2, v - 2).sum();
  return p;
}

// -log p(target) as logsumexp(logits) - logits[target], never log of zero.
template <typename S>
double masked_nll(const Vec<S>& logits, int target) {
  const Eigen::Index v = logits.size();
  const auto seg = logits.segment(2, v - 2);
  const S mx = seg.maxCoeff();
  const S lse = mx + std::log((seg.array() - mx).exp().sum());
  return static_cast<double>(lse - logits(target));
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"n_layers", cfg.n_layers},
                        {"n_heads", cfg.n_heads},
                        {"hidden_dim", cfg.hidden_dim},
                        {"ffn_dim", cfg.resolved_ffn_dim()},
                        {"max_seq_len", cfg.max_seq_len},
                        {"vocab_size", cfg.vocab_size},
                        {"dropout_prob", cfg.dropout_prob},
                        {"seed", cfg.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.hidden_dim = j.at("hidden_dim").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.dropout_prob = j.at("dropout_prob").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

void write_u64_le(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::uint64_t read_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

constexpr char kMagic[8] = {'S', 'C', 'N', 'B', 'E', 'R', 'T', '1'};

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model: n_layers must be positive");
  if (n_heads < 1) throw std::invalid_argument("model: n_heads must be positive");
  if (hidden_dim < 1 || hidden_dim % n_heads != 0)
    throw std::invalid_argument("model: hidden_dim must be a positive multiple of n_heads");
  if (ffn_dim < 0) throw std::invalid_argument("model: ffn_dim must be nonnegative");
  if (max_seq_len < 1) throw std::invalid_argument("model: max_seq_len must be positive");
  if (vocab_size < 3)
    throw std::invalid_argument("model: vocab_size must cover PAD, MASK and one object token");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0))
    throw std::invalid_argument("model: dropout_prob must lie in [0, 1)");
}

template <typename PtrS, typename Params>
static std::vector<TensorRef<PtrS>> named_tensors_impl(Params& p) {
  std::vector<TensorRef<PtrS>> out;
  const auto mat = [&out](const std::string& name, auto& m) {
    out.push_back(TensorRef<PtrS>{name, m.data(), {m.rows(), m.cols()}});
  };
  const auto vec = [&out](const std::string& name, auto& v) {
    out.push_back(TensorRef<PtrS>{name, v.data(), {v.size()}});
  };
  mat("tok_emb", p.tok_emb);
  mat("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& lp = p.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    mat(prefix + "attn.q.w", lp.attn_q_w);
    vec(prefix + "attn.q.b", lp.attn_q_b);
    mat(prefix + "attn.k.w", lp.attn_k_w);
    vec(prefix + "attn.k.b", lp.attn_k_b);
    mat(prefix + "attn.v.w", lp.attn_v_w);
    vec(prefix + "attn.v.b", lp.attn_v_b);
    mat(prefix + "attn.o.w", lp.attn_o_w);
    vec(prefix + "attn.o.b", lp.attn_o_b);
    vec(prefix + "ln1.scale", lp.ln1_scale);
    vec(prefix + "ln1.shift", lp.ln1_shift);
    mat(prefix + "ffn.w1", lp.ffn_w1);
    vec(prefix + "ffn.b1", lp.ffn_b1);
    mat(prefix + "ffn.w2", lp.ffn_w2);
    vec(prefix + "ffn.b2", lp.ffn_b2);
    vec(prefix + "ln2.scale", lp.ln2_scale);
    vec(prefix + "ln2.shift", lp.ln2_shift);
  }
  mat("head.w", p.head_w);
  vec("head.b", p.head_b);
  return out;
}

template <typename S>
std::vector<TensorRef<S>> named_tensors(ModelParams<S>& params) {
  return named_tensors_impl<S>(params);
}

template <typename S>
std::vector<TensorRef<const S>> named_tensors(const ModelParams<S>& params) {
  return named_tensors_impl<const S>(params);
}

template <typename S>
std::int64_t parameter_count(const ModelParams<S>& params) {
  std::int64_t n = 0;
  for (const auto& t : named_tensors(params)) n += t.size();
  return n;
}

template <typename S>
ModelParams<S> zeros_like(const ModelConfig& cfg) {
  cfg.validate();
  const int h = cfg.hidden_dim;
  const int f = cfg.resolved_ffn_dim();
  ModelParams<S> p;
  p.tok_emb = Mat<S>::Zero(cfg.vocab_size, h);
  p.pos_emb = Mat<S>::Zero(cfg.max_seq_len, h);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& lp : p.layers) {
    lp.attn_q_w = Mat<S>::Zero(h, h);
    lp.attn_k_w = Mat<S>::Zero(h, h);
    lp.attn_v_w = Mat<S>::Zero(h, h);
    lp.attn_o_w = Mat<S>::Zero(h, h);
    lp.attn_q_b = Vec<S>::Zero(h);
    lp.attn_k_b = Vec<S>::Zero(h);
    lp.attn_v_b = Vec<S>::Zero(h);
    lp.attn_o_b = Vec<S>::Zero(h);
    lp.ln1_scale = Vec<S>::Zero(h);
    lp.ln1_shift = Vec<S>::Zero(h);
    lp.ffn_w1 = Mat<S>::Zero(h, f);
    lp.ffn_b1 = Vec<S>::Zero(f);
    lp.ffn_w2 = Mat<S>::Zero(f, h);
    lp.ffn_b2 = Vec<S>::Zero(h);
    lp.ln2_scale = Vec<S>::Zero(h);
    lp.ln2_shift = Vec<S>::Zero(h);
  }
  p.head_w = Mat<S>::Zero(h, cfg.vocab_size);
  p.head_b = Vec<S>::Zero(cfg.vocab_size);
  return p;
}

template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg) {
  ModelParams<S> p = zeros_like<S>(cfg);
  Rng rng(cfg.seed);
  for (auto& t : named_tensors(p)) {
    const bool is_ln = t.name.find(".ln") != std::string::npos;
    if (is_ln) {
      const S fill = t.name.ends_with(".scale") ? S(1) : S(0);
      std::fill(t.data, t.data + t.size(), fill);
    } else if (t.name.ends_with(".b") || t.name.ends_with(".b1") || t.name.ends_with(".b2")) {
      // biases stay zero
    } else {
      for (std::int64_t i = 0; i < t.size(); ++i)
        t.data[i] = static_cast<S>(rng.truncated_normal(0.02));
    }
  }
  return p;
}

template <typename S>
Mat<S> forward(const ModelParams<S>& params, const ModelConfig& cfg, const TokenSequence& tokens,
               const MaskVector& visibility) {
  cfg.validate();
  PackedCache<S> cache;
  forward_packed<S>(params, cfg, {TrainExample{tokens, visibility}}, nullptr, cache);
  const Eigen::Index n = cache.final_x.rows();
  Mat<S> logits(n, cfg.vocab_size);
  logits.noalias() = cache.final_x * params.head_w;
  logits.rowwise() += params.head_b.transpose();
  Mat<S> dist(n, cfg.vocab_size);
  for (Eigen::Index i = 0; i < n; ++i)
    dist.row(i) = object_softmax<S>(Vec<S>(logits.row(i).transpose())).transpose();
  return dist;
}

template <typename S>
Mat<S> masked_distributions(const ModelParams<S>& params, const ModelConfig& cfg,
                            const std::vector<TrainExample>& examples) {
  cfg.validate();
  PackedCache<S> cache;
  forward_packed<S>(params, cfg, examples, nullptr, cache);
  Mat<S> out(static_cast<Eigen::Index>(examples.size()), cfg.vocab_size);
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const MaskVector& vis = examples[e].visibility;
    Eigen::Index masked_row = -1;
    for (std::size_t i = 0; i < vis.size(); ++i) {
      if (vis[i]) continue;
      if (masked_row >= 0)
        throw std::invalid_argument("model: masked_distributions needs exactly one masked "
                                    "position per example");
      masked_row = cache.offset[e] + static_cast<Eigen::Index>(i);
    }
    if (masked_row < 0)
      throw std::invalid_argument("model: masked_distributions example without a masked position");
    const Vec<S> logits =
        params.head_w.transpose() * Vec<S>(cache.final_x.row(masked_row).transpose()) +
        params.head_b;
    out.row(static_cast<Eigen::Index>(e)) = object_softmax<S>(logits).transpose();
  }
  return out;
}

template <typename S>
double confidence(const ModelParams<S>& params, const ModelConfig& cfg,
                  const TokenSequence& tokens, const MaskVector& visibility, int token,
                  int position, int k) {
  cfg.validate();
  if (position < 0 || position >= static_cast<int>(tokens.size()))
    throw std::invalid_argument("model: confidence position out of range");
  if (visibility.size() != tokens.size() || visibility[static_cast<std::size_t>(position)] != 0)
    throw std::invalid_argument("model: confidence requires the queried position to be masked");
  if (token < Vocabulary::kFirstObjectToken || token >= cfg.vocab_size)
    throw std::invalid_argument("model: confidence token must be an object token");
  if (k < 0) throw std::invalid_argument("model: k must be nonnegative (0 means the full list)");

  const Mat<S> dist = forward<S>(params, cfg, tokens, visibility);
  const auto row = dist.row(position);
  const double p = static_cast<double>(row(token));
  if (k == 0 || k >= cfg.object_token_count()) return p;
  // Rank among object tokens, probability descending, lower id wins ties.
  int ahead = 0;
  for (int j = Vocabulary::kFirstObjectToken; j < cfg.vocab_size; ++j)
    if (row(j) > row(token) || (row(j) == row(token) && j < token)) ++ahead;
  return ahead < k ? p : 0.0;
}

template <typename S>
LossAndGrads<S> mlm_loss_and_grads(const ModelParams<S>& params, const ModelConfig& cfg,
                                   const std::vector<TrainExample>& batch,
                                   const DropoutPlan& dropout) {
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("model: empty batch");

  PackedCache<S> cache;
  if (dropout.enabled && cfg.dropout_prob > 0.0) {
    Rng rng(dropout.seed);
    forward_packed<S>(params, cfg, batch, &rng, cache);
  } else {
    forward_packed<S>(params, cfg, batch, nullptr, cache);
  }

  std::vector<Eigen::Index> masked_rows;
  std::vector<int> targets;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    bool any = false;
    for (std::size_t i = 0; i < batch[e].visibility.size(); ++i) {
      if (batch[e].visibility[i]) continue;
      masked_rows.push_back(cache.offset[e] + static_cast<Eigen::Index>(i));
      targets.push_back(batch[e].tokens[i]);
      any = true;
    }
    if (!any)
      throw std::invalid_argument("model: training example without a masked position");
  }
  const Eigen::Index m = static_cast<Eigen::Index>(masked_rows.size());

  LossAndGrads<S> out;
  out.masked_positions = m;
  out.grads = zeros_like<S>(cfg);
  const S w = S(1) / static_cast<S>(m);

  Mat<S> hidden(m, cfg.hidden_dim);
  for (Eigen::Index i = 0; i < m; ++i)
    hidden.row(i) = cache.final_x.row(masked_rows[static_cast<std::size_t>(i)]);
  Mat<S> logits(m, cfg.vocab_size);
  logits.noalias() = hidden * params.head_w;
  logits.rowwise() += params.head_b.transpose();

  double loss_sum = 0.0;
  Mat<S> d_logits(m, cfg.vocab_size);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec<S> row = logits.row(i).transpose();
    const int target = targets[static_cast<std::size_t>(i)];
    loss_sum += masked_nll<S>(row, target);
    Vec<S> dl = object_softmax<S>(row);
    dl(target) -= S(1);
    d_logits.row(i) = dl.transpose() * w;
  }

  out.grads.head_w.noalias() += hidden.transpose() * d_logits;
  out.grads.head_b += d_logits.colwise().sum().transpose();
  Mat<S> d_final = Mat<S>::Zero(cache.final_x.rows(), cache.final_x.cols());
  Mat<S> d_hidden(m, cfg.hidden_dim);
  d_hidden.noalias() = d_logits * params.head_w.transpose();
  for (Eigen::Index i = 0; i < m; ++i)
    d_final.row(masked_rows[static_cast<std::size_t>(i)]) += d_hidden.row(i);

  backward_packed<S>(params, cfg, cache, d_final, out.grads);
  out.loss = loss_sum / static_cast<double>(m);
  return out;
}

template <typename S>
AdamState<S> init_adam(const ModelConfig& cfg, double lr) {
  AdamState<S> st;
  st.lr = lr;
  st.m = zeros_like<S>(cfg);
  st.v = zeros_like<S>(cfg);
  return st;
}

template <typename S>
void adam_step(ModelParams<S>& params, const ModelParams<S>& grads, AdamState<S>& state) {
  ++state.step;
  const S b1 = static_cast<S>(state.beta1);
  const S b2 = static_cast<S>(state.beta2);
  const S bc1 = static_cast<S>(1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  const S bc2 = static_cast<S>(1.0 - std::pow(state.beta2, static_cast<double>(state.step)));
  const S lr = static_cast<S>(state.lr);
  const S eps = static_cast<S>(state.eps);

  auto pt = named_tensors(params);
  const auto gt = named_tensors(grads);
  auto mt = named_tensors(state.m);
  auto vt = named_tensors(state.v);
  if (gt.size() != pt.size()) throw std::invalid_argument("model: gradient shape mismatch");
  for (std::size_t i = 0; i < pt.size(); ++i) {
    const std::int64_t n = pt[i].size();
    if (gt[i].size() != n || gt[i].name != pt[i].name)
      throw std::invalid_argument("model: gradient tensor " + gt[i].name + " does not match " +
                                  pt[i].name);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> p(pt[i].data, n);
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> gr(gt[i].data, n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> mm(mt[i].data, n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> vv(vt[i].data, n);
    mm = b1 * mm + (S(1) - b1) * gr;
    vv = b2 * vv + (S(1) - b2) * gr.square();
    p -= lr * (mm / bc1) / ((vv / bc2).sqrt() + eps);
  }
}

template <typename S>
TrainResult<S> train(ModelParams<S>& params, const ModelConfig& cfg, AdamState<S>& adam,
                     const std::vector<TokenSequence>& corpus, const TrainOptions& opts) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("model: empty training corpus");
  if (opts.epochs < 0) throw std::invalid_argument("model: epochs must be nonnegative");
  if (opts.batch_size < 1) throw std::invalid_argument("model: batch_size must be positive");

  std::vector<TokenSequence> data;
  data.reserve(corpus.size());
  std::size_t truncated = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    TokenSequence t = corpus[i];
    if (t.empty())
      throw std::invalid_argument("model: training sentence " + std::to_string(i) + " is empty");
    if (static_cast<int>(t.size()) > cfg.max_seq_len) {
      t.resize(static_cast<std::size_t>(cfg.max_seq_len));
      ++truncated;
    }
    data.push_back(std::move(t));
  }
  if (truncated > 0)
    std::fprintf(stderr, "model: warning: truncated %zu sentences to max_seq_len %d\n", truncated,
                 cfg.max_seq_len);

  TrainResult<S> result;
  result.truncated_sentences = truncated;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(opts.seed);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t masked_total = 0;
    std::uint64_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(opts.batch_size), ++batch_index) {
      const std::size_t end =
          std::min(start + static_cast<std::size_t>(opts.batch_size), order.size());
      std::vector<TrainExample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const TokenSequence& t = data[order[i]];
        MaskVector vis(t.size(), 1);
        vis[static_cast<std::size_t>(rng.uniform_below(t.size()))] = 0;
        batch.push_back(TrainExample{t, std::move(vis)});
      }
      const DropoutPlan plan{
          cfg.dropout_prob > 0.0,
          mix_seed(mix_seed(opts.seed, static_cast<std::uint64_t>(epoch)), batch_index)};
      const LossAndGrads<S> lg = mlm_loss_and_grads<S>(params, cfg, batch, plan);
      adam_step<S>(params, lg.grads, adam);
      loss_sum += lg.loss * static_cast<double>(lg.masked_positions);
      masked_total += lg.masked_positions;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(masked_total));
    if (opts.verbose)
      std::fprintf(stderr, "epoch %d/%d loss %.6f\n", epoch + 1, opts.epochs,
                   result.epoch_loss.back());
  }
  return result;
}

template <typename S>
double evaluate_mlm_loss(const ModelParams<S>& params, const ModelConfig& cfg,
                         const std::vector<TokenSequence>& corpus) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("model: empty evaluation corpus");
  double sum = 0.0;
  std::int64_t count = 0;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    TokenSequence t = corpus[s];
    if (t.empty())
      throw std::invalid_argument("model: evaluation sentence " + std::to_string(s) + " is empty");
    if (static_cast<int>(t.size()) > cfg.max_seq_len)
      t.resize(static_cast<std::size_t>(cfg.max_seq_len));

    // Mask every position in turn, all maskings of one sentence in one pack.
    std::vector<TrainExample> examples;
    examples.reserve(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      MaskVector vis(t.size(), 1);
      vis[i] = 0;
      examples.push_back(TrainExample{t, std::move(vis)});
    }
    PackedCache<S> cache;
    forward_packed<S>(params, cfg, examples, nullptr, cache);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const Eigen::Index row = cache.offset[i] + static_cast<Eigen::Index>(i);
      const Vec<S> logits =
          params.head_w.transpose() * Vec<S>(cache.final_x.row(row).transpose()) + params.head_b;
      sum += masked_nll<S>(logits, t[i]);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const ModelConfig& cfg) {
  cfg.validate();
  const auto tensors = named_tensors(params);
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& t : tensors) manifest.push_back({t.name, t.shape});
  const nlohmann::json header{
      {"version", 1}, {"config", config_to_json(cfg)}, {"manifest", std::move(manifest)}};
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("model: cannot write " + path);
  out.write(kMagic, 8);
  write_u64_le(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  out.flush();
  if (!out) throw std::runtime_error("model: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("model: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("model: " + path + " is not a model checkpoint");
  const std::uint64_t header_len = read_u64_le(in);
  if (!in || header_len == 0 || header_len > (1ULL << 26))
    throw std::runtime_error("model: implausible header length in " + path);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len))
    throw std::runtime_error("model: truncated checkpoint header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("model: malformed checkpoint header in " + path + ": " + e.what());
  }
  if (header.at("version").get<int>() != 1)
    throw std::runtime_error("model: unsupported checkpoint version in " + path);

  Checkpoint ck;
  try {
    ck.config = config_from_json(header.at("config"));
    ck.config.validate();
  } catch (const std::exception& e) {
    throw std::runtime_error("model: bad checkpoint config in " + path + ": " + e.what());
  }
  ck.params = zeros_like<float>(ck.config);

  const auto tensors = named_tensors(ck.params);
  const nlohmann::json& manifest = header.at("manifest");
  if (manifest.size() != tensors.size())
    throw std::runtime_error("model: checkpoint manifest in " + path + " lists " +
                             std::to_string(manifest.size()) + " tensors, expected " +
                             std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string name = manifest[i][0].get<std::string>();
    const auto shape = manifest[i][1].get<std::vector<std::int64_t>>();
    if (name != tensors[i].name || shape != tensors[i].shape)
      throw std::runtime_error("model: checkpoint tensor " + std::to_string(i) + " is " + name +
                               ", expected " + tensors[i].name + " (or its shape differs)");
  }
  for (const auto& t : tensors) {
    const std::streamsize bytes = static_cast<std::streamsize>(t.size() * sizeof(float));
    in.read(reinterpret_cast<char*>(t.data), bytes);
    if (in.gcount() != bytes)
      throw std::runtime_error("model: truncated checkpoint data in " + path + " at tensor " +
                               t.name);
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw std::runtime_error("model: trailing bytes after checkpoint data in " + path);
  return ck;
}

Checkpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!ck.config.same_shape(expected)) {
    const auto diff = [](const std::string& field, auto got, auto want) {
      return " " + field + "=" + std::to_string(got) + " (expected " + std::to_string(want) + ")";
    };
    std::string msg = "model: checkpoint " + path + " does not match the expected architecture:";
    const ModelConfig& c = ck.config;
    if (c.n_layers != expected.n_layers) msg += diff("n_layers", c.n_layers, expected.n_layers);
    if (c.n_heads != expected.n_heads) msg += diff("n_heads", c.n_heads, expected.n_heads);
    if (c.hidden_dim != expected.hidden_dim)
      msg += diff("hidden_dim", c.hidden_dim, expected.hidden_dim);
    if (c.resolved_ffn_dim() != expected.resolved_ffn_dim())
      msg += diff("ffn_dim", c.resolved_ffn_dim(), expected.resolved_ffn_dim());
    if (c.max_seq_len != expected.max_seq_len)
      msg += diff("max_seq_len", c.max_seq_len, expected.max_seq_len);
    if (c.vocab_size != expected.vocab_size)
      msg += diff("vocab_size", c.vocab_size, expected.vocab_size);
    throw std::runtime_error(msg);
  }
  return ck;
}

#define SCENEBERT_INSTANTIATE(S)                                                              \
  template std::vector<TensorRef<S>> named_tensors<S>(ModelParams<S>&);                       \
  template std::vector<TensorRef<const S>> named_tensors<S>(const ModelParams<S>&);           \
  template std::int64_t parameter_count<S>(const ModelParams<S>&);                            \
  template ModelParams<S> zeros_like<S>(const ModelConfig&);                                  \
  template ModelParams<S> init_params<S>(const ModelConfig&);                                 \
  template Mat<S> forward<S>(const ModelParams<S>&, const ModelConfig&, const TokenSequence&, \
                             const MaskVector&);                                              \
  template Mat<S> masked_distributions<S>(const ModelParams<S>&, const ModelConfig&,          \
                                          const std::vector<TrainExample>&);                  \
  template double confidence<S>(const ModelParams<S>&, const ModelConfig&,                    \
                                const TokenSequence&, const MaskVector&, int, int, int);      \
  template LossAndGrads<S> mlm_loss_and_grads<S>(const ModelParams<S>&, const ModelConfig&,   \
                                                 const std::vector<TrainExample>&,            \
                                                 const DropoutPlan&);                         \
  template AdamState<S> init_adam<S>(const ModelConfig&, double);                             \
  template void adam_step<S>(ModelParams<S>&, const ModelParams<S>&, AdamState<S>&);          \
  template TrainResult<S> train<S>(ModelParams<S>&, const ModelConfig&, AdamState<S>&,        \
                                   const std::vector<TokenSequence>&, const TrainOptions&);   \
  template double evaluate_mlm_loss<S>(const ModelParams<S>&, const ModelConfig&,             \
                                       const std::vector<TokenSequence>&);

SCENEBERT_INSTANTIATE(float)
SCENEBERT_INSTANTIATE(double)

#undef SCENEBERT_INSTANTIATE

}  // namespace scenebert
