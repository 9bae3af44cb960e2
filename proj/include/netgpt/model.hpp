#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "netgpt/encoding.hpp"
#include "netgpt/error.hpp"
#include "netgpt/rng.hpp"

namespace netgpt {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  std::size_t vocab_size = 1024;
  std::size_t max_seq_len = 512;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t segment_count = 16;
  double dropout_rate = 0.0;
  double init_scale = 0.02;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::kConfig, what); };
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
      fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
           std::to_string(n_heads) + ")");
    }
    if (max_seq_len < 1) fail("max_seq_len must be at least 1");
    if (vocab_size < kMinVocabSize) {
      fail("vocab_size must be at least " + std::to_string(kMinVocabSize));
    }
    if (n_layers < 1) fail("n_layers must be at least 1");
    if (d_ff < 1) fail("d_ff must be at least 1");
    if (segment_count < 1) fail("segment_count must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
    if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) fail("init_scale must be finite and >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
       {"segment_count", c.segment_count}, {"dropout_rate", c.dropout_rate},
       {"init_scale", c.init_scale}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.segment_count = j.value("segment_count", c.segment_count);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.init_scale = j.value("init_scale", c.init_scale);
}

template <typename T>
struct LayerParams {
  Matrix<T> ln1_gain, ln1_bias;      // [1 x d]
  Matrix<T> qkv_weight, qkv_bias;    // [d x 3d], [1 x 3d]
  Matrix<T> proj_weight, proj_bias;  // [d x d], [1 x d]
  Matrix<T> ln2_gain, ln2_bias;      // [1 x d]
  Matrix<T> ff_in_weight, ff_in_bias;    // [d x ff], [1 x ff]
  Matrix<T> ff_out_weight, ff_out_bias;  // [ff x d], [1 x d]
};

// All trainable tensors (theta). Row vectors are stored as 1 x n matrices so
// every tensor can be visited uniformly.
template <typename T>
struct ModelParams {
  ModelConfig config;
  Matrix<T> token_embedding;     // [V x d]
  Matrix<T> position_embedding;  // [S x d]
  Matrix<T> segment_embedding;   // [G x d]
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_ln_gain, final_ln_bias;
  Matrix<T> output_projection;   // W_v, [V x d]

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("token_embedding", self.token_embedding);
    f("position_embedding", self.position_embedding);
    f("segment_embedding", self.segment_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "ln1_gain", L.ln1_gain);
      f(p + "ln1_bias", L.ln1_bias);
      f(p + "qkv_weight", L.qkv_weight);
      f(p + "qkv_bias", L.qkv_bias);
      f(p + "proj_weight", L.proj_weight);
      f(p + "proj_bias", L.proj_bias);
      f(p + "ln2_gain", L.ln2_gain);
      f(p + "ln2_bias", L.ln2_bias);
      f(p + "ff_in_weight", L.ff_in_weight);
      f(p + "ff_in_bias", L.ff_in_bias);
      f(p + "ff_out_weight", L.ff_out_weight);
      f(p + "ff_out_bias", L.ff_out_bias);
    }
    f("final_ln_gain", self.final_ln_gain);
    f("final_ln_bias", self.final_ln_bias);
    f("output_projection", self.output_projection);
  }

  // f(name, Matrix<T>&)
  template <typename F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  static ModelParams zeros(const ModelConfig& c) {
    ModelParams p;
    p.config = c;
    const auto d = static_cast<Eigen::Index>(c.d_model);
    const auto ff = static_cast<Eigen::Index>(c.d_ff);
    const auto V = static_cast<Eigen::Index>(c.vocab_size);
    p.token_embedding = Matrix<T>::Zero(V, d);
    p.position_embedding = Matrix<T>::Zero(static_cast<Eigen::Index>(c.max_seq_len), d);
    p.segment_embedding = Matrix<T>::Zero(static_cast<Eigen::Index>(c.segment_count), d);
    p.layers.resize(c.n_layers);
    for (auto& L : p.layers) {
      L.ln1_gain = Matrix<T>::Zero(1, d);
      L.ln1_bias = Matrix<T>::Zero(1, d);
      L.qkv_weight = Matrix<T>::Zero(d, 3 * d);
      L.qkv_bias = Matrix<T>::Zero(1, 3 * d);
      L.proj_weight = Matrix<T>::Zero(d, d);
      L.proj_bias = Matrix<T>::Zero(1, d);
      L.ln2_gain = Matrix<T>::Zero(1, d);
      L.ln2_bias = Matrix<T>::Zero(1, d);
      L.ff_in_weight = Matrix<T>::Zero(d, ff);
      L.ff_in_bias = Matrix<T>::Zero(1, ff);
      L.ff_out_weight = Matrix<T>::Zero(ff, d);
      L.ff_out_bias = Matrix<T>::Zero(1, d);
    }
    p.final_ln_gain = Matrix<T>::Zero(1, d);
    p.final_ln_bias = Matrix<T>::Zero(1, d);
    p.output_projection = Matrix<T>::Zero(V, d);
    return p;
  }

  void set_zero() {
    for_each([](const std::string&, Matrix<T>& m) { m.setZero(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&n](const std::string&, const Matrix<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&ok](const std::string&, const Matrix<T>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    std::vector<const Matrix<T>*> src;
    for_each([&src](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }

  // this += scale * other
  void add_scaled(const ModelParams& other, T scale) {
    std::vector<const Matrix<T>*> src;
    other.for_each([&src](const std::string&, const Matrix<T>& m) { src.push_back(&m); });
    std::size_t i = 0;
    for_each([&](const std::string&, Matrix<T>& m) { m.noalias() += scale * *src[i++]; });
  }
};

// Zero-mean normal weights scaled by init_scale; residual output projections
// are further scaled by 1/sqrt(2 * n_layers). Gains are one, biases zero.
template <typename T = float>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto p = ModelParams<T>::zeros(config);
  Rng rng(seed);
  const double scale = config.init_scale;
  const double residual_scale = scale / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto fill = [&rng](Matrix<T>& m, double s) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(s * rng.normal());
  };
  fill(p.token_embedding, scale);
  fill(p.position_embedding, scale);
  fill(p.segment_embedding, scale);
  for (auto& L : p.layers) {
    L.ln1_gain.setOnes();
    L.ln2_gain.setOnes();
    fill(L.qkv_weight, scale);
    fill(L.proj_weight, residual_scale);
    fill(L.ff_in_weight, scale);
    fill(L.ff_out_weight, residual_scale);
  }
  p.final_ln_gain.setOnes();
  fill(p.output_projection, scale);
  return p;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Matrix<T> normalized;  // x_hat
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                     LayerNormCache<T>* cache) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  Matrix<T> xhat(rows, cols);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(cols);
    inv_std(r) = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    xhat.row(r) = centered * inv_std(r);
  }
  Matrix<T> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// Returns dx; accumulates gain/bias gradients.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache,
                              const Matrix<T>& gain, Matrix<T>& dgain, Matrix<T>& dbias) {
  const auto& xhat = cache.normalized;
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Matrix<T> dxhat = dy.array().rowwise() * gain.row(0).array();
  const T n = static_cast<T>(dy.cols());
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T mean_d = dxhat.row(r).sum() / n;
    const T mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

template <typename T>
inline T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T inner = c * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  const T dinner = c * (T(1) + static_cast<T>(3 * 0.044715) * x * x);
  return static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * x * (T(1) - t * t) * dinner;
}

template <typename T>
struct DropoutMask {
  Matrix<T> scale;  // 0 or 1/(1-p) per entry; empty when inactive
  bool active() const { return scale.size() > 0; }
};

template <typename T>
void apply_dropout(Matrix<T>& x, DropoutMask<T>& mask, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) return;
  mask.scale.resize(x.rows(), x.cols());
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    mask.scale.data()[i] = rng->uniform01() < rate ? T(0) : keep;
  }
  x.array() *= mask.scale.array();
}

template <typename T>
struct LayerCache {
  Matrix<T> input;
  LayerNormCache<T> ln1;
  Matrix<T> ln1_out;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;  // per head, [L x L]
  Matrix<T> attention;           // concatenated head outputs
  DropoutMask<T> proj_dropout;
  Matrix<T> mid;                 // input + attention branch
  LayerNormCache<T> ln2;
  Matrix<T> ln2_out;
  Matrix<T> ff_pre;              // before GELU
  Matrix<T> ff_act;              // after GELU
  DropoutMask<T> ff_dropout;
};

template <typename T>
struct ForwardCache {
  DropoutMask<T> embed_dropout;
  std::vector<LayerCache<T>> layers;
  Matrix<T> final_input;
  LayerNormCache<T> final_ln;
};

}  // namespace detail

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // [L x V]; row k-1 scores token k
  Matrix<T> hidden;  // [L x d]; h_{k-1} is row k-1
};

inline void check_sequence(const ModelConfig& config, const TokenSequence& seq) {
  if (seq.empty()) throw Error(ErrorCode::kBudget, "empty sequence");
  if (seq.size() > config.max_seq_len) {
    throw Error(ErrorCode::kBudget, "sequence length " + std::to_string(seq.size()) +
                                        " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  if (seq.position_ids.size() != seq.size() || seq.segment_ids.size() != seq.size()) {
    throw Error(ErrorCode::kData, "token, position and segment tracks differ in length");
  }
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.token_ids[i] >= config.vocab_size) {
      throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(seq.token_ids[i]) +
                                                " out of vocabulary range");
    }
    if (seq.position_ids[i] >= config.max_seq_len) {
      throw Error(ErrorCode::kBudget, "position id " + std::to_string(seq.position_ids[i]) +
                                          " exceeds max_seq_len");
    }
    if (seq.segment_ids[i] >= config.segment_count) {
      throw Error(ErrorCode::kBudget, "segment id " + std::to_string(seq.segment_ids[i]) +
                                          " exceeds segment_count");
    }
  }
}

namespace detail {

// Final hidden states (after the last layer norm) for one sequence.
template <typename T>
Matrix<T> forward_hidden(const ModelParams<T>& p, const TokenSequence& seq, ForwardCache<T>* cache,
                         Rng* dropout_rng) {
  const auto& c = p.config;
  const auto L = static_cast<Eigen::Index>(seq.size());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto H = static_cast<Eigen::Index>(c.n_heads);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const double rate = dropout_rng ? c.dropout_rate : 0.0;

  Matrix<T> x(L, d);
  for (Eigen::Index i = 0; i < L; ++i) {
    x.row(i) = p.token_embedding.row(seq.token_ids[static_cast<std::size_t>(i)]) +
               p.position_embedding.row(seq.position_ids[static_cast<std::size_t>(i)]) +
               p.segment_embedding.row(seq.segment_ids[static_cast<std::size_t>(i)]);
  }
  DropoutMask<T> scratch;
  apply_dropout(x, cache ? cache->embed_dropout : scratch, rate, dropout_rng);
  if (cache) cache->layers.resize(p.layers.size());

  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& W = p.layers[l];
    LayerCache<T> local;
    LayerCache<T>& lc = cache ? cache->layers[l] : local;
    if (cache) lc.input = x;

    lc.ln1_out = layer_norm(x, W.ln1_gain, W.ln1_bias, &lc.ln1);
    lc.qkv.noalias() = lc.ln1_out * W.qkv_weight;
    lc.qkv.rowwise() += W.qkv_bias.row(0);
    lc.attention.resize(L, d);
    lc.probs.resize(static_cast<std::size_t>(H));
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      Matrix<T>& probs = lc.probs[static_cast<std::size_t>(h)];
      probs.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < L; ++i) {
        auto row = probs.row(i);
        const T max = row.head(i + 1).maxCoeff();
        T sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          row(j) = std::exp(row(j) - max);
          sum += row(j);
        }
        row.head(i + 1) /= sum;
        row.tail(L - i - 1).setZero();
      }
      lc.attention.middleCols(h * dh, dh).noalias() = probs * v;
    }
    Matrix<T> branch = lc.attention * W.proj_weight;
    branch.rowwise() += W.proj_bias.row(0);
    apply_dropout(branch, lc.proj_dropout, rate, dropout_rng);
    x += branch;
    if (cache) lc.mid = x;

    lc.ln2_out = layer_norm(x, W.ln2_gain, W.ln2_bias, &lc.ln2);
    lc.ff_pre.noalias() = lc.ln2_out * W.ff_in_weight;
    lc.ff_pre.rowwise() += W.ff_in_bias.row(0);
    lc.ff_act = lc.ff_pre.unaryExpr([](T v) { return gelu(v); });
    Matrix<T> ff = lc.ff_act * W.ff_out_weight;
    ff.rowwise() += W.ff_out_bias.row(0);
    apply_dropout(ff, lc.ff_dropout, rate, dropout_rng);
    x += ff;
  }
  if (cache) cache->final_input = x;
  return layer_norm(x, p.final_ln_gain, p.final_ln_bias, cache ? &cache->final_ln : nullptr);
}

// Backpropagates d(loss)/d(hidden) through the network into grads.
template <typename T>
void backward_hidden(const ModelParams<T>& p, const TokenSequence& seq, const ForwardCache<T>& cache,
                     const Matrix<T>& dhidden, ModelParams<T>& g) {
  const auto& c = p.config;
  const auto L = static_cast<Eigen::Index>(seq.size());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto H = static_cast<Eigen::Index>(c.n_heads);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> dx = layer_norm_backward(dhidden, cache.final_ln, p.final_ln_gain, g.final_ln_gain,
                                     g.final_ln_bias);
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& W = p.layers[li];
    auto& G = g.layers[li];
    const auto& lc = cache.layers[li];

    // Feed-forward branch.
    Matrix<T> dff = dx;
    if (lc.ff_dropout.active()) dff.array() *= lc.ff_dropout.scale.array();
    G.ff_out_weight.noalias() += lc.ff_act.transpose() * dff;
    G.ff_out_bias.row(0) += dff.colwise().sum();
    Matrix<T> dact = dff * W.ff_out_weight.transpose();
    Matrix<T> dpre = dact.array() * lc.ff_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    G.ff_in_weight.noalias() += lc.ln2_out.transpose() * dpre;
    G.ff_in_bias.row(0) += dpre.colwise().sum();
    Matrix<T> dln2 = dpre * W.ff_in_weight.transpose();
    dx += layer_norm_backward(dln2, lc.ln2, W.ln2_gain, G.ln2_gain, G.ln2_bias);

    // Attention branch.
    Matrix<T> dbranch = dx;
    if (lc.proj_dropout.active()) dbranch.array() *= lc.proj_dropout.scale.array();
    G.proj_weight.noalias() += lc.attention.transpose() * dbranch;
    G.proj_bias.row(0) += dbranch.colwise().sum();
    Matrix<T> datt = dbranch * W.proj_weight.transpose();
    Matrix<T> dqkv(L, 3 * d);
    for (Eigen::Index h = 0; h < H; ++h) {
      const auto q = lc.qkv.middleCols(h * dh, dh);
      const auto k = lc.qkv.middleCols(d + h * dh, dh);
      const auto v = lc.qkv.middleCols(2 * d + h * dh, dh);
      const Matrix<T>& probs = lc.probs[static_cast<std::size_t>(h)];
      const auto dout = datt.middleCols(h * dh, dh);
      Matrix<T> dprobs = dout * v.transpose();
      dqkv.middleCols(2 * d + h * dh, dh).noalias() = probs.transpose() * dout;
      Matrix<T> dscores(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        const T dot = probs.row(i).dot(dprobs.row(i));
        dscores.row(i) = probs.row(i).array() * (dprobs.row(i).array() - dot);
      }
      dscores *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = dscores * k;
      dqkv.middleCols(d + h * dh, dh).noalias() = dscores.transpose() * q;
    }
    G.qkv_weight.noalias() += lc.ln1_out.transpose() * dqkv;
    G.qkv_bias.row(0) += dqkv.colwise().sum();
    Matrix<T> dln1 = dqkv * W.qkv_weight.transpose();
    dx += layer_norm_backward(dln1, lc.ln1, W.ln1_gain, G.ln1_gain, G.ln1_bias);
  }
  if (cache.embed_dropout.active()) dx.array() *= cache.embed_dropout.scale.array();
  for (Eigen::Index i = 0; i < L; ++i) {
    const auto s = static_cast<std::size_t>(i);
    g.token_embedding.row(seq.token_ids[s]) += dx.row(i);
    g.position_embedding.row(seq.position_ids[s]) += dx.row(i);
    g.segment_embedding.row(seq.segment_ids[s]) += dx.row(i);
  }
}

}  // namespace detail

// Logits and hidden states for every position; softmax of logits row k-1 is
// the predicted distribution of token k given tokens 1..k-1.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const TokenSequence& seq) {
  check_sequence(params.config, seq);
  ForwardResult<T> out;
  out.hidden = detail::forward_hidden<T>(params, seq, nullptr, nullptr);
  out.logits.noalias() = out.hidden * params.output_projection.transpose();
  return out;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T max = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - max).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// mask[k] marks token k as a prediction target (predicted from row k-1);
// mask[0] is ignored.
using LossMask = std::vector<std::uint8_t>;

inline std::size_t count_targets(const LossMask& mask) {
  std::size_t n = 0;
  for (std::size_t k = 1; k < mask.size(); ++k) n += mask[k] ? 1 : 0;
  return n;
}

// Sum of -log P(t_k | t_<k) over masked positions of one sequence. When
// `grads` is given, adds d(sum * weight)/d(theta) into it.
template <typename T>
double sequence_nll(const ModelParams<T>& params, const TokenSequence& seq, const LossMask& mask,
                    ModelParams<T>* grads, T weight = T(1), Rng* dropout_rng = nullptr) {
  check_sequence(params.config, seq);
  if (mask.size() != seq.size()) throw Error(ErrorCode::kData, "loss mask length differs from sequence");
  std::vector<Eigen::Index> rows;
  for (std::size_t k = 1; k < seq.size(); ++k) {
    if (mask[k]) rows.push_back(static_cast<Eigen::Index>(k - 1));
  }
  if (rows.empty()) return 0.0;

  detail::ForwardCache<T> cache;
  const Matrix<T> hidden = detail::forward_hidden<T>(params, seq, grads ? &cache : nullptr, dropout_rng);
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix<T> selected(n, hidden.cols());
  for (Eigen::Index r = 0; r < n; ++r) selected.row(r) = hidden.row(rows[static_cast<std::size_t>(r)]);
  Matrix<T> logits = selected * params.output_projection.transpose();

  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto target = seq.token_ids[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)] + 1)];
    auto row = logits.row(r);
    const T max = row.maxCoeff();
    row.array() -= max;
    const T log_z = std::log(row.array().exp().sum());
    total -= static_cast<double>(row(target) - log_z);
    if (grads) {
      row = (row.array() - log_z).exp().matrix();  // softmax
      row(target) -= T(1);
      row *= weight;
    }
  }
  if (grads) {
    grads->output_projection.noalias() += logits.transpose() * selected;
    Matrix<T> dselected = logits * params.output_projection;
    Matrix<T> dhidden = Matrix<T>::Zero(hidden.rows(), hidden.cols());
    for (Eigen::Index r = 0; r < n; ++r) dhidden.row(rows[static_cast<std::size_t>(r)]) = dselected.row(r);
    detail::backward_hidden<T>(params, seq, cache, dhidden, *grads);
  }
  return total;
}

template <typename T>
struct LossResult {
  double loss = 0.0;           // mean negative log-likelihood
  std::size_t targets = 0;     // number of supervised positions
  ModelParams<T> gradients;    // d(loss)/d(theta); empty when not requested
};

// Negated objective averaged over all unmasked positions of the batch.
template <typename T>
LossResult<T> loss(const ModelParams<T>& params, std::span<const TokenSequence> batch,
                   std::span<const LossMask> masks, bool with_gradients = true) {
  if (batch.size() != masks.size()) throw Error(ErrorCode::kData, "one loss mask per sequence required");
  LossResult<T> result;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].size() < 2) throw Error(ErrorCode::kData, "sequences need at least 2 tokens");
    result.targets += count_targets(masks[i]);
  }
  if (result.targets == 0) throw Error(ErrorCode::kAllMasked, "every position of the batch is masked");
  const T weight = T(1) / static_cast<T>(result.targets);
  if (with_gradients) result.gradients = ModelParams<T>::zeros(params.config);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += sequence_nll(params, batch[i], masks[i], with_gradients ? &result.gradients : nullptr, weight);
  }
  result.loss = total / static_cast<double>(result.targets);
  return result;
}

enum class DecodeMode { kGreedy, kTopK };

struct GenerateOptions {
  std::size_t max_new = 1;
  DecodeMode mode = DecodeMode::kGreedy;
  std::size_t top_k = 8;
  std::uint64_t seed = 0;
  std::optional<TokenId> stop_token;  // typically [eos]; included in output
};

// Appends tokens one at a time. New tokens extend the positions and reuse the
// prefix's last segment id.
template <typename T>
std::vector<TokenId> generate(const ModelParams<T>& params, const TokenSequence& prefix,
                              const GenerateOptions& options) {
  if (prefix.size() + options.max_new > params.config.max_seq_len) {
    throw Error(ErrorCode::kBudget, "prefix of " + std::to_string(prefix.size()) + " plus " +
                                        std::to_string(options.max_new) +
                                        " new tokens exceeds max_seq_len");
  }
  std::vector<TokenId> out;
  if (options.max_new == 0) return out;
  check_sequence(params.config, prefix);
  TokenSequence seq = prefix;
  const std::uint32_t segment = prefix.segment_ids.back();
  Rng rng(options.seed);
  for (std::size_t step = 0; step < options.max_new; ++step) {
    const Matrix<T> hidden = detail::forward_hidden<T>(params, seq, nullptr, nullptr);
    const Matrix<T> logits = hidden.bottomRows(1) * params.output_projection.transpose();
    TokenId next = 0;
    if (options.mode == DecodeMode::kGreedy) {
      Eigen::Index best;
      logits.row(0).maxCoeff(&best);
      next = static_cast<TokenId>(best);
    } else {
      const std::size_t k = std::max<std::size_t>(1, std::min<std::size_t>(options.top_k, logits.cols()));
      std::vector<TokenId> ids(static_cast<std::size_t>(logits.cols()));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                        [&](TokenId a, TokenId b) {
                          return logits(0, a) > logits(0, b) || (logits(0, a) == logits(0, b) && a < b);
                        });
      std::vector<double> weights(k);
      const double max = static_cast<double>(logits(0, ids[0]));
      double sum = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        weights[i] = std::exp(static_cast<double>(logits(0, ids[i])) - max);
        sum += weights[i];
      }
      double u = rng.uniform01() * sum;
      next = ids[k - 1];
      for (std::size_t i = 0; i < k; ++i) {
        if (u < weights[i]) {
          next = ids[i];
          break;
        }
        u -= weights[i];
      }
    }
    out.push_back(next);
    if (options.stop_token && next == *options.stop_token) break;
    seq.push(next, segment);
    seq.position_ids.back() = seq.position_ids[seq.size() - 2] + 1;
  }
  return out;
}

}  // namespace netgpt
