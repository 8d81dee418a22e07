#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hatelab/error.hpp"
#include "hatelab/features.hpp"
#include "hatelab/random.hpp"

// A small pre-norm transformer encoder classifier with hand-written forward
// and backward passes, and low-rank adapters (LoRA) on its projections.
namespace hatelab::microformer {

using Tensor = Eigen::MatrixXd;

struct ModelConfig {
  std::size_t vocab_size = 8193;  // 8192 terms + <unk>
  std::size_t max_seq_len = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t n_classes = 2;
  double dropout = 0.0;
  double layer_norm_eps = 1e-10;

  void validate() const {
    if (vocab_size == 0 || max_seq_len == 0 || d_model == 0 || n_heads == 0 || d_ff == 0) {
      throw DomainError("model config: sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw DomainError("model config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (n_classes != 2) throw DomainError("model config: only binary classification is supported");
    if (dropout < 0.0 || dropout >= 1.0) throw DomainError("model config: dropout must lie in [0,1)");
    if (!(layer_norm_eps > 0.0)) throw DomainError("model config: layer_norm_eps must be > 0");
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Param {
  Tensor value;
  bool trainable = true;
};

enum class Projection { Query, Key, Value, Output };

inline std::string_view to_string(Projection p) {
  switch (p) {
    case Projection::Query: return "q";
    case Projection::Key: return "k";
    case Projection::Value: return "v";
    case Projection::Output: return "o";
  }
  return "?";
}

// Effective weight is W + (alpha / rank) * B * A.
struct LoraAdapter {
  std::size_t rank = 8;
  double alpha = 16.0;
  Param A;  // rank x d_in
  Param B;  // d_out x rank

  double scale() const { return alpha / static_cast<double>(rank); }
};

// y = x W^T + b, rows of x are positions.
struct Linear {
  Param weight;  // d_out x d_in
  Param bias;    // 1 x d_out
  std::optional<LoraAdapter> lora;

  Tensor effective_weight() const {
    if (!lora) return weight.value;
    return weight.value + lora->scale() * lora->B.value * lora->A.value;
  }
};

struct LayerNorm {
  Param gain;  // 1 x d
  Param bias;  // 1 x d
};

struct EncoderLayer {
  LayerNorm ln1;
  Linear q, k, v, o;
  LayerNorm ln2;
  Linear ff1, ff2;

  Linear& projection(Projection p) {
    switch (p) {
      case Projection::Query: return q;
      case Projection::Key: return k;
      case Projection::Value: return v;
      case Projection::Output: return o;
    }
    return q;
  }
};

struct TransformerClassifier {
  ModelConfig config;
  Param tok_emb;  // V x d
  Param pos_emb;  // L x d
  std::vector<EncoderLayer> layers;
  LayerNorm ln_f;
  Linear head;  // 2 x d

  // Visits every tensor with a stable dotted name, in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("tok_emb"), self.tok_emb);
    f(std::string("pos_emb"), self.pos_emb);
    const auto linear = [&](const std::string& prefix, auto& l) {
      f(prefix + ".weight", l.weight);
      f(prefix + ".bias", l.bias);
      if (l.lora) {
        f(prefix + ".lora_A", l.lora->A);
        f(prefix + ".lora_B", l.lora->B);
      }
    };
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& L = self.layers[i];
      const std::string p = "layers." + std::to_string(i);
      f(p + ".ln1.gain", L.ln1.gain);
      f(p + ".ln1.bias", L.ln1.bias);
      linear(p + ".attn.q", L.q);
      linear(p + ".attn.k", L.k);
      linear(p + ".attn.v", L.v);
      linear(p + ".attn.o", L.o);
      f(p + ".ln2.gain", L.ln2.gain);
      f(p + ".ln2.bias", L.ln2.bias);
      linear(p + ".ff1", L.ff1);
      linear(p + ".ff2", L.ff2);
    }
    f(std::string("ln_f.gain"), self.ln_f.gain);
    f(std::string("ln_f.bias"), self.ln_f.bias);
    linear(std::string("head"), self.head);
  }

  template <typename F>
  void for_each_param(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_param(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Param& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Param& p) {
      if (p.trainable) n += static_cast<std::size_t>(p.value.size());
    });
    return n;
  }

  bool has_adapters() const {
    for (const auto& L : layers) {
      for (const auto* l : {&L.q, &L.k, &L.v, &L.o, &L.ff1, &L.ff2}) {
        if (l->lora) return true;
      }
    }
    return head.lora.has_value();
  }

  // Same structure, every tensor zero. Used as a gradient accumulator.
  TransformerClassifier zeros_like() const {
    TransformerClassifier z = *this;
    z.for_each_param([](const std::string&, Param& p) { p.value.setZero(); });
    return z;
  }
};

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

inline Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = rng.normal(0.0, stddev);
  }
  return t;
}

inline Linear make_linear(Rng& rng, std::size_t d_in, std::size_t d_out) {
  Linear l;
  l.weight.value = normal_tensor(rng, d_out, d_in, 0.02);
  l.bias.value = Tensor::Zero(1, static_cast<Eigen::Index>(d_out));
  return l;
}

inline LayerNorm make_layer_norm(std::size_t d) {
  return {Param{Tensor::Ones(1, static_cast<Eigen::Index>(d)), true},
          Param{Tensor::Zero(1, static_cast<Eigen::Index>(d)), true}};
}

}  // namespace detail

// Weights ~ normal(0, 0.02), biases zero, layer-norm gains one.
inline TransformerClassifier init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  TransformerClassifier m;
  m.config = config;
  m.tok_emb.value = detail::normal_tensor(rng, config.vocab_size, config.d_model, 0.02);
  m.pos_emb.value = detail::normal_tensor(rng, config.max_seq_len, config.d_model, 0.02);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    EncoderLayer L;
    L.ln1 = detail::make_layer_norm(config.d_model);
    L.q = detail::make_linear(rng, config.d_model, config.d_model);
    L.k = detail::make_linear(rng, config.d_model, config.d_model);
    L.v = detail::make_linear(rng, config.d_model, config.d_model);
    L.o = detail::make_linear(rng, config.d_model, config.d_model);
    L.ln2 = detail::make_layer_norm(config.d_model);
    L.ff1 = detail::make_linear(rng, config.d_model, config.d_ff);
    L.ff2 = detail::make_linear(rng, config.d_ff, config.d_model);
    m.layers.push_back(std::move(L));
  }
  m.ln_f = detail::make_layer_norm(config.d_model);
  m.head = detail::make_linear(rng, config.d_model, config.n_classes);
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

struct LinearTrace {
  Tensor input;
  Tensor lora_u;  // input * A^T when an adapter is attached
};

struct LayerNormTrace {
  Tensor xhat;                // normalised rows before gain/bias
  Eigen::VectorXd inv_std;    // per row
};

struct LayerTrace {
  LayerNormTrace ln1;
  LinearTrace q, k, v, o;
  Tensor Q, K, V;
  std::vector<Tensor> probs;  // per head, n x n attention weights
  Tensor drop1;               // dropout mask (scaled), empty when off
  LayerNormTrace ln2;
  LinearTrace ff1, ff2;
  Tensor ff_pre;
  Tensor drop2;
};

// Everything the backward pass needs, also exposed for invariant checks.
struct ForwardTrace {
  std::vector<std::size_t> ids;
  std::vector<LayerTrace> layers;
  LayerNormTrace ln_f;
  Tensor pooled;  // 1 x d
  LinearTrace head;
  Eigen::RowVector2d logits;
};

namespace detail {

inline Tensor linear_forward(const Linear& l, const Tensor& x, LinearTrace* trace) {
  Tensor y = x * l.weight.value.transpose();
  y.rowwise() += l.bias.value.row(0);
  if (l.lora) {
    Tensor u = x * l.lora->A.value.transpose();
    y.noalias() += l.lora->scale() * (u * l.lora->B.value.transpose());
    if (trace) trace->lora_u = std::move(u);
  }
  if (trace) trace->input = x;
  return y;
}

inline Tensor layer_norm_forward(const LayerNorm& ln, const Tensor& x, double eps, LayerNormTrace* trace) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  Tensor xhat(n, x.cols());
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const auto centered = (x.row(i).array() - mean).matrix();
    const double var = centered.squaredNorm() / d;
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Tensor y = xhat.array().rowwise() * ln.gain.value.row(0).array();
  y.rowwise() += ln.bias.value.row(0);
  if (trace) {
    trace->xhat = std::move(xhat);
    trace->inv_std = std::move(inv_std);
  }
  return y;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

inline Tensor softmax_rows(const Tensor& s) {
  Tensor p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Tensor dropout_mask(Rng* rng, double rate, Eigen::Index rows, Eigen::Index cols) {
  if (!rng || rate <= 0.0) return {};
  Tensor m(rows, cols);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng->uniform() < rate ? 0.0 : keep;
  }
  return m;
}

inline void check_ids(const ModelConfig& cfg, std::span<const std::size_t> ids) {
  if (ids.empty()) throw DomainError("forward: empty token sequence");
  if (ids.size() > cfg.max_seq_len) {
    throw DomainError("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  for (const auto id : ids) {
    if (id >= cfg.vocab_size) {
      throw DomainError("forward: token id " + std::to_string(id) + " out of range (vocab " +
                        std::to_string(cfg.vocab_size) + ")");
    }
  }
}

}  // namespace detail

// Full forward pass. `dropout_rng` enables training-mode dropout; pass
// nullptr for deterministic evaluation.
inline ForwardTrace forward_trace(const TransformerClassifier& m, std::span<const std::size_t> ids,
                                  Rng* dropout_rng = nullptr) {
  const auto& cfg = m.config;
  detail::check_ids(cfg, ids);
  const auto n = static_cast<Eigen::Index>(ids.size());
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto dk = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  ForwardTrace tr;
  tr.ids.assign(ids.begin(), ids.end());
  Tensor x(n, d);
  for (Eigen::Index t = 0; t < n; ++t) {
    x.row(t) = m.tok_emb.value.row(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(t)])) + m.pos_emb.value.row(t);
  }
  tr.layers.resize(m.layers.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const auto& L = m.layers[li];
    auto& T = tr.layers[li];
    const Tensor a = detail::layer_norm_forward(L.ln1, x, cfg.layer_norm_eps, &T.ln1);
    T.Q = detail::linear_forward(L.q, a, &T.q);
    T.K = detail::linear_forward(L.k, a, &T.k);
    T.V = detail::linear_forward(L.v, a, &T.v);
    Tensor heads(n, d);
    T.probs.resize(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dk;
      const Tensor s = (T.Q.middleCols(c0, dk) * T.K.middleCols(c0, dk).transpose()) * scale;
      T.probs[h] = detail::softmax_rows(s);
      heads.middleCols(c0, dk) = T.probs[h] * T.V.middleCols(c0, dk);
    }
    Tensor attn = detail::linear_forward(L.o, heads, &T.o);
    T.drop1 = detail::dropout_mask(dropout_rng, cfg.dropout, n, d);
    if (T.drop1.size()) attn.array() *= T.drop1.array();
    const Tensor hres = x + attn;

    const Tensor b = detail::layer_norm_forward(L.ln2, hres, cfg.layer_norm_eps, &T.ln2);
    T.ff_pre = detail::linear_forward(L.ff1, b, &T.ff1);
    const Tensor act = T.ff_pre.unaryExpr([](double v) { return detail::gelu(v); });
    Tensor ff = detail::linear_forward(L.ff2, act, &T.ff2);
    T.drop2 = detail::dropout_mask(dropout_rng, cfg.dropout, n, d);
    if (T.drop2.size()) ff.array() *= T.drop2.array();
    x = hres + ff;
  }
  const Tensor fin = detail::layer_norm_forward(m.ln_f, x, cfg.layer_norm_eps, &tr.ln_f);
  tr.pooled = fin.colwise().mean();
  const Tensor logits = detail::linear_forward(m.head, tr.pooled, &tr.head);
  tr.logits = logits.row(0);
  return tr;
}

inline Eigen::RowVector2d forward(const TransformerClassifier& m, std::span<const std::size_t> ids) {
  return forward_trace(m, ids).logits;
}

inline bool predict(const TransformerClassifier& m, std::span<const std::size_t> ids) {
  const auto z = forward(m, ids);
  return z(1) > z(0);
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

// Accumulates parameter gradients into `g` (same structure as the layer) and
// returns dL/dx.
inline Tensor linear_backward(const Linear& l, const LinearTrace& tr, const Tensor& dy, Linear& g,
                              bool need_dx = true) {
  if (l.weight.trainable) g.weight.value.noalias() += dy.transpose() * tr.input;
  if (l.bias.trainable) g.bias.value += dy.colwise().sum();
  Tensor dx;
  if (need_dx) dx = dy * l.weight.value;
  if (l.lora) {
    const double s = l.lora->scale();
    if (l.lora->B.trainable) g.lora->B.value.noalias() += s * (dy.transpose() * tr.lora_u);
    if (l.lora->A.trainable || need_dx) {
      const Tensor du = s * (dy * l.lora->B.value);
      if (l.lora->A.trainable) g.lora->A.value.noalias() += du.transpose() * tr.input;
      if (need_dx) dx.noalias() += du * l.lora->A.value;
    }
  }
  return dx;
}

inline bool any_trainable(const Linear& l) {
  return l.weight.trainable || l.bias.trainable || (l.lora && (l.lora->A.trainable || l.lora->B.trainable));
}

inline bool any_trainable(const LayerNorm& ln) { return ln.gain.trainable || ln.bias.trainable; }

inline bool any_trainable(const EncoderLayer& L) {
  return any_trainable(L.ln1) || any_trainable(L.q) || any_trainable(L.k) || any_trainable(L.v) ||
         any_trainable(L.o) || any_trainable(L.ln2) || any_trainable(L.ff1) || any_trainable(L.ff2);
}

inline Tensor layer_norm_backward(const LayerNorm& ln, const LayerNormTrace& tr, const Tensor& dy, LayerNorm& g) {
  if (ln.gain.trainable) g.gain.value += (dy.array() * tr.xhat.array()).colwise().sum().matrix();
  if (ln.bias.trainable) g.bias.value += dy.colwise().sum();
  const Tensor dxhat = dy.array().rowwise() * ln.gain.value.row(0).array();
  Tensor dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = dxhat.row(i).dot(tr.xhat.row(i)) / static_cast<double>(dy.cols());
    dx.row(i) = tr.inv_std(i) * (dxhat.row(i).array() - m1 - tr.xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

// Backpropagates dL/dlogits through one example, accumulating into `g`.
inline void backward(const TransformerClassifier& m, const ForwardTrace& tr, const Eigen::RowVector2d& dlogits,
                     TransformerClassifier& g) {
  const auto& cfg = m.config;
  const auto n = static_cast<Eigen::Index>(tr.ids.size());
  const auto dk = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  const Tensor dpooled = linear_backward(m.head, tr.head, Tensor(dlogits), g.head);
  const Tensor dfin = dpooled.replicate(n, 1) / static_cast<double>(n);
  Tensor dx = layer_norm_backward(m.ln_f, tr.ln_f, dfin, g.ln_f);

  // below[i]: something under layer i (embeddings or an earlier layer) wants
  // a gradient. Work that only feeds frozen tensors is skipped.
  std::vector<bool> below(m.layers.size() + 1);
  below[0] = m.tok_emb.trainable || m.pos_emb.trainable;
  for (std::size_t li = 0; li < m.layers.size(); ++li) below[li + 1] = below[li] || any_trainable(m.layers[li]);

  for (std::size_t li = m.layers.size(); li-- > 0;) {
    if (!below[li + 1]) break;
    const auto& L = m.layers[li];
    const auto& T = tr.layers[li];
    auto& G = g.layers[li];

    Tensor dff = dx;
    if (T.drop2.size()) dff.array() *= T.drop2.array();
    const Tensor dact = linear_backward(L.ff2, T.ff2, dff, G.ff2);
    const Tensor dpre = dact.array() * T.ff_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    const Tensor db = linear_backward(L.ff1, T.ff1, dpre, G.ff1);
    const Tensor dh = dx + layer_norm_backward(L.ln2, T.ln2, db, G.ln2);

    Tensor dattn = dh;
    if (T.drop1.size()) dattn.array() *= T.drop1.array();
    const Tensor dheads = linear_backward(L.o, T.o, dattn, G.o);
    const bool need_da = below[li] || any_trainable(L.ln1);
    const bool want_q = need_da || any_trainable(L.q);
    const bool want_k = need_da || any_trainable(L.k);
    const bool want_v = need_da || any_trainable(L.v);
    Tensor dQ(n, dheads.cols()), dK(n, dheads.cols()), dV(n, dheads.cols());
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dk;
      const auto& P = T.probs[h];
      const Tensor dOh = dheads.middleCols(c0, dk);
      if (want_v) dV.middleCols(c0, dk) = P.transpose() * dOh;
      if (!want_q && !want_k) continue;
      const Tensor dP = dOh * T.V.middleCols(c0, dk).transpose();
      const Eigen::VectorXd rowdot = (dP.array() * P.array()).rowwise().sum();
      const Tensor dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
      if (want_q) dQ.middleCols(c0, dk) = dS * T.K.middleCols(c0, dk);
      if (want_k) dK.middleCols(c0, dk) = dS.transpose() * T.Q.middleCols(c0, dk);
    }
    Tensor da;
    const auto add = [&](const Linear& lin, const LinearTrace& lt, const Tensor& dy, Linear& gl, bool want) {
      if (!want) return;
      Tensor part = linear_backward(lin, lt, dy, gl, need_da);
      if (!need_da) return;
      if (da.size() == 0) {
        da = std::move(part);
      } else {
        da += part;
      }
    };
    add(L.q, T.q, dQ, G.q, want_q);
    add(L.k, T.k, dK, G.k, want_k);
    add(L.v, T.v, dV, G.v, want_v);
    if (need_da) {
      const Tensor dln = layer_norm_backward(L.ln1, T.ln1, da, G.ln1);
      if (below[li]) dx = dh + dln;
    }
  }

  if (!below[0]) return;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (m.tok_emb.trainable) g.tok_emb.value.row(static_cast<Eigen::Index>(tr.ids[static_cast<std::size_t>(t)])) += dx.row(t);
    if (m.pos_emb.trainable) g.pos_emb.value.row(t) += dx.row(t);
  }
}

// log-sum-exp cross entropy for label y, plus softmax(z) - onehot(y).
inline std::pair<double, Eigen::RowVector2d> cross_entropy(const Eigen::RowVector2d& z, bool y) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log(std::exp(z(0) - mx) + std::exp(z(1) - mx));
  Eigen::RowVector2d p;
  p << std::exp(z(0) - lse), std::exp(z(1) - lse);
  Eigen::RowVector2d dz = p;
  dz(y ? 1 : 0) -= 1.0;
  return {lse - z(y ? 1 : 0), dz};
}

}  // namespace detail

struct Example {
  std::vector<std::size_t> ids;
  bool label = false;
};

struct BatchResult {
  double loss = 0.0;  // mean cross-entropy
  std::size_t correct = 0;
};

// Mean cross-entropy over the batch; gradients are accumulated into `grads`
// (a zeros_like() of the model) for trainable tensors only.
inline BatchResult accumulate_batch(const TransformerClassifier& m, std::span<const Example* const> batch,
                                    TransformerClassifier& grads, Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw DomainError("loss_and_grads: empty batch");
  BatchResult r;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto* ex : batch) {
    const auto tr = forward_trace(m, ex->ids, dropout_rng);
    const auto [loss, dz] = detail::cross_entropy(tr.logits, ex->label);
    r.loss += loss * inv_b;
    if ((tr.logits(1) > tr.logits(0)) == ex->label) ++r.correct;
    detail::backward(m, tr, dz * inv_b, grads);
  }
  if (!std::isfinite(r.loss)) throw DivergenceError("transformer: loss became non-finite");
  return r;
}

using GradientMap = std::map<std::string, Tensor>;

struct LossAndGrads {
  double loss = 0.0;
  GradientMap grads;  // trainable tensors only
};

inline LossAndGrads loss_and_grads(const TransformerClassifier& m, std::span<const Example> batch) {
  std::vector<const Example*> ptrs;
  for (const auto& e : batch) ptrs.push_back(&e);
  auto g = m.zeros_like();
  const auto r = accumulate_batch(m, ptrs, g);
  LossAndGrads out;
  out.loss = r.loss;
  std::vector<std::pair<std::string, bool>> flags;
  m.for_each_param([&](const std::string& name, const Param& p) { flags.emplace_back(name, p.trainable); });
  std::size_t k = 0;
  g.for_each_param([&](const std::string& name, Param& p) {
    if (flags[k++].second) out.grads.emplace(name, std::move(p.value));
  });
  return out;
}

// Scalar loss only (used by finite-difference checks).
inline double loss(const TransformerClassifier& m, std::span<const Example> batch) {
  if (batch.empty()) throw DomainError("loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += detail::cross_entropy(forward(m, ex.ids), ex.label).first;
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// LoRA

struct LoraOptions {
  std::set<Projection> targets{Projection::Query, Projection::Value};
  std::size_t rank = 8;
  double alpha = 16.0;
  bool train_head = true;
  std::uint64_t seed = 0;
};

// Freezes every base tensor and wraps the target projections of every layer
// with an adapter (A ~ normal(0, 0.02), B = 0), so the adapted model starts
// out computing exactly what the base model computes.
inline TransformerClassifier attach_lora(TransformerClassifier m, const LoraOptions& opt = {}) {
  if (opt.rank < 1) throw DomainError("attach_lora: rank must be >= 1");
  if (opt.targets.empty()) throw DomainError("attach_lora: no target projections");
  if (m.has_adapters()) throw DomainError("attach_lora: adapters already attached");
  const std::size_t d = m.config.d_model;
  if (opt.rank >= d) {
    throw DomainError("attach_lora: rank " + std::to_string(opt.rank) + " is not low-rank for " +
                      std::to_string(d) + "x" + std::to_string(d) + " projections");
  }
  m.for_each_param([](const std::string&, Param& p) { p.trainable = false; });
  Rng rng(opt.seed);
  for (auto& L : m.layers) {
    for (const auto target : opt.targets) {
      auto& lin = L.projection(target);
      LoraAdapter a;
      a.rank = opt.rank;
      a.alpha = opt.alpha;
      a.A.value = detail::normal_tensor(rng, opt.rank, static_cast<std::size_t>(lin.weight.value.cols()), 0.02);
      a.B.value = Tensor::Zero(lin.weight.value.rows(), static_cast<Eigen::Index>(opt.rank));
      lin.lora = std::move(a);
    }
  }
  m.head.weight.trainable = opt.train_head;
  m.head.bias.trainable = opt.train_head;
  return m;
}

// Folds W + (alpha/r) B A into each wrapped weight and drops the adapters.
// The result is a plain, fully trainable model.
inline TransformerClassifier merge_lora(TransformerClassifier m) {
  if (!m.has_adapters()) throw DomainError("merge_lora: no adapters attached");
  for (auto& L : m.layers) {
    for (auto* lin : {&L.q, &L.k, &L.v, &L.o, &L.ff1, &L.ff2}) {
      if (!lin->lora) continue;
      lin->weight.value = lin->effective_weight();
      lin->lora.reset();
    }
  }
  if (m.head.lora) {
    m.head.weight.value = m.head.effective_weight();
    m.head.lora.reset();
  }
  m.for_each_param([](const std::string&, Param& p) { p.trainable = true; });
  return m;
}

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { Full, Lora };

struct TrainOptions {
  std::size_t epochs = 3;
  double lr = 0.05;
  std::size_t batch_size = 8;
  std::uint64_t seed = 42;
  TrainMode mode = TrainMode::Full;
  LoraOptions lora{};  // used when mode == Lora and no adapters are attached yet
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;  // on the training batches, as seen during the epoch
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
};

// Plain mini-batch SGD. In Lora mode the model gains adapters (if it has
// none) and only they (plus the head, per LoraOptions) are updated.
inline TrainReport train(TransformerClassifier& m, std::span<const Example> data, const TrainOptions& opt) {
  if (data.empty()) throw DomainError("train: empty dataset");
  if (opt.epochs < 1) throw DomainError("train: epochs must be >= 1");
  if (!(opt.lr > 0.0)) throw DomainError("train: learning rate must be > 0");
  if (opt.mode == TrainMode::Lora) {
    if (!m.has_adapters()) m = attach_lora(std::move(m), opt.lora);
  } else {
    m.for_each_param([](const std::string&, Param& p) { p.trainable = true; });
  }

  TrainReport report;
  report.trainable_params = m.trainable_count();
  report.total_params = m.parameter_count();

  std::vector<Param*> params;
  m.for_each_param([&](const std::string&, Param& p) { params.push_back(&p); });
  auto grads = m.zeros_like();
  std::vector<Param*> gparams;
  grads.for_each_param([&](const std::string&, Param& p) { gparams.push_back(&p); });

  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  std::vector<std::size_t> order(data.size());
  std::vector<const Example*> batch;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(opt.seed, 2 * epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    Rng dropout_rng(derive_seed(opt.seed, 2 * epoch + 1));
    EpochStats stats;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      batch.clear();
      for (std::size_t k = start; k < end; ++k) batch.push_back(&data[order[k]]);
      for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->trainable) gparams[k]->value.setZero();
      }
      const auto r = accumulate_batch(m, batch, grads, m.config.dropout > 0.0 ? &dropout_rng : nullptr);
      stats.loss += r.loss * static_cast<double>(end - start);
      correct += r.correct;
      for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->trainable) params[k]->value.noalias() -= opt.lr * gparams[k]->value;
      }
    }
    stats.loss /= static_cast<double>(data.size());
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(stats);
  }
  return report;
}

inline double accuracy(const TransformerClassifier& m, std::span<const Example> data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : data) correct += predict(m, ex.ids) == ex.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Word-level tokenizer: id 0 is <unk>, then the most frequent terms
// (ties broken by first appearance).

class TokenVocab {
 public:
  static constexpr std::size_t kUnk = 0;

  static TokenVocab build(const std::vector<TokenList>& docs, std::size_t max_terms = 8192) {
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> stats;  // count, first seen
    std::size_t order = 0;
    for (const auto& d : docs) {
      for (const auto& t : d) {
        auto [it, inserted] = stats.try_emplace(t, 0, order);
        if (inserted) ++order;
        ++it->second.first;
      }
    }
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> ranked(stats.begin(), stats.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second.first != b.second.first) return a.second.first > b.second.first;
      return a.second.second < b.second.second;
    });
    TokenVocab v;
    v.terms_.push_back("<unk>");
    for (std::size_t i = 0; i < ranked.size() && i < max_terms; ++i) {
      v.index_.emplace(ranked[i].first, v.terms_.size());
      v.terms_.push_back(ranked[i].first);
    }
    return v;
  }

  std::size_t size() const { return terms_.size(); }
  const std::vector<std::string>& terms() const { return terms_; }

  // Truncates to max_len; an empty document becomes a single <unk>.
  std::vector<std::size_t> encode(const TokenList& doc, std::size_t max_len) const {
    std::vector<std::size_t> ids;
    for (const auto& t : doc) {
      if (ids.size() == max_len) break;
      const auto it = index_.find(t);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    if (ids.empty()) ids.push_back(kUnk);
    return ids;
  }

 private:
  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON containers of named tensors. Base weights and adapters
// live in separate files so base + adapter file rebuilds the adapted model.

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  std::vector<double> data(static_cast<std::size_t>(t.size()));
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) data[static_cast<std::size_t>(i * t.cols() + j)] = t(i, j);
  }
  return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", data}};
}

inline Tensor tensor_from_json(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (j.at("rows").get<Eigen::Index>() != rows || j.at("cols").get<Eigen::Index>() != cols) {
    throw ParseError("checkpoint: tensor '" + name + "' has the wrong shape");
  }
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ParseError("checkpoint: tensor '" + name + "' has the wrong element count");
  }
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) t(i, j2) = data[static_cast<std::size_t>(i * cols + j2)];
  }
  return t;
}

inline bool is_adapter_name(const std::string& name) {
  return name.ends_with(".lora_A") || name.ends_with(".lora_B");
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},       {"d_ff", c.d_ff},
          {"n_classes", c.n_classes},   {"dropout", c.dropout},         {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": not found");
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << j.dump() << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace detail

// Base tensors only (adapters are excluded even when attached).
inline nlohmann::json checkpoint_to_json(const TransformerClassifier& m) {
  nlohmann::json tensors = nlohmann::json::object();
  m.for_each_param([&](const std::string& name, const Param& p) {
    if (!detail::is_adapter_name(name)) tensors[name] = detail::tensor_to_json(p.value);
  });
  return {{"format", "hatelab-transformer"}, {"version", 1}, {"config", detail::config_to_json(m.config)},
          {"tensors", tensors}};
}

inline TransformerClassifier checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "hatelab-transformer") throw ParseError("checkpoint: unknown format tag");
    auto m = init_model(detail::config_from_json(j.at("config")), 0);
    const auto& tensors = j.at("tensors");
    m.for_each_param([&](const std::string& name, Param& p) {
      if (!tensors.contains(name)) throw ParseError("checkpoint: missing tensor '" + name + "'");
      p.value = detail::tensor_from_json(tensors.at(name), p.value.rows(), p.value.cols(), name);
    });
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

inline nlohmann::json adapters_to_json(const TransformerClassifier& m) {
  if (!m.has_adapters()) throw DomainError("save_adapters: no adapters attached");
  nlohmann::json tensors = nlohmann::json::object();
  std::size_t rank = 0;
  double alpha = 0.0;
  std::set<std::string> targets;
  for (const auto& L : m.layers) {
    for (const auto p : {Projection::Query, Projection::Key, Projection::Value, Projection::Output}) {
      const auto& lin = const_cast<EncoderLayer&>(L).projection(p);
      if (lin.lora) {
        rank = lin.lora->rank;
        alpha = lin.lora->alpha;
        targets.insert(std::string(to_string(p)));
      }
    }
  }
  m.for_each_param([&](const std::string& name, const Param& p) {
    if (detail::is_adapter_name(name)) tensors[name] = detail::tensor_to_json(p.value);
  });
  nlohmann::json head;
  head["weight"] = detail::tensor_to_json(m.head.weight.value);
  head["bias"] = detail::tensor_to_json(m.head.bias.value);
  return {{"format", "hatelab-lora"}, {"version", 1},         {"rank", rank},
          {"alpha", alpha},           {"targets", targets},   {"train_head", m.head.weight.trainable},
          {"tensors", tensors},       {"head", head}};
}

// Attaches the adapters stored in `j` to a base model. The classifier head is
// restored too when it was trained alongside the adapters.
inline TransformerClassifier apply_adapters(TransformerClassifier base, const nlohmann::json& j) {
  try {
    if (j.at("format") != "hatelab-lora") throw ParseError("adapter file: unknown format tag");
    LoraOptions opt;
    opt.rank = j.at("rank").get<std::size_t>();
    opt.alpha = j.at("alpha").get<double>();
    opt.train_head = j.at("train_head").get<bool>();
    opt.targets.clear();
    for (const auto& t : j.at("targets")) {
      const auto s = t.get<std::string>();
      bool found = false;
      for (const auto p : {Projection::Query, Projection::Key, Projection::Value, Projection::Output}) {
        if (s == to_string(p)) {
          opt.targets.insert(p);
          found = true;
        }
      }
      if (!found) throw ParseError("adapter file: unknown target '" + s + "'");
    }
    auto m = attach_lora(std::move(base), opt);
    const auto& tensors = j.at("tensors");
    m.for_each_param([&](const std::string& name, Param& p) {
      if (!detail::is_adapter_name(name)) return;
      if (!tensors.contains(name)) throw ParseError("adapter file: missing tensor '" + name + "'");
      p.value = detail::tensor_from_json(tensors.at(name), p.value.rows(), p.value.cols(), name);
    });
    if (opt.train_head) {
      const auto& head = j.at("head");
      m.head.weight.value =
          detail::tensor_from_json(head.at("weight"), m.head.weight.value.rows(), m.head.weight.value.cols(), "head");
      m.head.bias.value =
          detail::tensor_from_json(head.at("bias"), m.head.bias.value.rows(), m.head.bias.value.cols(), "head");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("adapter file: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const TransformerClassifier& m) {
  detail::write_json_file(path, checkpoint_to_json(m));
}

inline TransformerClassifier load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(detail::read_json_file(path));
}

inline void save_adapters(const std::filesystem::path& path, const TransformerClassifier& m) {
  detail::write_json_file(path, adapters_to_json(m));
}

inline TransformerClassifier load_adapters(TransformerClassifier base, const std::filesystem::path& path) {
  return apply_adapters(std::move(base), detail::read_json_file(path));
}

}  // namespace hatelab::microformer
