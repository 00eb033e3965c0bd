#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "ptsn/numerics/ops.hpp"
#include "ptsn/numerics/rng.hpp"
#include "ptsn/numerics/tape.hpp"

namespace ptsn::model {

/// One forward computation: the tape, each parameter bound to it once, and
/// the dropout source (training mode when set).
template <class T>
struct Graph {
  Tape<T>& tape;
  Rng* dropout_rng = nullptr;
  T dropout = T(0);
  std::unordered_map<const Parameter<T>*, Var<T>> bound;

  explicit Graph(Tape<T>& t, Rng* rng = nullptr, T rate = T(0)) : tape(t), dropout_rng(rng), dropout(rate) {}

  Var<T> operator()(Parameter<T>& p) {
    auto it = bound.find(&p);
    if (it != bound.end()) return it->second;
    return bound.emplace(&p, tape.param(p)).first->second;
  }

  Var<T> drop(Var<T> x) { return dropout_rng != nullptr ? ops::dropout(x, dropout, *dropout_rng) : x; }
};

namespace init {

template <class T>
Parameter<T> glorot(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                    ParamGroup g = ParamGroup::other) {
  Tensor<T> v = Tensor<T>::matrix(fan_in, fan_out);
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : v.storage()) x = static_cast<T>(a * (2.0 * rng.uniform() - 1.0));
  return Parameter<T>(std::move(name), std::move(v), g);
}

template <class T>
Parameter<T> normal(std::string name, std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                    ParamGroup g = ParamGroup::other) {
  Tensor<T> v = Tensor<T>::matrix(rows, cols);
  for (auto& x : v.storage()) x = static_cast<T>(stddev * rng.normal());
  return Parameter<T>(std::move(name), std::move(v), g);
}

template <class T>
Parameter<T> filled(std::string name, std::size_t n, T value, ParamGroup g = ParamGroup::other) {
  return Parameter<T>(std::move(name), Tensor<T>(Shape{n}, value), g);
}

}  // namespace init

template <class T>
struct AttentionParams {
  Parameter<T> wq, wk, wv, wo, bo;

  AttentionParams() = default;
  AttentionParams(const std::string& p, std::size_t d, Rng& rng, ParamGroup g)
      : wq(init::glorot<T>(p + ".wq", d, d, rng, g)),
        wk(init::glorot<T>(p + ".wk", d, d, rng, g)),
        wv(init::glorot<T>(p + ".wv", d, d, rng, g)),
        wo(init::glorot<T>(p + ".wo", d, d, rng, g)),
        bo(init::filled<T>(p + ".bo", d, T(0), g)) {}

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&wq, &wk, &wv, &wo, &bo}); }
};

template <class T>
struct LayerNormParams {
  Parameter<T> gain, bias;

  LayerNormParams() = default;
  LayerNormParams(const std::string& p, std::size_t d, ParamGroup g)
      : gain(init::filled<T>(p + ".gain", d, T(1), g)), bias(init::filled<T>(p + ".bias", d, T(0), g)) {}

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&gain, &bias}); }
};

template <class T>
struct FeedForwardParams {
  Parameter<T> w1, b1, w2, b2;

  FeedForwardParams() = default;
  FeedForwardParams(const std::string& p, std::size_t d, std::size_t d_ff, Rng& rng, ParamGroup g)
      : w1(init::glorot<T>(p + ".w1", d, d_ff, rng, g)),
        b1(init::filled<T>(p + ".b1", d_ff, T(0), g)),
        w2(init::glorot<T>(p + ".w2", d_ff, d, rng, g)),
        b2(init::filled<T>(p + ".b2", d, T(0), g)) {}

  void collect(std::vector<Parameter<T>*>& out) { out.insert(out.end(), {&w1, &b1, &w2, &b2}); }
};

/// Attention sub-layer plus FFN sub-layer, each post-LN with a residual.
/// Used for CMA blocks (memory = prototypes) and encoder blocks
/// (memory = the input itself).
template <class T>
struct BlockParams {
  AttentionParams<T> attn;
  LayerNormParams<T> ln1;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln2;

  BlockParams() = default;
  BlockParams(const std::string& p, std::size_t d, std::size_t d_ff, Rng& rng, ParamGroup g)
      : attn(p + ".attn", d, rng, g), ln1(p + ".ln1", d, g), ffn(p + ".ffn", d, d_ff, rng, g), ln2(p + ".ln2", d, g) {}

  void collect(std::vector<Parameter<T>*>& out) {
    attn.collect(out);
    ln1.collect(out);
    ffn.collect(out);
    ln2.collect(out);
  }
};

template <class T>
struct DecoderLayerParams {
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln2;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> ln3;

  DecoderLayerParams() = default;
  DecoderLayerParams(const std::string& p, std::size_t d, std::size_t d_ff, Rng& rng)
      : self_attn(p + ".self", d, rng, ParamGroup::other),
        ln1(p + ".ln1", d, ParamGroup::other),
        cross_attn(p + ".cross", d, rng, ParamGroup::other),
        ln2(p + ".ln2", d, ParamGroup::other),
        ffn(p + ".ffn", d, d_ff, rng, ParamGroup::other),
        ln3(p + ".ln3", d, ParamGroup::other) {}

  void collect(std::vector<Parameter<T>*>& out) {
    self_attn.collect(out);
    ln1.collect(out);
    cross_attn.collect(out);
    ln2.collect(out);
    ffn.collect(out);
    ln3.collect(out);
  }
};

/// Where to copy attention weights during a forward pass (values only).
template <class T>
struct AttentionCapture {
  /// Head-averaged weights [queries, keys].
  Tensor<T> mean;
  /// Per-head weights.
  std::vector<Tensor<T>> heads;
};

/// Multi-head attention, queries from `q_in`, keys and values from `kv_in`:
/// concat_h softmax(q_h k_h^T / sqrt(d_h)) v_h, then the output projection.
template <class T>
Var<T> multi_head_attention(Graph<T>& g, AttentionParams<T>& p, Var<T> q_in, Var<T> kv_in, std::size_t heads,
                            bool causal, AttentionCapture<T>* capture = nullptr) {
  const std::size_t d = q_in.cols();
  if (kv_in.cols() != d) throw ShapeError("attention: query width " + std::to_string(d) + " vs key width " +
                                          std::to_string(kv_in.cols()));
  if (causal && q_in.rows() != kv_in.rows()) throw ShapeError("attention: causal mask needs square scores");
  const std::size_t dh = d / heads;
  auto q = ops::matmul(q_in, g(p.wq));
  auto k = ops::matmul(kv_in, g(p.wk));
  auto v = ops::matmul(kv_in, g(p.wv));
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Var<T>> outs;
  if (capture) {
    capture->mean = Tensor<T>::matrix(q_in.rows(), kv_in.rows());
    capture->heads.clear();
  }
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = heads == 1 ? q : ops::slice_cols(q, h * dh, dh);
    auto kh = heads == 1 ? k : ops::slice_cols(k, h * dh, dh);
    auto vh = heads == 1 ? v : ops::slice_cols(v, h * dh, dh);
    auto a = ops::softmax(ops::scale(ops::matmul_bt(qh, kh), scale),
                          causal ? ops::SoftmaxMask::causal : ops::SoftmaxMask::none);
    if (capture) {
      const auto& av = a.value();
      for (std::size_t i = 0; i < av.size(); ++i) capture->mean[i] += av[i] / static_cast<T>(heads);
      capture->heads.push_back(av);
    }
    outs.push_back(ops::matmul(a, vh));
  }
  auto cat = heads == 1 ? outs.front() : ops::concat_cols(outs);
  return ops::add_bias(ops::matmul(cat, g(p.wo)), g(p.bo));
}

template <class T>
Var<T> layer_norm(Graph<T>& g, LayerNormParams<T>& p, Var<T> x, T eps) {
  return ops::layer_norm(x, g(p.gain), g(p.bias), eps);
}

template <class T>
Var<T> feed_forward(Graph<T>& g, FeedForwardParams<T>& p, Var<T> x) {
  return ops::feed_forward(x, g(p.w1), g(p.b1), g(p.w2), g(p.b2));
}

/// x' = LN(x + MHA(x, memory)); out = LN(x' + FFN(x')).
template <class T>
Var<T> block_forward(Graph<T>& g, BlockParams<T>& p, Var<T> x, Var<T> memory, std::size_t heads, T eps,
                     AttentionCapture<T>* capture = nullptr) {
  auto a = multi_head_attention(g, p.attn, x, memory, heads, false, capture);
  auto h = layer_norm(g, p.ln1, ops::add(x, g.drop(a)), eps);
  return layer_norm(g, p.ln2, ops::add(h, g.drop(feed_forward(g, p.ffn, h))), eps);
}

template <class T>
Var<T> decoder_layer_forward(Graph<T>& g, DecoderLayerParams<T>& p, Var<T> x, Var<T> memory, std::size_t heads,
                             T eps, AttentionCapture<T>* cross_capture = nullptr) {
  auto s = multi_head_attention(g, p.self_attn, x, x, heads, true);
  x = layer_norm(g, p.ln1, ops::add(x, g.drop(s)), eps);
  auto c = multi_head_attention(g, p.cross_attn, x, memory, heads, false, cross_capture);
  x = layer_norm(g, p.ln2, ops::add(x, g.drop(c)), eps);
  return layer_norm(g, p.ln3, ops::add(x, g.drop(feed_forward(g, p.ffn, x))), eps);
}

}  // namespace ptsn::model
