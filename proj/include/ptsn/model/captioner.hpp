#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/model/config.hpp"
#include "ptsn/model/grid.hpp"
#include "ptsn/model/layers.hpp"

namespace ptsn::model {

/// Image (H x W x 3, channel last) to one row per P x P patch, patches in
/// row-major grid order, each flattened as (row, col, channel).
template <class T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 || image.shape()[2] != 3) throw ShapeError("patchify: expected an H x W x 3 image, got " + shape_str(image.shape()));
  const std::size_t h = image.shape()[0], w = image.shape()[1];
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " + std::to_string(patch));
  const std::size_t gw = w / patch;
  Tensor<T> out = Tensor<T>::matrix((h / patch) * gw, patch * patch * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out((y / patch) * gw + x / patch, ((y % patch) * patch + x % patch) * 3 + c) = image[(y * w + x) * 3 + c];
  return out;
}

/// Prototype-conditioned captioner: optional patch encoder, progressive
/// aggregation over tree prototypes, transformer decoder.
///
/// Parameters live inside the object and are addressed by pointer during a
/// forward pass, so a Captioner must not move while a Graph uses it.
template <class T>
class Captioner {
 public:
  /// `prototypes` maps each prototype count in the schedule to its
  /// [count, emb_dim] centroid matrix.
  Captioner(const ModelConfig& cfg, const std::map<std::size_t, Tensor<double>>& prototypes, std::uint64_t seed)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;
    if (cfg_.encoder.enabled) {
      const auto g = ParamGroup::encoder;
      patch_w_ = init::glorot<T>("enc.patch.w", cfg_.encoder.patch_dim(), d, rng, g);
      patch_b_ = init::filled<T>("enc.patch.b", d, T(0), g);
      enc_pos_ = init::normal<T>("enc.pos", cfg_.encoder.cells(), d, 1.0 / std::sqrt(static_cast<double>(d)), rng, g);
      for (std::size_t i = 0; i < cfg_.encoder.blocks; ++i)
        enc_blocks_.emplace_back("enc.block" + std::to_string(i), d, cfg_.d_ff, rng, g);
    }

    double sq = 0.0;
    std::size_t n = 0;
    for (auto count : cfg_.schedule.distinct()) {
      auto it = prototypes.find(count);
      if (it == prototypes.end())
        throw ConfigError("schedule uses " + std::to_string(count) + " prototypes but no tree level has that size");
      const auto& z = it->second;
      if (z.rank() != 2 || z.rows() != count || z.cols() != cfg_.emb_dim)
        throw ShapeError("prototype level " + std::to_string(count) + " has shape " + shape_str(z.shape()) +
                         ", expected [" + std::to_string(count) + ", " + std::to_string(cfg_.emb_dim) + "]");
      Parameter<T> p("proto." + std::to_string(count), z.template cast<T>());
      p.frozen = cfg_.prototype_mode == PrototypeMode::frozen;
      protos_.push_back(std::move(p));
      for (double v : z.storage()) sq += v * v;
      n += z.size();
    }
    if (!cfg_.schedule.empty()) {
      // Scale the projection so projected prototypes start near unit scale
      // whatever the embedding source's magnitude.
      const double rms = n > 0 && sq > 0 ? std::sqrt(sq / static_cast<double>(n)) : 1.0;
      proto_w_ = init::glorot<T>("proto.proj.w", cfg_.emb_dim, d, rng);
      for (auto& v : proto_w_.value.storage()) v = static_cast<T>(v / rms);
      proto_b_ = init::filled<T>("proto.proj.b", d, T(0));
    }
    for (std::size_t i = 0; i < cfg_.schedule.size(); ++i)
      cma_.emplace_back("cma" + std::to_string(i), d, cfg_.d_ff, rng, ParamGroup::other);

    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    tok_emb_ = init::normal<T>("dec.tok", cfg_.vocab_size, d, emb_std, rng);
    pos_emb_ = init::normal<T>("dec.pos", cfg_.max_len, d, emb_std, rng);
    for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) dec_.emplace_back("dec.layer" + std::to_string(i), d, cfg_.d_ff, rng);
    out_w_ = init::glorot<T>("dec.out.w", d, cfg_.vocab_size, rng);
    out_b_ = init::filled<T>("dec.out.b", cfg_.vocab_size, T(0));

    excluded_.assign(cfg_.vocab_size, false);
    excluded_[lexicon::Vocabulary::pad_id] = true;
    excluded_[lexicon::Vocabulary::bos_id] = true;
  }

  Captioner(const Captioner&) = default;
  Captioner& operator=(const Captioner&) = default;

  const ModelConfig& config() const { return cfg_; }

  /// Classes that never receive probability: <pad> and <bos>.
  const std::vector<bool>& excluded() const { return excluded_; }

  /// Every parameter in a fixed order.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    if (cfg_.encoder.enabled) {
      out.insert(out.end(), {&patch_w_, &patch_b_, &enc_pos_});
      for (auto& b : enc_blocks_) b.collect(out);
    }
    for (auto& p : protos_) out.push_back(&p);
    if (!cfg_.schedule.empty()) out.insert(out.end(), {&proto_w_, &proto_b_});
    for (auto& b : cma_) b.collect(out);
    out.insert(out.end(), {&tok_emb_, &pos_emb_});
    for (auto& l : dec_) l.collect(out);
    out.insert(out.end(), {&out_w_, &out_b_});
    return out;
  }

  Parameter<T>& parameter(const std::string& name) {
    for (auto* p : parameters())
      if (p->name == name) return *p;
    throw ConfigError("no parameter named '" + name + "'");
  }

  Parameter<T>& prototypes(std::size_t count) { return parameter("proto." + std::to_string(count)); }

  /// Toy patch encoder: patch embedding + position embedding, then
  /// self-attention blocks. Returns [cells, D].
  Var<T> encode(Graph<T>& g, const Tensor<T>& image) {
    if (!cfg_.encoder.enabled) throw ConfigError("encode: model has no image encoder");
    const auto& e = cfg_.encoder;
    if (image.rank() != 3 || image.shape()[0] != e.image_h || image.shape()[1] != e.image_w || image.shape()[2] != 3)
      throw ShapeError("encode: expected image [" + std::to_string(e.image_h) + ", " + std::to_string(e.image_w) +
                       ", 3], got " + shape_str(image.shape()));
    auto patches = g.tape.constant(patchify(image, e.patch));
    auto x = ops::add(ops::add_bias(ops::matmul(patches, g(patch_w_)), g(patch_b_)), g(enc_pos_));
    for (auto& b : enc_blocks_) x = block_forward(g, b, x, x, cfg_.heads, static_cast<T>(cfg_.ln_eps));
    return x;
  }

  /// External grid features as a constant (no gradient into the source).
  Var<T> features(Graph<T>& g, const GridFeatures<T>& f) {
    f.validate();
    if (f.dim() != cfg_.d_model)
      throw ShapeError("grid features have width " + std::to_string(f.dim()) + ", model expects " +
                       std::to_string(cfg_.d_model));
    return g.tape.constant(f.g);
  }

  /// Prototypes of the level with `count` centroids, mapped to width D.
  Var<T> projected_prototypes(Graph<T>& g, std::size_t count) {
    return ops::add_bias(ops::matmul(g(prototypes(count)), g(proto_w_)), g(proto_b_));
  }

  /// One CMA block: grid features query the prototypes of `count`.
  Var<T> cma_block(Graph<T>& g, std::size_t block, Var<T> grid, AttentionCapture<T>* capture = nullptr) {
    auto z = projected_prototypes(g, cfg_.schedule.counts.at(block));
    return block_forward(g, cma_.at(block), grid, z, cfg_.heads, static_cast<T>(cfg_.ln_eps), capture);
  }

  /// G_1 = G, G_{i+1} = CMA_i(G_i, Z_schedule[i]); the empty schedule
  /// returns G unchanged.
  Var<T> aggregate(Graph<T>& g, Var<T> grid, std::vector<AttentionCapture<T>>* captures = nullptr) {
    if (captures) captures->assign(cfg_.schedule.size(), {});
    for (std::size_t i = 0; i < cfg_.schedule.size(); ++i)
      grid = cma_block(g, i, grid, captures ? &(*captures)[i] : nullptr);
    return grid;
  }

  /// Logits [len, V] for decoder inputs (starting with <bos>) attending to
  /// `memory`. Row t depends only on inputs[0..t] and memory.
  /// `cross` receives the cross-attention of decoder layer `cross_layer`
  /// (1-based; 0 = last).
  Var<T> decode_logits(Graph<T>& g, Var<T> memory, const std::vector<int>& inputs,
                       AttentionCapture<T>* cross = nullptr, std::size_t cross_layer = 0) {
    if (inputs.empty()) throw ShapeError("decode: empty input sequence");
    if (inputs.size() > cfg_.max_len)
      throw ShapeError("decode: input length " + std::to_string(inputs.size()) + " exceeds max_len " +
                       std::to_string(cfg_.max_len));
    if (memory.cols() != cfg_.d_model) throw ShapeError("decode: memory width does not match d_model");
    for (int id : inputs)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw ShapeError("decode: token id " + std::to_string(id) + " outside the vocabulary");
    auto x = ops::add(ops::gather_rows(g(tok_emb_), inputs), ops::slice_rows(g(pos_emb_), 0, inputs.size()));
    if (cross_layer > dec_.size())
      throw ShapeError("decode: cross-attention layer " + std::to_string(cross_layer) + " outside [1, " +
                       std::to_string(dec_.size()) + "]");
    const std::size_t captured = cross_layer == 0 ? dec_.size() : cross_layer;
    for (std::size_t l = 0; l < dec_.size(); ++l)
      x = decoder_layer_forward(g, dec_[l], x, memory, cfg_.heads, static_cast<T>(cfg_.ln_eps),
                                l + 1 == captured ? cross : nullptr);
    return ops::add_bias(ops::matmul(x, g(out_w_)), g(out_b_));
  }

  /// Aggregated grid features (values only) for external features.
  Tensor<T> memory(const GridFeatures<T>& f) {
    Tape<T> tape;
    Graph<T> g(tape);
    return aggregate(g, features(g, f)).value();
  }

  /// Aggregated grid features (values only) for a raw image.
  Tensor<T> memory_from_image(const Tensor<T>& image) {
    Tape<T> tape;
    Graph<T> g(tape);
    return aggregate(g, encode(g, image)).value();
  }

  /// Next-token logits after <bos> + prefix.
  std::vector<T> decode_step(const std::vector<int>& prefix, const Tensor<T>& memory) {
    if (prefix.size() >= cfg_.max_len)
      throw ShapeError("decode_step: prefix length " + std::to_string(prefix.size()) + " must be < max_len " +
                       std::to_string(cfg_.max_len));
    std::vector<int> inputs{lexicon::Vocabulary::bos_id};
    inputs.insert(inputs.end(), prefix.begin(), prefix.end());
    Tape<T> tape;
    Graph<T> g(tape);
    const auto& logits = decode_logits(g, g.tape.constant(memory), inputs).value();
    const auto last = logits.row(logits.rows() - 1);
    return std::vector<T>(last.begin(), last.end());
  }

  /// Head-averaged cross-attention of decoder layer `layer` (1-based; 0 =
  /// last) for each generated token of `ids` (row t = attention while
  /// predicting ids[t]).
  Tensor<T> cross_attention(const std::vector<int>& ids, const Tensor<T>& memory, std::size_t layer = 0) {
    if (ids.empty()) throw ShapeError("cross_attention: empty caption");
    std::vector<int> inputs{lexicon::Vocabulary::bos_id};
    inputs.insert(inputs.end(), ids.begin(), ids.end() - 1);
    Tape<T> tape;
    Graph<T> g(tape);
    AttentionCapture<T> cap;
    decode_logits(g, g.tape.constant(memory), inputs, &cap, layer);
    return cap.mean;
  }

 private:
  ModelConfig cfg_;
  Parameter<T> patch_w_, patch_b_, enc_pos_;
  std::vector<BlockParams<T>> enc_blocks_;
  std::vector<Parameter<T>> protos_;
  Parameter<T> proto_w_, proto_b_;
  std::vector<BlockParams<T>> cma_;
  Parameter<T> tok_emb_, pos_emb_;
  std::vector<DecoderLayerParams<T>> dec_;
  Parameter<T> out_w_, out_b_;
  std::vector<bool> excluded_;
};

}  // namespace ptsn::model
