#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ptsn/config.hpp"
#include "ptsn/errors.hpp"

namespace ptsn::model {

/// Prototype count used by each CMA block, in application order
/// ("800-800-2000" = two blocks on the 800-prototype level, then one on the
/// 2000-prototype level). Counts must be non-decreasing (coarse to fine).
struct BlockSchedule {
  std::vector<std::size_t> counts;

  bool empty() const { return counts.empty(); }
  std::size_t size() const { return counts.size(); }

  void validate() const {
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] == 0) throw ConfigError("block schedule: prototype counts must be >= 1");
      if (i > 0 && counts[i] < counts[i - 1])
        throw ConfigError("block schedule " + to_string() + " is not coarse-to-fine (counts must be non-decreasing)");
    }
  }

  /// Distinct counts in first-use order.
  std::vector<std::size_t> distinct() const {
    std::vector<std::size_t> out;
    for (auto c : counts)
      if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
    return out;
  }

  std::string to_string() const {
    if (counts.empty()) return "none";
    std::string s;
    for (std::size_t i = 0; i < counts.size(); ++i) s += (i ? "-" : "") + std::to_string(counts[i]);
    return s;
  }

  /// Parses "800-800-2000", "L2-L1" (1-based tree levels, resolved through
  /// `level_sizes`), or "none"/"" for no PA blocks.
  static BlockSchedule parse(const std::string& text, const std::vector<std::size_t>& level_sizes = {}) {
    BlockSchedule s;
    if (text.empty() || text == "none") return s;
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find('-', start);
      if (end == std::string::npos) end = text.size();
      const std::string tok = text.substr(start, end - start);
      if (tok.empty()) throw ConfigError("block schedule '" + text + "': empty entry");
      if (tok[0] == 'L' || tok[0] == 'l') {
        const auto level = config::KeyValues::parse_int<std::size_t>("schedule", tok.substr(1));
        if (level < 1 || level > level_sizes.size())
          throw ConfigError("block schedule '" + text + "': level " + tok + " does not exist in the tree");
        s.counts.push_back(level_sizes[level - 1]);
      } else {
        s.counts.push_back(config::KeyValues::parse_int<std::size_t>("schedule", tok));
      }
      start = end + 1;
    }
    s.validate();
    return s;
  }

  friend bool operator==(const BlockSchedule&, const BlockSchedule&) = default;
};

enum class PrototypeMode { trainable, frozen };

inline std::string mode_name(PrototypeMode m) { return m == PrototypeMode::trainable ? "trainable" : "frozen"; }

inline PrototypeMode parse_mode(const std::string& s) {
  if (s == "trainable") return PrototypeMode::trainable;
  if (s == "frozen") return PrototypeMode::frozen;
  throw ConfigError("prototype_mode must be trainable or frozen, got '" + s + "'");
}

/// Patch encoder standing in for the visual backbone.
struct EncoderConfig {
  bool enabled = false;
  std::size_t image_h = 16;
  std::size_t image_w = 16;
  std::size_t patch = 8;
  std::size_t blocks = 1;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t cells() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * 3; }

  void validate() const {
    if (!enabled) return;
    if (patch == 0 || image_h == 0 || image_w == 0) throw ConfigError("encoder: sizes must be >= 1");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("encoder: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " not divisible by patch " + std::to_string(patch));
  }
};

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ff = 2048;
  std::size_t decoder_layers = 3;
  /// Longest generated sequence, counting <eos>.
  std::size_t max_len = 20;
  std::size_t vocab_size = 0;
  /// Width of the concept embeddings the prototypes live in.
  std::size_t emb_dim = 0;
  BlockSchedule schedule;
  PrototypeMode prototype_mode = PrototypeMode::trainable;
  double dropout = 0.1;
  double ln_eps = 1e-5;
  EncoderConfig encoder;

  void validate() const {
    if (d_model < 2 || heads < 1 || d_ff < 1 || decoder_layers < 1 || max_len < 1)
      throw ConfigError("model: sizes must be >= 1 (d_model >= 2)");
    if (d_model % heads != 0)
      throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
    if (vocab_size < 4) throw ConfigError("model: vocab_size must include the specials and at least one word");
    if (!schedule.empty() && emb_dim < 1) throw ConfigError("model: emb_dim must be >= 1 when PA blocks are used");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must be in [0, 1)");
    if (!(ln_eps >= 0.0)) throw ConfigError("model: ln_eps must be >= 0");
    schedule.validate();
    encoder.validate();
  }

  config::KeyValues to_kv() const {
    config::KeyValues kv;
    kv.set("d_model", std::to_string(d_model));
    kv.set("heads", std::to_string(heads));
    kv.set("d_ff", std::to_string(d_ff));
    kv.set("decoder_layers", std::to_string(decoder_layers));
    kv.set("max_len", std::to_string(max_len));
    kv.set("vocab_size", std::to_string(vocab_size));
    kv.set("emb_dim", std::to_string(emb_dim));
    kv.set("schedule", schedule.to_string());
    kv.set("prototype_mode", mode_name(prototype_mode));
    kv.set("dropout", config::KeyValues::format_real(dropout));
    kv.set("ln_eps", config::KeyValues::format_real(ln_eps));
    kv.set("encoder", encoder.enabled ? "toy" : "none");
    kv.set("image_h", std::to_string(encoder.image_h));
    kv.set("image_w", std::to_string(encoder.image_w));
    kv.set("patch", std::to_string(encoder.patch));
    kv.set("encoder_blocks", std::to_string(encoder.blocks));
    return kv;
  }

  static ModelConfig from_kv(const config::KeyValues& kv) {
    ModelConfig c;
    c.d_model = kv.integer<std::size_t>("d_model", c.d_model);
    c.heads = kv.integer<std::size_t>("heads", c.heads);
    c.d_ff = kv.integer<std::size_t>("d_ff", c.d_ff);
    c.decoder_layers = kv.integer<std::size_t>("decoder_layers", c.decoder_layers);
    c.max_len = kv.integer<std::size_t>("max_len", c.max_len);
    c.vocab_size = kv.integer<std::size_t>("vocab_size", c.vocab_size);
    c.emb_dim = kv.integer<std::size_t>("emb_dim", c.emb_dim);
    c.schedule = BlockSchedule::parse(kv.str("schedule", "none"));
    c.prototype_mode = parse_mode(kv.str("prototype_mode", "trainable"));
    c.dropout = kv.real("dropout", c.dropout);
    c.ln_eps = kv.real("ln_eps", c.ln_eps);
    const auto enc = kv.str("encoder", "none");
    if (enc != "none" && enc != "toy") throw ConfigError("encoder must be none or toy, got '" + enc + "'");
    c.encoder.enabled = enc == "toy";
    c.encoder.image_h = kv.integer<std::size_t>("image_h", c.encoder.image_h);
    c.encoder.image_w = kv.integer<std::size_t>("image_w", c.encoder.image_w);
    c.encoder.patch = kv.integer<std::size_t>("patch", c.encoder.patch);
    c.encoder.blocks = kv.integer<std::size_t>("encoder_blocks", c.encoder.blocks);
    return c;
  }

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.to_kv().serialize() == b.to_kv().serialize();
  }
};

}  // namespace ptsn::model
