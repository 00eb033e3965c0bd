#pragma once

#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ptsn/config.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/model/config.hpp"
#include "ptsn/prototype_tree.hpp"
#include "ptsn/synthetic/toy_world.hpp"
#include "ptsn/training/trainer.hpp"

namespace ptsn::cli {

struct KeySpec {
  const char* name;
  const char* fallback;
  const char* help;
};

/// Every run-config key with its default.
inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs{
      {"seed", "1", "root seed; every random stream derives from it"},
      {"precision", "64", "floating point width for model and training (32 or 64)"},
      {"checked", "false", "abort with exit code 4 when a NaN or Inf is produced"},
      {"work_dir", "run", "directory for vocab, tree, checkpoints, logs and manifests"},
      {"train_dir", "data/train", "training split (<id>.grd files plus captions.tsv)"},
      {"val_dir", "data/val", "validation split"},
      {"eval_dir", "", "split scored by eval (empty: val_dir)"},
      {"min_count", "5", "keep words occurring more than this many times"},
      {"concepts", "", "concept list file, one word per line (empty: every vocabulary word)"},
      {"embeddings", "embeddings.txt", "concept embedding file (text or PTSNEMB1 binary)"},
      {"max_miss_rate", "0", "largest tolerated fraction of concepts without an embedding"},
      {"level_sizes", "2000,800", "prototype counts per tree level, fine to coarse"},
      {"cluster_method", "kmeans", "kmeans or gmm"},
      {"cluster_n_init", "10", "k-means restarts per level"},
      {"cluster_max_iters", "100", "iteration cap per clustering run"},
      {"weighted_levels", "false", "weight coarse-level clustering by member counts"},
      {"d_model", "512", "width of grid features, PA blocks and decoder"},
      {"heads", "8", "attention heads"},
      {"d_ff", "2048", "feed-forward inner width"},
      {"decoder_layers", "3", "decoder depth"},
      {"max_len", "20", "longest generated caption, <eos> included"},
      {"schedule", "800-800-2000", "CMA block schedule, coarse to fine (counts or L<level>; none for no PA)"},
      {"prototype_mode", "trainable", "trainable or frozen prototypes"},
      {"dropout", "0.1", "dropout rate during cross-entropy training"},
      {"ln_eps", "1e-05", "layer-norm epsilon"},
      {"xe_epochs", "20", "cross-entropy epochs"},
      {"xe_batch", "50", "cross-entropy batch size (captions)"},
      {"xe_lr_encoder", "4e-05", "cross-entropy base rate, encoder group"},
      {"xe_lr_other", "0.0004", "cross-entropy base rate, other parameters"},
      {"xe_lr_schedule", "lambda", "lambda (epoch warmup and decay) or constant"},
      {"xe_refs", "all", "references used for cross-entropy: all or first"},
      {"xe_target_accuracy", "0", "end cross-entropy once validation sequence accuracy reaches this (0: off)"},
      {"rl_epochs", "30", "self-critical epochs"},
      {"rl_batch", "10", "self-critical batch size (images)"},
      {"rl_lr_encoder", "2e-06", "self-critical rate, encoder group"},
      {"rl_lr_other", "2e-05", "self-critical rate, other parameters"},
      {"rl_lr_schedule", "constant", "lambda or constant"},
      {"rl_samples", "5", "sampled captions per image (k)"},
      {"rl_temperature", "1", "sampling temperature"},
      {"patience", "5", "self-critical epochs without a new best validation CIDEr-D before stopping"},
      {"adam_beta1", "0.9", "Adam first-moment decay"},
      {"adam_beta2", "0.98", "Adam second-moment decay"},
      {"adam_eps", "1e-09", "Adam epsilon"},
      {"clip_norm", "0", "global gradient-norm clip (0: off)"},
      {"resume", "false", "continue the stage from its last checkpoint"},
      {"checkpoint", "", "model for eval/generate (empty: rl.ckpt, else xe.ckpt in work_dir)"},
      {"ensemble", "", "extra comma-separated checkpoints averaged with the main one"},
      {"beam", "3", "beam width for eval and generate (1: greedy)"},
      {"input", "", "generate: a .grd file or a split directory"},
      {"attention_dump", "false", "generate: emit head-averaged cross-attention per word"},
      {"level", "1", "inspect-tree: level to list (1 = finest)"},
      {"top_k", "5", "inspect-tree: concepts listed per prototype"},
      {"tree_format", "text", "inspect-tree: text, json or dot"},
      {"toy_n_super", "4", "synthetic: super-categories"},
      {"toy_n_sub", "3", "synthetic: concepts per super-category"},
      {"toy_dim", "64", "synthetic: grid feature width"},
      {"toy_emb_dim", "16", "synthetic: concept embedding width"},
      {"toy_grid", "4", "synthetic: grid side length"},
      {"toy_separation", "4", "synthetic: planted embedding separation"},
      {"toy_noise", "0.1", "synthetic: noise std per feature component"},
      {"toy_max_concepts", "3", "synthetic: most concepts per image"},
      {"toy_max_refs", "5", "synthetic: most references per image"},
      {"toy_train", "300", "synthetic: training images"},
      {"toy_val", "100", "synthetic: validation images"},
  };
  return specs;
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(config::KeyValues::parse_int<std::size_t>(key, tok));
  if (out.empty()) throw ConfigError("config key '" + key + "': expected a comma-separated list");
  return out;
}

/// Effective configuration: defaults, then a config file, then overrides.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& s : key_specs()) kv_.set(s.name, s.fallback);
  }

  static std::set<std::string> known_keys() {
    std::set<std::string> out;
    for (const auto& s : key_specs()) out.insert(s.name);
    return out;
  }

  /// Applies `key = value` text on top of the current values.
  void merge(const config::KeyValues& kv) {
    kv.require_known(known_keys());
    for (const auto& [k, v] : kv.values()) kv_.set(k, v);
  }

  void set(const std::string& key, const std::string& value) {
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
    kv_.set(key, value);
  }

  const config::KeyValues& values() const { return kv_; }
  std::string serialize() const { return kv_.serialize(); }

  std::string str(const std::string& k) const { return kv_.str(k); }
  std::size_t size(const std::string& k) const { return kv_.integer<std::size_t>(k, 0); }
  std::uint64_t u64(const std::string& k) const { return kv_.integer<std::uint64_t>(k, 0); }
  double real(const std::string& k) const { return kv_.real(k, 0.0); }
  bool flag(const std::string& k) const { return kv_.boolean(k, false); }

  int precision() const {
    const auto p = size("precision");
    if (p != 32 && p != 64) throw ConfigError("precision must be 32 or 64");
    return static_cast<int>(p);
  }

  tree::ClusterConfig cluster_config() const {
    tree::ClusterConfig c;
    c.method = tree::parse_method(str("cluster_method"));
    c.seed = derive_seed(u64("seed"), 1);
    c.n_init = static_cast<int>(size("cluster_n_init"));
    c.max_iters = static_cast<int>(size("cluster_max_iters"));
    c.weighted_levels = flag("weighted_levels");
    c.validate();
    return c;
  }

  std::vector<std::size_t> level_sizes() const { return parse_sizes("level_sizes", str("level_sizes")); }

  /// Model config for a vocabulary and tree; the schedule may name levels.
  model::ModelConfig model_config(std::size_t vocab_size, std::size_t emb_dim,
                                  const std::vector<std::size_t>& tree_levels) const {
    model::ModelConfig c;
    c.d_model = size("d_model");
    c.heads = size("heads");
    c.d_ff = size("d_ff");
    c.decoder_layers = size("decoder_layers");
    c.max_len = size("max_len");
    c.vocab_size = vocab_size;
    c.emb_dim = emb_dim;
    c.schedule = model::BlockSchedule::parse(str("schedule"), tree_levels);
    c.prototype_mode = model::parse_mode(str("prototype_mode"));
    c.dropout = real("dropout");
    c.ln_eps = real("ln_eps");
    c.validate();
    return c;
  }

  training::TrainConfig train_config() const {
    training::TrainConfig c;
    c.xe_epochs = size("xe_epochs");
    c.xe_batch = size("xe_batch");
    c.xe_lr = {real("xe_lr_encoder"), real("xe_lr_other"), training::parse_schedule_kind(str("xe_lr_schedule"))};
    const auto refs = str("xe_refs");
    if (refs != "all" && refs != "first") throw ConfigError("xe_refs must be all or first");
    c.xe_refs = refs == "all" ? training::XeRefs::all : training::XeRefs::first;
    c.xe_target_accuracy = real("xe_target_accuracy");
    c.rl_epochs = size("rl_epochs");
    c.rl_batch = size("rl_batch");
    c.rl_lr = {real("rl_lr_encoder"), real("rl_lr_other"), training::parse_schedule_kind(str("rl_lr_schedule"))};
    c.rl = {size("rl_samples"), real("rl_temperature")};
    c.patience = size("patience");
    c.adam = {real("adam_beta1"), real("adam_beta2"), real("adam_eps"), real("clip_norm")};
    c.seed = u64("seed");
    c.validate();
    return c;
  }

  synthetic::ToyWorldSpec toy_spec() const {
    synthetic::ToyWorldSpec s;
    s.n_super = size("toy_n_super");
    s.n_sub_per_super = size("toy_n_sub");
    s.dim = size("toy_dim");
    s.emb_dim = size("toy_emb_dim");
    s.grid_h = s.grid_w = size("toy_grid");
    s.separation = real("toy_separation");
    s.noise = real("toy_noise");
    s.max_concepts = size("toy_max_concepts");
    s.max_refs = size("toy_max_refs");
    s.seed = u64("seed");
    s.validate();
    return s;
  }

  /// Parses every typed key once so bad values fail before any work.
  void validate() const {
    precision();
    flag("checked");
    flag("resume");
    flag("attention_dump");
    size("min_count");
    real("max_miss_rate");
    level_sizes();
    cluster_config();
    train_config();
    toy_spec();
    size("beam");
    size("level");
    size("top_k");
    size("toy_train");
    size("toy_val");
    for (const char* k : {"d_model", "heads", "d_ff", "decoder_layers", "max_len"}) size(k);
    model::parse_mode(str("prototype_mode"));
    real("dropout");
    real("ln_eps");
    const auto fmt = str("tree_format");
    if (fmt != "text" && fmt != "json" && fmt != "dot") throw ConfigError("tree_format must be text, json or dot");
  }

 private:
  config::KeyValues kv_;
};

}  // namespace ptsn::cli
