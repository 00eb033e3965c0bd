#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "manifest.hpp"
#include "ptsn/cli/run_config.hpp"
#include "ptsn/dataset.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/metrics.hpp"
#include "ptsn/model/checkpoint.hpp"
#include "ptsn/model/decode.hpp"
#include "ptsn/prototype_tree.hpp"
#include "ptsn/synthetic/toy_world.hpp"
#include "ptsn/training/trainer.hpp"

namespace ptsn::cli {

namespace fs = std::filesystem;

/// Artifacts inside work_dir and the command that produces each.
struct Paths {
  fs::path work;
  fs::path vocab() const { return work / "vocab.tsv"; }
  fs::path tree() const { return work / "tree.json"; }
  fs::path tree_concepts() const { return work / "tree_concepts.txt"; }
  fs::path ckpt(training::Stage s) const { return work / (std::string(training::stage_name(s)) + ".ckpt"); }
  fs::path last(training::Stage s) const { return work / (std::string(training::stage_name(s)) + "_last.ckpt"); }
  fs::path log(training::Stage s) const { return work / (std::string(training::stage_name(s)) + "_log.jsonl"); }
  fs::path eval() const { return work / "eval.jsonl"; }
  fs::path generated() const { return work / "generate.jsonl"; }
  fs::path manifest(const std::string& cmd) const { return work / (cmd + ".manifest.json"); }
};

inline void require_file(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw DataError("missing " + p.string() + "; run `ptsn " + producer + "` first");
}

class Commands {
 public:
  explicit Commands(RunConfig cfg) : cfg_(std::move(cfg)), paths_{cfg_.str("work_dir")} {
    cfg_.validate();
    set_checked_mode(cfg_.flag("checked"));
  }

  int run(const std::string& cmd) {
    fs::create_directories(paths_.work);
    Manifest man(cmd, cfg_.serialize(), cfg_.u64("seed"));
    if (cmd == "build-vocab") build_vocab(man);
    else if (cmd == "build-tree") build_tree(man);
    else if (cmd == "train-xe") dispatch([&]<class T>() { train<T>(training::Stage::xe, man); });
    else if (cmd == "train-rl") dispatch([&]<class T>() { train<T>(training::Stage::rl, man); });
    else if (cmd == "eval") dispatch([&]<class T>() { eval<T>(man); });
    else if (cmd == "generate") dispatch([&]<class T>() { generate<T>(man); });
    else if (cmd == "inspect-tree") inspect_tree(man);
    else if (cmd == "gen-synthetic") gen_synthetic(man);
    else throw ConfigError("unknown command '" + cmd + "'");
    man.save(paths_.manifest(cmd));
    return 0;
  }

 private:
  template <class F>
  void dispatch(F&& f) {
    if (cfg_.precision() == 64) f.template operator()<double>();
    else f.template operator()<float>();
  }

  lexicon::Vocabulary load_vocab(Manifest& man) const {
    require_file(paths_.vocab(), "build-vocab");
    man.input(paths_.vocab());
    return lexicon::Vocabulary::parse(io::read_text_file(paths_.vocab().string()));
  }

  void build_vocab(Manifest& man) {
    const fs::path dir = cfg_.str("train_dir");
    std::vector<std::string> captions;
    for (const auto& [id, refs] : read_caption_refs(dir)) captions.insert(captions.end(), refs.begin(), refs.end());
    man.input(dir / kCaptionsFile);
    const auto v = lexicon::build_vocab(captions, cfg_.u64("min_count"));
    io::write_text_file(paths_.vocab().string(), v.serialize());
    man.output(paths_.vocab());
    std::cout << "vocabulary: " << v.size() << " tokens (" << lexicon::Vocabulary::num_specials << " special)\n";
  }

  void build_tree(Manifest& man) {
    lexicon::ConceptList concepts;
    if (const auto path = cfg_.str("concepts"); !path.empty()) {
      concepts = lexicon::ConceptList::parse(io::read_text_file(path));
      man.input(path);
    } else {
      concepts = lexicon::ConceptList::all_words(load_vocab(man));
    }
    const auto emb_path = cfg_.str("embeddings");
    auto load = lexicon::load_embeddings(emb_path, concepts, cfg_.real("max_miss_rate"));
    man.input(emb_path);
    for (const auto& m : load.missing) std::cerr << "warning: no embedding for concept '" << m << "'\n";
    const auto t = tree::build_tree(load.matrix.values, cfg_.level_sizes(), cfg_.cluster_config());
    io::write_text_file(paths_.tree().string(), tree::to_json(t).dump() + "\n");
    io::write_text_file(paths_.tree_concepts().string(), load.concepts.serialize());
    man.output(paths_.tree());
    man.output(paths_.tree_concepts());
    std::cout << "tree levels:";
    for (const auto& lv : t.levels) std::cout << ' ' << lv.size();
    std::cout << " over " << t.num_concepts() << " concepts\n";
  }

  tree::PrototypeTree load_tree(Manifest& man) const {
    require_file(paths_.tree(), "build-tree");
    man.input(paths_.tree());
    try {
      return tree::tree_from_json(nlohmann::json::parse(io::read_text_file(paths_.tree().string())));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(paths_.tree().string() + ": " + e.what());
    }
  }

  template <class T>
  std::vector<training::Example<T>> load_split(const std::string& key, const lexicon::Vocabulary& vocab, std::size_t dim,
                                               Manifest& man) const {
    const fs::path dir = cfg_.str(key);
    if (!fs::exists(dir / kCaptionsFile)) throw DataError("missing split " + dir.string() + "; run `ptsn gen-synthetic` or point " + key + " at a split directory");
    man.input(dir);
    return training::make_examples(read_caption_split<T>(dir, dim), vocab);
  }

  template <class T>
  model::Captioner<T> fresh_model(const lexicon::Vocabulary& vocab, Manifest& man) {
    const auto sched = cfg_.str("schedule");
    if (sched == "none" || sched.empty()) {
      auto mc = cfg_.model_config(vocab.size(), 1, {});
      return model::Captioner<T>(mc, {}, derive_seed(cfg_.u64("seed"), 3));
    }
    const auto t = load_tree(man);
    std::vector<std::size_t> sizes;
    std::map<std::size_t, Tensor<double>> protos;
    for (const auto& lv : t.levels) {
      sizes.push_back(lv.size());
      protos.emplace(lv.size(), lv.centroids);
    }
    auto mc = cfg_.model_config(vocab.size(), t.levels.front().centroids.cols(), sizes);
    return model::Captioner<T>(mc, protos, derive_seed(cfg_.u64("seed"), 3));
  }

  template <class T>
  static model::Captioner<T> load_model(const fs::path& p) {
    auto c = model::Checkpoint::load(p.string());
    if (c.bits != sizeof(T) * 8)
      throw ConfigError(p.string() + " stores " + std::to_string(c.bits) + "-bit parameters; set precision = " +
                        std::to_string(c.bits));
    return model::captioner_from_checkpoint<T>(c);
  }

  template <class T>
  void train(training::Stage stage, Manifest& man) {
    using training::Stage;
    const auto vocab = load_vocab(man);
    std::optional<model::Captioner<T>> m;
    if (stage == Stage::xe) {
      m.emplace(fresh_model<T>(vocab, man));
    } else {
      require_file(paths_.ckpt(Stage::xe), "train-xe");
      man.input(paths_.ckpt(Stage::xe));
      m.emplace(load_model<T>(paths_.ckpt(Stage::xe)));
    }
    if (m->config().vocab_size != vocab.size()) throw DataError("model vocabulary size differs from vocab.tsv");
    const auto dim = m->config().d_model;
    const auto train_set = load_split<T>("train_dir", vocab, dim, man);
    const auto val_set = load_split<T>("val_dir", vocab, dim, man);
    training::Trainer<T> trainer(*m, cfg_.train_config(), train_set, val_set, stage);
    bool append = false;
    if (cfg_.flag("resume")) {
      require_file(paths_.last(stage), std::string("train-") + training::stage_name(stage));
      trainer.resume(model::Checkpoint::load(paths_.last(stage).string()));
      append = true;
    }
    std::ofstream log(paths_.log(stage), append ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write " + paths_.log(stage).string());
    double best = trainer.stopper().best;
    trainer.run([&](const training::EpochRecord& r) {
      log << r.to_json().dump() << '\n' << std::flush;
      std::cout << training::stage_name(stage) << " epoch " << r.epoch << ": "
                << (stage == Stage::xe ? "loss " : "reward ") << r.value << ", val CIDEr-D " << r.val_cider
                << ", val accuracy " << r.val_accuracy << '\n';
      trainer.checkpoint().save(paths_.last(stage).string());
      if (trainer.stopper().best > best) {
        best = trainer.stopper().best;
        trainer.best()->save(paths_.ckpt(stage).string());
      }
    });
    if (!fs::exists(paths_.ckpt(stage))) trainer.checkpoint().save(paths_.ckpt(stage).string());
    man.output(paths_.ckpt(stage));
    man.output(paths_.last(stage));
  }

  fs::path default_checkpoint() const {
    if (const auto c = cfg_.str("checkpoint"); !c.empty()) return c;
    if (fs::exists(paths_.ckpt(training::Stage::rl))) return paths_.ckpt(training::Stage::rl);
    require_file(paths_.ckpt(training::Stage::xe), "train-xe");
    return paths_.ckpt(training::Stage::xe);
  }

  template <class T>
  std::vector<model::Captioner<T>> load_models(Manifest& man) const {
    std::vector<fs::path> paths{default_checkpoint()};
    for (const auto& p : parse_list(cfg_.str("ensemble"))) paths.emplace_back(p);
    std::vector<model::Captioner<T>> out;
    for (const auto& p : paths) {
      if (!fs::exists(p)) throw DataError("missing checkpoint " + p.string() + "; run `ptsn train-xe` first");
      man.input(p);
      out.push_back(load_model<T>(p));
    }
    return out;
  }

  static std::vector<std::string> parse_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(tok);
    return out;
  }

  /// Decodes one input with every model (ensemble when more than one).
  template <class T>
  model::Decoded decode(std::vector<model::Captioner<T>>& models, const model::GridFeatures<T>& f,
                        std::vector<Tensor<T>>& memories) const {
    const auto beam = cfg_.size("beam");
    memories.clear();
    for (auto& m : models) memories.push_back(m.memory(f));
    if (models.size() == 1)
      return beam <= 1 ? model::greedy_decode(models[0], memories[0]) : model::beam_decode(models[0], memories[0], beam);
    std::vector<model::Captioner<T>*> ptrs;
    std::vector<const Tensor<T>*> mems;
    for (std::size_t i = 0; i < models.size(); ++i) {
      ptrs.push_back(&models[i]);
      mems.push_back(&memories[i]);
    }
    return model::ensemble_decode(ptrs, mems, beam <= 1 ? model::Strategy::greedy : model::Strategy::beam, beam);
  }

  template <class T>
  void eval(Manifest& man) {
    const auto vocab = load_vocab(man);
    auto models = load_models<T>(man);
    const fs::path dir = cfg_.str("eval_dir").empty() ? cfg_.str("val_dir") : cfg_.str("eval_dir");
    man.input(dir);
    const auto samples = read_caption_split<T>(dir, models.front().config().d_model);
    std::vector<metrics::Tokens> cands;
    metrics::RefCorpus refs;
    std::vector<std::string> ids;
    std::vector<Tensor<T>> mems;
    for (const auto& s : samples) {
      const auto d = decode(models, s.features, mems);
      cands.push_back(lexicon::words(lexicon::detokenize(d.ids, vocab)));
      std::vector<metrics::Tokens> r;
      for (const auto& ref : s.refs) r.push_back(lexicon::words(ref));
      refs.push_back(std::move(r));
      ids.push_back(s.id);
    }
    const auto rep = metrics::evaluate(cands, refs, ids);
    io::write_text_file(paths_.eval().string(), rep.to_jsonl());
    man.output(paths_.eval());
    std::cout << "CIDEr-D " << rep.cider_d;
    for (std::size_t n = 0; n < rep.bleu.size(); ++n) std::cout << "  BLEU-" << n + 1 << ' ' << rep.bleu[n];
    std::cout << '\n';
  }

  template <class T>
  void generate(Manifest& man) {
    const auto vocab = load_vocab(man);
    auto models = load_models<T>(man);
    const fs::path in = cfg_.str("input");
    if (in.empty()) throw ConfigError("generate needs input = <file.grd or split directory>");
    const auto dim = models.front().config().d_model;
    std::vector<std::pair<std::string, model::GridFeatures<T>>> items;
    if (fs::is_directory(in)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".grd") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) items.emplace_back(f.stem().string(), model::load_grid_features<T>(f.string(), dim));
    } else {
      items.emplace_back(in.stem().string(), model::load_grid_features<T>(in.string(), dim));
    }
    if (items.empty()) throw DataError("no .grd files in " + in.string());
    man.input(in);
    const bool dump = cfg_.flag("attention_dump");
    std::string out;
    std::vector<Tensor<T>> mems;
    for (const auto& [id, f] : items) {
      const auto d = decode(models, f, mems);
      nlohmann::json j;
      j["id"] = id;
      j["caption"] = lexicon::detokenize(d.ids, vocab);
      j["log_prob"] = d.log_prob;
      if (dump) {
        // Mean over the ensemble of each member's head-averaged maps.
        const auto words = d.words();
        nlohmann::json att = nlohmann::json::array();
        if (!words.empty()) {
          Tensor<double> mean = Tensor<double>::matrix(words.size(), f.cells());
          for (std::size_t k = 0; k < models.size(); ++k) {
            const auto a = models[k].cross_attention(words, mems[k]);
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += static_cast<double>(a[i]) / models.size();
          }
          for (std::size_t t = 0; t < words.size(); ++t) {
            nlohmann::json grid = nlohmann::json::array();
            const std::size_t h = f.has_layout() ? f.h : 1, w = f.has_layout() ? f.w : f.cells();
            for (std::size_t y = 0; y < h; ++y) {
              std::vector<double> row;
              for (std::size_t x = 0; x < w; ++x) row.push_back(mean(t, y * w + x));
              grid.push_back(row);
            }
            att.push_back({{"word", vocab.token(words[t])}, {"grid", grid}});
          }
        }
        j["attention"] = att;
      }
      out += j.dump() + "\n";
    }
    io::write_text_file(paths_.generated().string(), out);
    man.output(paths_.generated());
    std::cout << out;
  }

  void inspect_tree(Manifest& man) {
    const auto t = load_tree(man);
    require_file(paths_.tree_concepts(), "build-tree");
    man.input(paths_.tree_concepts());
    const auto concepts = lexicon::ConceptList::parse(io::read_text_file(paths_.tree_concepts().string()));
    const auto fmt = cfg_.str("tree_format");
    if (fmt == "json") {
      std::cout << tree::to_json(t).dump(2) << '\n';
      return;
    }
    if (fmt == "dot") {
      std::cout << tree::to_dot(t, concepts.tokens);
      return;
    }
    const auto emb_path = cfg_.str("embeddings");
    const auto load = lexicon::load_embeddings(emb_path, concepts);
    man.input(emb_path);
    const auto level = cfg_.size("level");
    const auto& lv = t.level(level);
    std::cout << "level " << level << ": " << lv.size() << " prototypes\n";
    for (std::size_t i = 0; i < lv.size(); ++i) {
      std::cout << "  #" << i << ':';
      for (auto c : tree::nearest_concepts(t, load.matrix.values, level, i, cfg_.size("top_k")))
        std::cout << ' ' << concepts.tokens[c];
      std::cout << '\n';
    }
  }

  void gen_synthetic(Manifest& man) {
    const auto world = synthetic::make_toy_world(cfg_.toy_spec());
    const auto data = synthetic::gen_toy_dataset(world, cfg_.size("toy_train"), cfg_.size("toy_val"));
    const fs::path train_dir = cfg_.str("train_dir"), val_dir = cfg_.str("val_dir");
    write_caption_split(train_dir, synthetic::ToyDataset::samples(data.train));
    write_caption_split(val_dir, synthetic::ToyDataset::samples(data.val));
    const fs::path emb = cfg_.str("embeddings");
    if (emb.has_parent_path()) fs::create_directories(emb.parent_path());
    lexicon::write_embeddings(emb.string(), world.words, world.embeddings, lexicon::EmbeddingFormat::text);
    man.output(train_dir);
    man.output(val_dir);
    man.output(emb);
    if (const fs::path c = cfg_.str("concepts"); !c.empty()) {
      if (c.has_parent_path()) fs::create_directories(c.parent_path());
      io::write_text_file(c.string(), world.concept_list().serialize());
      man.output(c);
    }
    std::cout << "toy world: " << world.n_concepts() << " concepts, " << data.train.size() << " train / "
              << data.val.size() << " val images\n";
  }

  RunConfig cfg_;
  Paths paths_;
};

}  // namespace ptsn::cli
