#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptsn/config.hpp"
#include "ptsn/dataset.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/metrics.hpp"
#include "ptsn/model/checkpoint.hpp"
#include "ptsn/training/schedule.hpp"
#include "ptsn/training/steps.hpp"

namespace ptsn::training {

enum class Stage { xe = 1, rl = 2 };

inline const char* stage_name(Stage s) { return s == Stage::xe ? "xe" : "rl"; }

/// Which references feed cross-entropy: every one, or only the first.
enum class XeRefs { all, first };

struct TrainConfig {
  std::size_t xe_epochs = 20;
  std::size_t xe_batch = 50;
  LrSchedule xe_lr{4e-5, 4e-4, ScheduleKind::lambda};
  XeRefs xe_refs = XeRefs::all;
  /// Ends XE early once validation greedy sequence accuracy reaches this; 0 disables.
  double xe_target_accuracy = 0.0;
  std::size_t rl_epochs = 30;
  std::size_t rl_batch = 10;
  LrSchedule rl_lr{2e-6, 2e-5, ScheduleKind::constant};
  RlConfig rl;
  std::size_t patience = 5;
  AdamConfig adam;
  std::uint64_t seed = 1;

  void validate() const {
    if (xe_batch < 1 || rl_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (!(xe_target_accuracy >= 0.0 && xe_target_accuracy <= 1.0))
      throw ConfigError("xe_target_accuracy must lie in [0, 1]");
    xe_lr.validate();
    rl_lr.validate();
    rl.validate();
    adam.validate();
  }
};

/// Tokenizes every reference; words missing from the vocabulary are dropped.
template <class T>
std::vector<Example<T>> make_examples(const std::vector<CaptionSample<T>>& samples, const lexicon::Vocabulary& vocab) {
  std::vector<Example<T>> out;
  for (const auto& s : samples) {
    if (s.refs.empty()) throw DataError("sample '" + s.id + "' has no references");
    Example<T> ex;
    ex.features = s.features;
    for (const auto& r : s.refs) ex.refs.push_back(lexicon::tokenize(r, vocab));
    out.push_back(std::move(ex));
  }
  return out;
}

/// Word ids as metric tokens (ids map one-to-one onto words, so scores
/// equal those on the words themselves).
inline metrics::Tokens id_tokens(const std::vector<int>& ids) {
  metrics::Tokens out;
  for (int id : ids) out.push_back(std::to_string(id));
  return out;
}

template <class T>
metrics::RefCorpus ref_corpus(const std::vector<Example<T>>& examples) {
  metrics::RefCorpus out;
  for (const auto& ex : examples) {
    if (ex.refs.empty()) throw DataError("every example needs at least one reference");
    std::vector<metrics::Tokens> refs;
    for (const auto& r : ex.refs) refs.push_back(id_tokens(r));
    out.push_back(std::move(refs));
  }
  return out;
}

struct Validation {
  double cider = 0.0;
  /// Fraction of examples whose greedy caption equals the first reference.
  double accuracy = 0.0;
  std::vector<std::vector<int>> captions;
};

/// Greedy captions for every example, scored by CIDEr-D against `cider`
/// (built from the same examples' references).
template <class T>
Validation validate_greedy(model::Captioner<T>& m, const std::vector<Example<T>>& examples, const metrics::CiderD& cider) {
  Validation v;
  std::size_t exact = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto words = model::greedy_decode(m, memory_value(m, examples[i])).words();
    v.cider += cider.score(id_tokens(words), i) / static_cast<double>(examples.size());
    if (words == examples[i].refs.front()) ++exact;
    v.captions.push_back(std::move(words));
  }
  v.accuracy = examples.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(examples.size());
  return v;
}

/// One line of the training log.
struct EpochRecord {
  Stage stage = Stage::xe;
  std::size_t epoch = 0;
  std::map<std::string, double> lr;
  /// Mean XE loss or mean sampled reward.
  double value = 0.0;
  double val_cider = 0.0;
  double val_accuracy = 0.0;
  double wallclock = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage_name(stage);
    j["epoch"] = epoch;
    j["lr_by_group"] = lr;
    j[stage == Stage::xe ? "loss" : "reward"] = value;
    j["val_cider"] = val_cider;
    j["val_accuracy"] = val_accuracy;
    j["wallclock"] = wallclock;
    return j;
  }
};

/// Epoch-level driver for both stages. Every epoch draws its data order
/// and dropout/sampling randomness from derive_seed(seed, stage, epoch),
/// so resuming from a checkpoint replays later epochs exactly.
template <class T>
class Trainer {
 public:
  Trainer(model::Captioner<T>& m, TrainConfig cfg, const std::vector<Example<T>>& train, const std::vector<Example<T>>& val,
          Stage stage)
      : m_(m), cfg_(std::move(cfg)), train_(train), val_(val), stage_(stage), adam_(cfg_.adam) {
    cfg_.validate();
    if (train_.empty()) throw DataError("training split is empty");
    if (val_.empty()) throw DataError("validation split is empty");
    val_cider_.emplace(ref_corpus(val_));
    if (stage_ == Stage::rl) reward_cider_.emplace(ref_corpus(train_));
    stopper_.patience = cfg_.patience;
  }

  Stage stage() const { return stage_; }
  std::size_t epoch() const { return epoch_; }
  const EarlyStopper& stopper() const { return stopper_; }
  const std::optional<model::Checkpoint>& best() const { return best_; }

  std::size_t max_epochs() const { return stage_ == Stage::xe ? cfg_.xe_epochs : cfg_.rl_epochs; }

  Validation validate() { return validate_greedy(m_, val_, *val_cider_); }

  /// CIDEr-D of `words` against the references of training example `index`.
  double reward(const std::vector<int>& words, std::size_t index) const {
    return reward_cider_->score(id_tokens(words), index);
  }

  /// Runs the next epoch and validates. Returns true when training should
  /// stop (epoch budget, target accuracy or early stopping).
  bool run_epoch(EpochRecord& rec) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = ++epoch_;
    const auto& sched = stage_ == Stage::xe ? cfg_.xe_lr : cfg_.rl_lr;
    auto lr = [&](ParamGroup g) { return sched.rate(n, g); };
    Rng order(derive_seed(cfg_.seed, 10 + static_cast<std::uint64_t>(stage_), n));
    Rng noise(derive_seed(cfg_.seed, 20 + static_cast<std::uint64_t>(stage_), n));
    rec = EpochRecord{};
    rec.stage = stage_;
    rec.epoch = n;
    for (auto g : {ParamGroup::encoder, ParamGroup::other}) rec.lr[group_name(g)] = lr(g);

    if (stage_ == Stage::xe) {
      std::vector<XeItem<T>> items;
      for (const auto& ex : train_) {
        if (ex.refs.empty()) throw DataError("training example without references");
        const std::size_t count = cfg_.xe_refs == XeRefs::all ? ex.refs.size() : 1;
        for (std::size_t r = 0; r < count; ++r) items.push_back({&ex, &ex.refs[r]});
      }
      order.shuffle(items);
      std::size_t batches = 0;
      for (std::size_t s = 0; s < items.size(); s += cfg_.xe_batch) {
        std::vector<XeItem<T>> batch(items.begin() + static_cast<long>(s),
                                     items.begin() + static_cast<long>(std::min(items.size(), s + cfg_.xe_batch)));
        rec.value += xe_step(m_, batch, adam_, lr, m_.config().dropout > 0.0 ? &noise : nullptr);
        ++batches;
      }
      rec.value /= static_cast<double>(batches);
    } else {
      std::vector<std::size_t> idx(train_.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      order.shuffle(idx);
      std::size_t batches = 0;
      RewardFn fn = [this](const std::vector<int>& w, std::size_t i) { return reward(w, i); };
      for (std::size_t s = 0; s < idx.size(); s += cfg_.rl_batch) {
        std::vector<std::size_t> batch(idx.begin() + static_cast<long>(s),
                                       idx.begin() + static_cast<long>(std::min(idx.size(), s + cfg_.rl_batch)));
        rec.value += scst_step(m_, train_, batch, cfg_.rl, fn, noise, adam_, lr);
        ++batches;
      }
      rec.value /= static_cast<double>(batches);
    }

    const auto v = validate();
    rec.val_cider = v.cider;
    rec.val_accuracy = v.accuracy;
    const bool improved = v.cider > stopper_.best;
    const bool patience_out = stopper_.update(v.cider);
    if (improved) best_ = checkpoint();
    rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (n >= max_epochs()) return true;
    if (stage_ == Stage::xe) return cfg_.xe_target_accuracy > 0.0 && v.accuracy >= cfg_.xe_target_accuracy;
    return patience_out;
  }

  /// Runs epochs until a stop condition, reporting each record.
  void run(const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (epoch_ >= max_epochs()) return;
    EpochRecord rec;
    for (;;) {
      const bool stop = run_epoch(rec);
      if (on_epoch) on_epoch(rec);
      if (stop) break;
    }
  }

  /// Model parameters plus everything needed to resume this stage.
  model::Checkpoint checkpoint() {
    auto c = model::make_checkpoint(m_);
    c.meta["train.stage"] = stage_name(stage_);
    c.meta["train.epoch"] = std::to_string(epoch_);
    c.meta["train.seed"] = std::to_string(cfg_.seed);
    c.meta["train.best_cider"] = config::KeyValues::format_real(stopper_.best);
    c.meta["train.since_best"] = std::to_string(stopper_.since_best);
    adam_.save(c, m_.parameters());
    return c;
  }

  /// Restores parameters, optimizer moments and counters from a checkpoint
  /// written by checkpoint() for the same stage.
  void resume(const model::Checkpoint& c) {
    auto get = [&](const std::string& k) {
      auto it = c.meta.find(k);
      if (it == c.meta.end()) throw DataError("checkpoint lacks training state '" + k + "'");
      return it->second;
    };
    if (get("train.stage") != stage_name(stage_))
      throw DataError("checkpoint was written by stage " + get("train.stage") + ", resuming " + stage_name(stage_));
    model::load_parameters(m_, c);
    adam_.load(c, m_.parameters());
    epoch_ = config::KeyValues::parse_int<std::size_t>("train.epoch", get("train.epoch"));
    stopper_.best = config::KeyValues::parse_real("train.best_cider", get("train.best_cider"));
    stopper_.since_best = config::KeyValues::parse_int<std::size_t>("train.since_best", get("train.since_best"));
  }

 private:
  model::Captioner<T>& m_;
  TrainConfig cfg_;
  const std::vector<Example<T>>& train_;
  const std::vector<Example<T>>& val_;
  Stage stage_;
  Adam<T> adam_;
  std::size_t epoch_ = 0;
  EarlyStopper stopper_;
  std::optional<metrics::CiderD> val_cider_, reward_cider_;
  std::optional<model::Checkpoint> best_;
};

}  // namespace ptsn::training
