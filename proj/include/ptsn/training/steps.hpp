#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/model/decode.hpp"
#include "ptsn/training/adam.hpp"

namespace ptsn::training {

/// One image with its tokenized references (word ids, no specials). The
/// model reads `image` when it has a toy encoder and `features` otherwise.
template <class T>
struct Example {
  model::GridFeatures<T> features;
  Tensor<T> image;
  std::vector<std::vector<int>> refs;
};

/// Aggregated memory for an example, recorded on the graph.
template <class T>
Var<T> memory_var(model::Graph<T>& g, model::Captioner<T>& m, const Example<T>& ex) {
  return m.aggregate(g, m.config().encoder.enabled ? m.encode(g, ex.image) : m.features(g, ex.features));
}

template <class T>
Tensor<T> memory_value(model::Captioner<T>& m, const Example<T>& ex) {
  Tape<T> tape;
  model::Graph<T> g(tape);
  return memory_var(g, m, ex).value();
}

/// Decoder inputs (<bos> + words) and targets (words + <eos>) for a
/// caption, keeping at most max_len - 1 words.
inline std::pair<std::vector<int>, std::vector<int>> teacher_forcing(const std::vector<int>& words, std::size_t max_len) {
  const std::size_t n = std::min(words.size(), max_len - 1);
  std::vector<int> in{lexicon::Vocabulary::bos_id}, out;
  for (std::size_t i = 0; i < n; ++i) {
    in.push_back(words[i]);
    out.push_back(words[i]);
  }
  out.push_back(lexicon::Vocabulary::eos_id);
  return {in, out};
}

/// An (example, caption) pair for cross-entropy training.
template <class T>
struct XeItem {
  const Example<T>* example;
  const std::vector<int>* caption;
};

/// Accumulates the gradient of the batch cross-entropy, averaged over every
/// target token in the batch, into Parameter::grad. Returns that mean loss.
template <class T>
double xe_gradient(model::Captioner<T>& m, const std::vector<XeItem<T>>& batch, Rng* dropout_rng = nullptr) {
  std::size_t tokens = 0;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> seqs;
  for (const auto& item : batch) {
    seqs.push_back(teacher_forcing(*item.caption, m.config().max_len));
    tokens += seqs.back().second.size();
  }
  if (tokens == 0) throw DataError("xe_step: empty batch");
  double loss = 0.0;
  const T w = T(1) / static_cast<T>(tokens);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape<T> tape;
    model::Graph<T> g(tape, dropout_rng, static_cast<T>(dropout_rng ? m.config().dropout : 0.0));
    auto mem = memory_var(g, m, *batch[i].example);
    const auto& [in, out] = seqs[i];
    auto nll = ops::weighted_nll(m.decode_logits(g, mem, in), out, std::vector<T>(out.size(), w), m.excluded());
    loss += static_cast<double>(nll.value()[0]);
    tape.backward(nll);
  }
  return loss;
}

template <class T>
double xe_step(model::Captioner<T>& m, const std::vector<XeItem<T>>& batch, Adam<T>& opt,
               const std::function<double(ParamGroup)>& lr, Rng* dropout_rng = nullptr) {
  const double loss = xe_gradient(m, batch, dropout_rng);
  opt.step(m.parameters(), lr);
  return loss;
}

struct RlConfig {
  std::size_t k = 5;
  double temperature = 1.0;

  void validate() const {
    if (k < 2) throw ConfigError("scst needs k >= 2 samples per image");
    if (!(temperature > 0.0)) throw ConfigError("scst temperature must be > 0");
  }
};

/// Adds scale * grad of -(1/k) sum_i (r_i - b) log p(s_i), with b the mean
/// reward, for one example and its k sampled sequences.
template <class T>
void scst_gradient(model::Captioner<T>& m, const Example<T>& ex, const std::vector<std::vector<int>>& seqs,
                   const std::vector<double>& rewards, double scale = 1.0) {
  if (seqs.size() != rewards.size() || seqs.size() < 2) throw ConfigError("scst: need k >= 2 sequences with rewards");
  const double k = static_cast<double>(seqs.size());
  double b = 0.0;
  for (double r : rewards) b += r / k;
  Tape<T> tape;
  model::Graph<T> g(tape);
  auto mem = memory_var(g, m, ex);
  std::vector<Var<T>> terms;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.empty()) throw DataError("scst: empty sampled sequence");
    std::vector<int> in{lexicon::Vocabulary::bos_id};
    in.insert(in.end(), s.begin(), s.end() - 1);
    // weighted_nll is -log p, so weight (r - b) / k gives -(r - b)/k log p.
    const T w = static_cast<T>(scale * (rewards[i] - b) / k);
    terms.push_back(ops::weighted_nll(m.decode_logits(g, mem, in), s, std::vector<T>(s.size(), w), m.excluded()));
  }
  auto total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  tape.backward(total);
}

/// Reward of a generated word sequence for example `index`.
using RewardFn = std::function<double(const std::vector<int>& words, std::size_t index)>;

/// Samples k captions per example, accumulates the averaged SCST gradient
/// and applies one optimizer step. Returns the mean sampled reward.
template <class T>
double scst_step(model::Captioner<T>& m, const std::vector<Example<T>>& examples, const std::vector<std::size_t>& batch,
                 const RlConfig& rl, const RewardFn& reward, Rng& rng, Adam<T>& opt,
                 const std::function<double(ParamGroup)>& lr) {
  rl.validate();
  if (batch.empty()) throw DataError("scst_step: empty batch");
  double mean_reward = 0.0;
  for (auto idx : batch) {
    const auto& ex = examples.at(idx);
    if (ex.refs.empty()) throw DataError("scst_step: example has no references");
    const auto mem = memory_value(m, ex);
    std::vector<std::vector<int>> seqs;
    std::vector<double> rewards;
    for (std::size_t i = 0; i < rl.k; ++i) {
      auto d = model::sample_decode(m, mem, rl.temperature, rng);
      rewards.push_back(reward(d.words(), idx));
      seqs.push_back(std::move(d.ids));
      mean_reward += rewards.back() / static_cast<double>(rl.k * batch.size());
    }
    scst_gradient(m, ex, seqs, rewards, 1.0 / static_cast<double>(batch.size()));
  }
  opt.step(m.parameters(), lr);
  return mean_reward;
}

}  // namespace ptsn::training
