#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/model/captioner.hpp"
#include "ptsn/numerics/ops.hpp"
#include "ptsn/numerics/rng.hpp"

namespace ptsn::model {

/// Generated ids (ending in <eos> unless max_len was reached) and their
/// total log-probability.
struct Decoded {
  std::vector<int> ids;
  double log_prob = 0.0;

  /// Ids before the first <eos>.
  std::vector<int> words() const {
    std::vector<int> out;
    for (int id : ids) {
      if (id == lexicon::Vocabulary::eos_id) break;
      out.push_back(id);
    }
    return out;
  }
};

/// Log-probabilities of the next token given the generated prefix.
using StepFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

template <class T>
StepFn model_step(Captioner<T>& m, const Tensor<T>& memory) {
  return [&m, &memory](const std::vector<int>& prefix) {
    const auto logits = m.decode_step(prefix, memory);
    const auto lp = ops::log_softmax_row<T>(std::span<const T>(logits), &m.excluded());
    return std::vector<double>(lp.begin(), lp.end());
  };
}

namespace detail {

inline int argmax(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

}  // namespace detail

/// Highest-probability token at every step; ties go to the lowest id.
inline Decoded greedy_search(const StepFn& step, std::size_t max_len) {
  Decoded out;
  while (out.ids.size() < max_len) {
    const auto lp = step(out.ids);
    const int tok = detail::argmax(lp);
    out.ids.push_back(tok);
    out.log_prob += lp[static_cast<std::size_t>(tok)];
    if (tok == lexicon::Vocabulary::eos_id) break;
  }
  return out;
}

/// Beam search on summed log-probability (no length normalization).
/// Finished hypotheses compete with live ones; among equal scores the
/// earlier hypothesis and then the lower token id win, so beam = 1
/// reproduces greedy_search exactly.
inline Decoded beam_search(const StepFn& step, std::size_t beam, std::size_t max_len) {
  if (beam < 1) throw ConfigError("beam size must be >= 1");
  struct Hyp {
    std::vector<int> ids;
    double score;
    bool done;
  };
  std::vector<Hyp> beams{{{}, 0.0, false}};
  for (std::size_t t = 0; t < max_len; ++t) {
    struct Cand {
      double score;
      double step_lp;  // breaks ties between equal rounded sums
      std::size_t parent;
      int token;  // -1 keeps a finished hypothesis as is
    };
    std::vector<Cand> cands;
    bool any_live = false;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      if (beams[b].done) {
        cands.push_back({beams[b].score, 0.0, b, -1});
        continue;
      }
      any_live = true;
      const auto lp = step(beams[b].ids);
      for (std::size_t v = 0; v < lp.size(); ++v)
        if (std::isfinite(lp[v])) cands.push_back({beams[b].score + lp[v], lp[v], b, static_cast<int>(v)});
    }
    if (!any_live) break;
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return a.score != b.score ? a.score > b.score : a.step_lp > b.step_lp;
    });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < std::min(beam, cands.size()); ++i) {
      const auto& c = cands[i];
      Hyp h = beams[c.parent];
      if (c.token >= 0) {
        h.ids.push_back(c.token);
        h.score = c.score;
        h.done = c.token == lexicon::Vocabulary::eos_id;
      }
      next.push_back(std::move(h));
    }
    beams = std::move(next);
  }
  const auto best = std::max_element(beams.begin(), beams.end(), [](const Hyp& a, const Hyp& b) { return a.score < b.score; });
  return {best->ids, best->score};
}

/// Ancestral sampling from softmax(log p / temperature). The reported
/// log-probability is under the untempered distribution.
inline Decoded sample_search(const StepFn& step, std::size_t max_len, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ConfigError("sampling temperature must be > 0");
  Decoded out;
  std::vector<double> w;
  while (out.ids.size() < max_len) {
    const auto lp = step(out.ids);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lp) mx = std::max(mx, v);
    w.assign(lp.size(), 0.0);
    for (std::size_t v = 0; v < lp.size(); ++v)
      if (std::isfinite(lp[v])) w[v] = std::exp((lp[v] - mx) / temperature);
    const auto tok = static_cast<int>(rng.categorical(w));
    out.ids.push_back(tok);
    out.log_prob += lp[static_cast<std::size_t>(tok)];
    if (tok == lexicon::Vocabulary::eos_id) break;
  }
  return out;
}

template <class T>
Decoded greedy_decode(Captioner<T>& m, const Tensor<T>& memory) {
  return greedy_search(model_step(m, memory), m.config().max_len);
}

template <class T>
Decoded beam_decode(Captioner<T>& m, const Tensor<T>& memory, std::size_t beam) {
  return beam_search(model_step(m, memory), beam, m.config().max_len);
}

template <class T>
Decoded sample_decode(Captioner<T>& m, const Tensor<T>& memory, double temperature, Rng& rng) {
  return sample_search(model_step(m, memory), m.config().max_len, temperature, rng);
}

/// Mean of the members' next-token distributions (probabilities, not
/// log-probabilities).
template <class T>
std::vector<double> ensemble_distribution(const std::vector<Captioner<T>*>& models,
                                          const std::vector<const Tensor<T>*>& memories, const std::vector<int>& prefix) {
  if (models.empty() || models.size() != memories.size())
    throw ConfigError("ensemble: need one memory per model and at least one model");
  const std::size_t v = models.front()->config().vocab_size;
  std::vector<double> mean(v, 0.0);
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (models[k]->config().vocab_size != v) throw ConfigError("ensemble: vocabulary sizes differ");
    const auto lp = model_step(*models[k], *memories[k])(prefix);
    for (std::size_t i = 0; i < v; ++i) mean[i] += std::exp(lp[i]) / static_cast<double>(models.size());
  }
  return mean;
}

enum class Strategy { greedy, beam };

template <class T>
Decoded ensemble_decode(const std::vector<Captioner<T>*>& models, const std::vector<const Tensor<T>*>& memories,
                        Strategy strategy, std::size_t beam = 1) {
  if (models.empty()) throw ConfigError("ensemble: no models");
  StepFn step = [&](const std::vector<int>& prefix) {
    auto p = ensemble_distribution(models, memories, prefix);
    for (auto& x : p) x = x > 0.0 ? std::log(x) : -std::numeric_limits<double>::infinity();
    return p;
  };
  std::size_t max_len = models.front()->config().max_len;
  for (auto* m : models) max_len = std::min(max_len, m->config().max_len);
  return strategy == Strategy::greedy ? greedy_search(step, max_len) : beam_search(step, beam, max_len);
}

}  // namespace ptsn::model
