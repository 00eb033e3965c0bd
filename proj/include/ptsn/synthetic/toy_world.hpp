#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ptsn/dataset.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/lexicon.hpp"
#include "ptsn/model/grid.hpp"
#include "ptsn/numerics/rng.hpp"
#include "ptsn/synthetic/planted.hpp"

namespace ptsn::synthetic {

struct ToyWorldSpec {
  std::size_t n_super = 4;
  std::size_t n_sub_per_super = 3;
  /// Grid feature width (must equal the model width D).
  std::size_t dim = 64;
  std::size_t emb_dim = 16;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;
  /// Planted separation of the concept embeddings.
  double separation = 4.0;
  /// Noise vector norm per cell relative to the signature norm.
  double noise = 0.1;
  std::size_t min_concepts = 1;
  std::size_t max_concepts = 3;
  /// References per sample are drawn from 1..max_refs; the first is canonical.
  std::size_t max_refs = 5;
  std::uint64_t seed = 1;

  std::size_t n_concepts() const { return n_super * n_sub_per_super; }
  std::size_t cells() const { return grid_h * grid_w; }

  void validate() const {
    if (n_super < 1 || n_sub_per_super < 1 || dim < 1 || emb_dim < 1 || grid_h < 1 || grid_w < 1)
      throw ConfigError("toy world: all sizes must be >= 1");
    if (cells() < n_concepts())
      throw ConfigError("toy world: " + std::to_string(n_concepts()) + " concepts need as many grid cells, have " +
                        std::to_string(cells()));
    if (!(separation > 0.0)) throw ConfigError("toy world: separation must be > 0");
    if (!(noise >= 0.0)) throw ConfigError("toy world: noise must be >= 0");
    if (min_concepts < 1 || max_concepts < min_concepts || max_concepts > n_concepts())
      throw ConfigError("toy world: need 1 <= min_concepts <= max_concepts <= n_concepts");
    if (max_refs < 1 || max_refs > num_templates()) throw ConfigError("toy world: max_refs must be in 1..5");
  }

  static constexpr std::size_t num_templates() { return 5; }
};

/// Concepts arranged in a planted 2-level hierarchy. Each concept owns one
/// grid cell and a fixed signature of norm sqrt(dim) derived from its
/// embedding; a rendered image places the signatures of its concepts in
/// their cells and adds isotropic Gaussian noise everywhere.
struct ToyWorld {
  ToyWorldSpec spec;
  std::vector<std::string> words;
  std::vector<int> super_of;
  Tensor<double> embeddings;  // [C, emb_dim]
  Tensor<double> signatures;  // [C, dim]
  std::vector<std::size_t> cell_of;

  std::size_t n_concepts() const { return words.size(); }

  /// Per-component noise standard deviation.
  double noise_std() const { return spec.noise; }

  model::GridFeatures<double> render(const std::vector<std::size_t>& concepts, Rng* rng) const {
    model::GridFeatures<double> f{Tensor<double>::matrix(spec.cells(), spec.dim), spec.grid_h, spec.grid_w};
    for (auto c : concepts) {
      const auto cell = cell_of.at(c);
      for (std::size_t d = 0; d < spec.dim; ++d) f.g(cell, d) = signatures(c, d);
    }
    if (rng && spec.noise > 0.0)
      for (auto& v : f.g.storage()) v += noise_std() * rng->normal();
    return f;
  }

  /// Template t applied to concepts (sorted by concept index).
  std::string caption(std::vector<std::size_t> concepts, std::size_t t = 0) const {
    std::sort(concepts.begin(), concepts.end());
    std::string list;
    for (std::size_t i = 0; i < concepts.size(); ++i) {
      if (i > 0) list += " and ";
      list += (t == 2 ? "" : "a ") + words.at(concepts[i]);
    }
    switch (t) {
      case 0: return list;
      case 1: return "there is " + list;
      case 2: return list;
      case 3: return "an image with " + list;
      case 4: return "a photo of " + list;
      default: throw ConfigError("toy world: template index out of range");
    }
  }

  /// Every word any template can produce, concept words last.
  lexicon::Vocabulary vocabulary() const {
    lexicon::Vocabulary v;
    for (const char* w : {"a", "and", "there", "is", "an", "image", "with", "photo", "of"}) v.add(w);
    for (const auto& w : words) v.add(w);
    return v;
  }

  lexicon::ConceptList concept_list() const { return lexicon::ConceptList::make(words); }
};

inline ToyWorld make_toy_world(const ToyWorldSpec& spec) {
  spec.validate();
  ToyWorld w;
  w.spec = spec;
  auto planted = gen_planted_embeddings({.n_super = spec.n_super,
                                         .n_sub_per_super = spec.n_sub_per_super,
                                         .concepts_per_sub = 1,
                                         .dim = spec.emb_dim,
                                         .separation = spec.separation,
                                         .seed = derive_seed(spec.seed, 1)});
  w.embeddings = planted.x;
  w.super_of = planted.super_labels;
  for (std::size_t c = 0; c < spec.n_concepts(); ++c)
    w.words.push_back("s" + std::to_string(c / spec.n_sub_per_super) + "t" + std::to_string(c % spec.n_sub_per_super));

  Rng rng(derive_seed(spec.seed, 2));
  Tensor<double> proj = Tensor<double>::matrix(spec.emb_dim, spec.dim);
  for (auto& v : proj.storage()) v = rng.normal();
  w.signatures = Tensor<double>::matrix(spec.n_concepts(), spec.dim);
  for (std::size_t c = 0; c < spec.n_concepts(); ++c) {
    double norm = 0.0;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      double s = 0.0;
      for (std::size_t e = 0; e < spec.emb_dim; ++e) s += w.embeddings(c, e) * proj(e, d);
      w.signatures(c, d) = s;
      norm += s * s;
    }
    const double scale = std::sqrt(static_cast<double>(spec.dim) / norm);
    for (std::size_t d = 0; d < spec.dim; ++d) w.signatures(c, d) *= scale;
  }

  std::vector<std::size_t> cells(spec.cells());
  std::iota(cells.begin(), cells.end(), 0);
  rng.shuffle(cells);
  w.cell_of.assign(cells.begin(), cells.begin() + static_cast<long>(spec.n_concepts()));
  return w;
}

struct ToySample {
  std::vector<std::size_t> concepts;  // sorted
  CaptionSample<double> sample;
};

enum class Split : std::uint64_t { train = 1, val = 2 };

/// Sample `index` of a split; its randomness comes only from
/// derive_seed(world seed, split, index).
inline ToySample gen_toy_sample(const ToyWorld& w, Split split, std::size_t index) {
  Rng rng(derive_seed(w.spec.seed, 100 + static_cast<std::uint64_t>(split), index));
  const std::size_t k = w.spec.min_concepts + rng.below(w.spec.max_concepts - w.spec.min_concepts + 1);
  std::vector<std::size_t> all(w.n_concepts());
  std::iota(all.begin(), all.end(), 0);
  rng.shuffle(all);
  std::vector<std::size_t> chosen(all.begin(), all.begin() + static_cast<long>(k));
  std::sort(chosen.begin(), chosen.end());

  ToySample s;
  s.concepts = chosen;
  s.sample.id = (split == Split::train ? "train" : "val") + std::to_string(index);
  s.sample.features = w.render(chosen, &rng);
  const std::size_t n_refs = 1 + rng.below(w.spec.max_refs);
  std::vector<std::size_t> templates(ToyWorldSpec::num_templates() - 1);
  std::iota(templates.begin(), templates.end(), 1);
  rng.shuffle(templates);
  s.sample.refs.push_back(w.caption(chosen, 0));
  for (std::size_t r = 1; r < n_refs; ++r) s.sample.refs.push_back(w.caption(chosen, templates[r - 1]));
  return s;
}

struct ToyDataset {
  std::vector<ToySample> train;
  std::vector<ToySample> val;

  static std::vector<CaptionSample<double>> samples(const std::vector<ToySample>& v) {
    std::vector<CaptionSample<double>> out;
    for (const auto& s : v) out.push_back(s.sample);
    return out;
  }
};

inline ToyDataset gen_toy_dataset(const ToyWorld& w, std::size_t n_train, std::size_t n_val) {
  ToyDataset d;
  for (std::size_t i = 0; i < n_train; ++i) d.train.push_back(gen_toy_sample(w, Split::train, i));
  for (std::size_t i = 0; i < n_val; ++i) d.val.push_back(gen_toy_sample(w, Split::val, i));
  return d;
}

/// Bayes-optimal concept set: exhaustive search over every admissible
/// concept subset for the highest posterior under the renderer's Gaussian
/// noise and the generator's prior (uniform size, then uniform subset).
inline std::vector<std::size_t> bayes_concepts(const ToyWorld& w, const Tensor<double>& features) {
  const std::size_t n = w.n_concepts();
  const double var = w.noise_std() * w.noise_std();
  std::vector<std::size_t> best;
  double best_score = -std::numeric_limits<double>::infinity();
  // Per-concept residual change when its signature is present in its cell.
  std::vector<double> gain(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    const auto cell = w.cell_of[c];
    for (std::size_t d = 0; d < w.spec.dim; ++d) {
      const double f = features(cell, d), s = w.signatures(c, d);
      gain[c] += f * f - (f - s) * (f - s);
    }
  }
  auto log_choose = [](std::size_t a, std::size_t b) {
    return std::lgamma(a + 1.0) - std::lgamma(b + 1.0) - std::lgamma(a - b + 1.0);
  };
  std::vector<std::size_t> cur;
  auto visit = [&](auto&& self, std::size_t start) -> void {
    if (cur.size() >= w.spec.min_concepts) {
      double fit = 0.0;
      for (auto c : cur) fit += gain[c];
      const double prior = -log_choose(n, cur.size());
      const double score = var > 0.0 ? fit / (2.0 * var) + prior : fit;
      if (score > best_score) {
        best_score = score;
        best = cur;
      }
    }
    if (cur.size() == w.spec.max_concepts) return;
    for (std::size_t c = start; c < n; ++c) {
      cur.push_back(c);
      self(self, c + 1);
      cur.pop_back();
    }
  };
  visit(visit, 0);
  return best;
}

inline std::string bayes_caption(const ToyWorld& w, const Tensor<double>& features) {
  return w.caption(bayes_concepts(w, features), 0);
}

}  // namespace ptsn::synthetic
