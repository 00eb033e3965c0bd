#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/lexicon.hpp"

namespace ptsn::metrics {

using Tokens = std::vector<std::string>;
using NGram = std::vector<std::string>;
/// Reference captions per image.
using RefCorpus = std::vector<std::vector<Tokens>>;

inline constexpr std::size_t kMaxN = 4;
inline constexpr double kCiderSigma = 6.0;

struct NGramStats {
  std::map<NGram, int> counts;
};

inline NGramStats ngram_stats(const Tokens& s, std::size_t max_n = kMaxN) {
  NGramStats st;
  for (std::size_t n = 1; n <= max_n; ++n)
    for (std::size_t i = 0; i + n <= s.size(); ++i)
      ++st.counts[NGram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return st;
}

/// Document frequencies over a reference corpus; an image counts once per
/// n-gram no matter how many of its references contain it.
struct IdfTable {
  std::map<NGram, int> df;
  std::size_t corpus_size = 0;

  /// ln(N) - ln(max(1, df)); unseen n-grams take df = 1.
  double idf(const NGram& g) const {
    auto it = df.find(g);
    const int d = it == df.end() ? 1 : std::max(1, it->second);
    return std::log(static_cast<double>(corpus_size)) - std::log(static_cast<double>(d));
  }
};

inline IdfTable build_idf(const RefCorpus& corpus) {
  if (corpus.empty()) throw DataError("build_idf: empty reference corpus");
  IdfTable t;
  t.corpus_size = corpus.size();
  for (const auto& refs : corpus) {
    if (refs.empty()) throw DataError("build_idf: image with no references");
    std::set<NGram> seen;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_stats(r).counts) seen.insert(g);
    for (const auto& g : seen) ++t.df[g];
  }
  return t;
}

namespace detail {

struct TfIdfVec {
  std::array<std::map<NGram, double>, kMaxN> vec;
  std::array<double, kMaxN> norm{};
  std::size_t length = 0;
};

inline TfIdfVec tfidf(const Tokens& s, const IdfTable& idf) {
  TfIdfVec v;
  v.length = s.size();
  for (const auto& [g, c] : ngram_stats(s).counts) {
    const double w = c * idf.idf(g);
    v.vec[g.size() - 1][g] = w;
    v.norm[g.size() - 1] += w * w;
  }
  for (auto& n : v.norm) n = std::sqrt(n);
  return v;
}

/// Clipped cosine for order n (0-based index).
inline double clipped_cosine(const TfIdfVec& c, const TfIdfVec& r, std::size_t n) {
  double dot = 0.0;
  for (const auto& [g, vc] : c.vec[n]) {
    auto it = r.vec[n].find(g);
    if (it == r.vec[n].end()) continue;
    dot += std::min(vc, it->second) * it->second;
  }
  if (c.norm[n] != 0.0 && r.norm[n] != 0.0) dot /= c.norm[n] * r.norm[n];
  return dot;
}

inline double cider_from_vecs(const TfIdfVec& c, const std::vector<TfIdfVec>& refs) {
  double total = 0.0;
  for (const auto& r : refs) {
    const double delta = static_cast<double>(c.length) - static_cast<double>(r.length);
    const double penalty = std::exp(-delta * delta / (2.0 * kCiderSigma * kCiderSigma));
    for (std::size_t n = 0; n < kMaxN; ++n) total += clipped_cosine(c, r, n) * penalty;
  }
  return 10.0 * total / static_cast<double>(kMaxN) / static_cast<double>(refs.size());
}

}  // namespace detail

/// Clipped TF-IDF cosine between candidate and one reference for a single
/// n-gram order, without the length penalty.
inline double ngram_similarity(const Tokens& cand, const Tokens& ref, const IdfTable& idf, std::size_t n) {
  if (n < 1 || n > kMaxN) throw ConfigError("ngram_similarity: n must be in 1..4");
  return detail::clipped_cosine(detail::tfidf(cand, idf), detail::tfidf(ref, idf), n - 1);
}

/// CIDEr-D of one candidate against its references: n = 1..4, sigma = 6,
/// scaled by 10.
inline double cider_d(const Tokens& cand, const std::vector<Tokens>& refs, const IdfTable& idf) {
  if (refs.empty()) throw DataError("cider_d: empty reference set");
  std::vector<detail::TfIdfVec> rv;
  rv.reserve(refs.size());
  for (const auto& r : refs) rv.push_back(detail::tfidf(r, idf));
  return detail::cider_from_vecs(detail::tfidf(cand, idf), rv);
}

/// CIDEr-D with the idf table and reference vectors computed once, for
/// repeated scoring against a fixed corpus (the RL reward).
class CiderD {
 public:
  explicit CiderD(const RefCorpus& corpus) : idf_(build_idf(corpus)) {
    refs_.reserve(corpus.size());
    for (const auto& refs : corpus) {
      std::vector<detail::TfIdfVec> rv;
      for (const auto& r : refs) rv.push_back(detail::tfidf(r, idf_));
      refs_.push_back(std::move(rv));
    }
  }

  double score(const Tokens& cand, std::size_t image) const {
    if (image >= refs_.size()) throw std::out_of_range("CiderD: image index out of range");
    return detail::cider_from_vecs(detail::tfidf(cand, idf_), refs_[image]);
  }

  std::size_t size() const { return refs_.size(); }
  const IdfTable& idf() const { return idf_; }

 private:
  IdfTable idf_;
  std::vector<std::vector<detail::TfIdfVec>> refs_;
};

/// Corpus BLEU-max_n: clipped n-gram precisions pooled over the corpus,
/// brevity penalty from the closest reference length (shorter on ties), no
/// smoothing.
inline double bleu(const std::vector<Tokens>& cands, const RefCorpus& refs, std::size_t max_n = kMaxN) {
  if (max_n < 1) throw ConfigError("bleu: max_n must be >= 1");
  if (cands.empty()) throw DataError("bleu: empty candidate corpus");
  if (refs.size() != cands.size()) throw DataError("bleu: one reference set per candidate required");
  std::vector<double> match(max_n, 0.0), total(max_n, 0.0);
  double c_len = 0.0, r_len = 0.0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (refs[i].empty()) throw DataError("bleu: image with no references");
    const auto& c = cands[i];
    c_len += static_cast<double>(c.size());
    std::size_t closest = refs[i][0].size();
    for (const auto& r : refs[i]) {
      const auto d = std::labs(static_cast<long>(r.size()) - static_cast<long>(c.size()));
      const auto best = std::labs(static_cast<long>(closest) - static_cast<long>(c.size()));
      if (d < best || (d == best && r.size() < closest)) closest = r.size();
    }
    r_len += static_cast<double>(closest);

    std::map<NGram, int> max_ref;
    for (const auto& r : refs[i])
      for (const auto& [g, cnt] : ngram_stats(r, max_n).counts) max_ref[g] = std::max(max_ref[g], cnt);
    for (const auto& [g, cnt] : ngram_stats(c, max_n).counts) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) match[g.size() - 1] += std::min(cnt, it->second);
    }
    for (std::size_t n = 1; n <= max_n; ++n)
      if (c.size() >= n) total[n - 1] += static_cast<double>(c.size() - n + 1);
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (match[n] == 0.0) return 0.0;
    log_sum += std::log(match[n] / total[n]);
  }
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

struct ImageScore {
  std::string id;
  std::string caption;
  double cider_d = 0.0;
};

struct EvalReport {
  double cider_d = 0.0;
  std::array<double, kMaxN> bleu{};
  std::vector<ImageScore> per_image;

  /// One JSON object per line: corpus metrics first, then per-image CIDEr-D.
  std::string to_jsonl() const {
    std::string out;
    auto line = [&](const nlohmann::json& j) { out += j.dump() + "\n"; };
    line({{"metric", "CIDEr-D"}, {"score", cider_d}});
    for (std::size_t n = 0; n < kMaxN; ++n) line({{"metric", "BLEU-" + std::to_string(n + 1)}, {"score", bleu[n]}});
    for (const auto& s : per_image) line({{"image", s.id}, {"caption", s.caption}, {"cider_d", s.cider_d}});
    return out;
  }
};

inline EvalReport evaluate(const std::vector<Tokens>& cands, const RefCorpus& refs, const std::vector<std::string>& ids) {
  if (ids.size() != cands.size()) throw DataError("evaluate: one id per candidate required");
  EvalReport rep;
  const CiderD scorer(refs);
  for (std::size_t n = 0; n < kMaxN; ++n) rep.bleu[n] = bleu(cands, refs, n + 1);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    ImageScore s{ids[i], "", scorer.score(cands[i], i)};
    for (const auto& w : cands[i]) s.caption += (s.caption.empty() ? "" : " ") + w;
    rep.cider_d += s.cider_d;
    rep.per_image.push_back(std::move(s));
  }
  rep.cider_d /= static_cast<double>(cands.size());
  return rep;
}

}  // namespace ptsn::metrics
