#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/io.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::lexicon {

inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kEos = "<eos>";

/// Lowercase, map whitespace to spaces, drop every character outside
/// [a-z0-9' -], collapse runs of spaces and trim. Idempotent.
inline std::string normalize(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
    if (c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') c = ' ';
    const bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'' || c == '-' || c == ' ';
    if (!keep) continue;
    if (c == ' ') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

/// Tokens of a caption after normalization.
inline std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> toks;
  const std::string norm = normalize(text);
  std::size_t start = 0;
  while (start < norm.size()) {
    std::size_t end = norm.find(' ', start);
    if (end == std::string::npos) end = norm.size();
    toks.emplace_back(norm.substr(start, end - start));
    start = end + 1;
  }
  return toks;
}

/// Token <-> id bijection. Ids 0, 1, 2 are <pad>, <bos>, <eos>.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int bos_id = 1;
  static constexpr int eos_id = 2;
  static constexpr int num_specials = 3;

  Vocabulary() {
    push(std::string(kPad), 0);
    push(std::string(kBos), 0);
    push(std::string(kEos), 0);
  }

  /// Appends a regular token; throws on duplicates.
  int add(const std::string& token, std::uint64_t count = 0) {
    if (token.empty()) throw DataError("vocabulary: empty token");
    if (index_.count(token)) throw DataError("vocabulary: duplicate token '" + token + "'");
    return push(token, count);
  }

  std::optional<int> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(std::string_view token) const { return find(token).has_value(); }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::uint64_t count(int id) const { return counts_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  static bool is_special(int id) { return id >= 0 && id < num_specials; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Line-oriented `id<TAB>token<TAB>count`.
  std::string serialize() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << i << '\t' << tokens_[i] << '\t' << counts_[i] << '\n';
    return os.str();
  }

  static Vocabulary parse(std::string_view text) {
    Vocabulary v;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto t1 = line.find('\t');
      const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
      if (t2 == std::string::npos) throw DataError("vocabulary line " + std::to_string(lineno) + ": expected 3 fields");
      std::size_t id = 0;
      std::uint64_t count = 0;
      const auto idf = std::string_view(line).substr(0, t1);
      const auto cf = std::string_view(line).substr(t2 + 1);
      if (std::from_chars(idf.data(), idf.data() + idf.size(), id).ec != std::errc{} ||
          std::from_chars(cf.data(), cf.data() + cf.size(), count).ec != std::errc{})
        throw DataError("vocabulary line " + std::to_string(lineno) + ": bad number");
      const std::string tok = line.substr(t1 + 1, t2 - t1 - 1);
      if (id < static_cast<std::size_t>(num_specials)) {
        if (tok != v.tokens_[id]) throw DataError("vocabulary line " + std::to_string(lineno) + ": special id mismatch");
        continue;
      }
      if (id != v.size()) throw DataError("vocabulary line " + std::to_string(lineno) + ": ids must be consecutive");
      v.add(tok, count);
    }
    return v;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.counts_ == b.counts_;
  }

 private:
  int push(std::string token, std::uint64_t count) {
    const int id = static_cast<int>(tokens_.size());
    index_.emplace(token, id);
    tokens_.push_back(std::move(token));
    counts_.push_back(count);
    return id;
  }

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, int> index_;
};

/// Keeps tokens occurring strictly more than `min_occurrences` times.
/// Ids: specials first, then by descending count, ties alphabetical.
inline Vocabulary build_vocab(const std::vector<std::string>& captions, std::uint64_t min_occurrences) {
  if (captions.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::uint64_t> counts;
  for (const auto& c : captions)
    for (auto& w : words(c)) ++counts[w];
  if (counts.empty()) throw DataError("build_vocab: corpus contains no tokens");
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (auto& [w, n] : counts)
    if (n > min_occurrences) kept.emplace_back(w, n);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [w, n] : kept) v.add(w, n);
  return v;
}

/// Ids of in-vocabulary words; unknown words are dropped. No <bos>/<eos>.
inline std::vector<int> tokenize(std::string_view caption, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& w : words(caption))
    if (auto id = vocab.find(w); id && !Vocabulary::is_special(*id)) ids.push_back(*id);
  return ids;
}

/// Space-joined tokens. Specials are skipped and decoding stops at <eos>.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::eos_id) break;
    if (Vocabulary::is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

/// Ordered, duplicate-free concept tokens.
struct ConceptList {
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size(); }

  static ConceptList make(std::vector<std::string> toks) {
    std::unordered_set<std::string> seen;
    for (const auto& t : toks) {
      if (t.empty()) throw DataError("concept list: empty token");
      if (!seen.insert(t).second) throw DataError("concept list: duplicate concept '" + t + "'");
    }
    return ConceptList{std::move(toks)};
  }

  /// Every non-special vocabulary word, in id order.
  static ConceptList all_words(const Vocabulary& vocab) {
    std::vector<std::string> toks(vocab.tokens().begin() + Vocabulary::num_specials, vocab.tokens().end());
    return make(std::move(toks));
  }

  /// One token per line; blank lines and '#' comments ignored.
  static ConceptList parse(std::string_view text) {
    std::vector<std::string> toks;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
      const auto w = normalize(line);
      if (w.empty() || line.front() == '#') continue;
      toks.push_back(w);
    }
    return make(std::move(toks));
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens) out += t + '\n';
    return out;
  }
};

/// Concept representation X: one row per concept, in ConceptList order.
struct EmbeddingMatrix {
  std::vector<std::string> tokens;
  Tensor<double> values;  // [|C|, D_emb]

  std::size_t rows() const { return tokens.size(); }
  std::size_t dim() const { return values.cols(); }
};

inline constexpr std::string_view kEmbeddingMagic = "PTSNEMB1";

/// Raw embedding table as stored on disk (file order).
struct EmbeddingTable {
  std::vector<std::string> tokens;
  std::vector<std::vector<double>> vectors;
};

inline EmbeddingTable parse_embeddings_text(std::string_view text) {
  EmbeddingTable t;
  std::size_t dim = 0, lineno = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string_view> fields;
    std::size_t p = 0;
    while (p < line.size()) {
      while (p < line.size() && line[p] == ' ') ++p;
      if (p >= line.size()) break;
      std::size_t q = line.find(' ', p);
      if (q == std::string_view::npos) q = line.size();
      fields.push_back(line.substr(p, q - p));
      p = q;
    }
    if (fields.empty()) continue;
    const auto where = "embedding file line " + std::to_string(lineno);
    if (fields.size() < 2) throw DataError(where + ": expected token followed by values");
    std::vector<double> vec;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      double v = 0;
      auto f = fields[i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(v))
        throw DataError(where + ": invalid number '" + std::string(f) + "'");
      vec.push_back(v);
    }
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim)
      throw DataError(where + ": expected " + std::to_string(dim) + " values, found " + std::to_string(vec.size()));
    t.tokens.emplace_back(fields[0]);
    t.vectors.push_back(std::move(vec));
  }
  return t;
}

inline EmbeddingTable parse_embeddings_binary(io::BinaryReader r) {
  r.expect_magic(kEmbeddingMagic);
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  if (dim == 0 && count > 0) r.fail("zero embedding dimension");
  EmbeddingTable t;
  for (std::uint32_t i = 0; i < count; ++i) t.tokens.push_back(r.str());
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<double> vec(dim);
    for (auto& v : vec) {
      v = r.f32();
      if (!std::isfinite(v)) r.fail("non-finite embedding value");
    }
    t.vectors.push_back(std::move(vec));
  }
  r.expect_end();
  return t;
}

inline EmbeddingTable read_embedding_table(const std::string& path) {
  auto reader = io::BinaryReader::from_file(path);
  if (reader.starts_with(kEmbeddingMagic)) return parse_embeddings_binary(std::move(reader));
  return parse_embeddings_text(io::read_text_file(path));
}

inline std::string format_embeddings_text(const std::vector<std::string>& tokens, const Tensor<double>& values) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    os << tokens[r];
    for (double v : values.row(r)) os << ' ' << v;
    os << '\n';
  }
  return os.str();
}

inline io::BinaryWriter format_embeddings_binary(const std::vector<std::string>& tokens, const Tensor<double>& values) {
  io::BinaryWriter w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(tokens.size()));
  w.u32(static_cast<std::uint32_t>(values.cols()));
  for (const auto& t : tokens) w.str(t);
  for (double v : values.storage()) w.f32(static_cast<float>(v));
  return w;
}

enum class EmbeddingFormat { text, binary };

inline void write_embeddings(const std::string& path, const std::vector<std::string>& tokens,
                             const Tensor<double>& values, EmbeddingFormat fmt) {
  if (tokens.size() != values.rows()) throw DataError("write_embeddings: token/row count mismatch");
  if (fmt == EmbeddingFormat::text)
    io::write_text_file(path, format_embeddings_text(tokens, values));
  else
    format_embeddings_binary(tokens, values).save(path);
}

struct EmbeddingLoad {
  ConceptList concepts;    // concepts that were found, original order
  EmbeddingMatrix matrix;  // aligned with `concepts`
  std::vector<std::string> missing;
};

/// Aligns embedding rows to concept order. Concepts absent from the table
/// are reported in `missing` and dropped; more than `max_miss_rate` of
/// them missing is an error.
inline EmbeddingLoad align_embeddings(const EmbeddingTable& table, const ConceptList& concepts,
                                      double max_miss_rate = 0.0) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < table.tokens.size(); ++i)
    if (!where.emplace(table.tokens[i], i).second)
      throw DataError("embedding table: duplicate token '" + table.tokens[i] + "'");
  EmbeddingLoad out;
  std::vector<std::size_t> rows;
  for (const auto& c : concepts.tokens) {
    auto it = where.find(c);
    if (it == where.end()) {
      out.missing.push_back(c);
    } else {
      out.concepts.tokens.push_back(c);
      rows.push_back(it->second);
    }
  }
  const double miss_rate = concepts.size() ? static_cast<double>(out.missing.size()) / concepts.size() : 0.0;
  if (miss_rate > max_miss_rate || rows.empty()) {
    std::string list;
    for (std::size_t i = 0; i < out.missing.size() && i < 10; ++i) list += (i ? ", " : "") + out.missing[i];
    throw DataError("embeddings missing for " + std::to_string(out.missing.size()) + " of " +
                    std::to_string(concepts.size()) + " concepts (" + list + ")");
  }
  const std::size_t dim = table.vectors[rows.front()].size();
  out.matrix.tokens = out.concepts.tokens;
  out.matrix.values = Tensor<double>::matrix(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(table.vectors[rows[r]].begin(), table.vectors[rows[r]].end(), out.matrix.values.row(r).begin());
  return out;
}

inline EmbeddingLoad load_embeddings(const std::string& path, const ConceptList& concepts,
                                     double max_miss_rate = 0.0) {
  return align_embeddings(read_embedding_table(path), concepts, max_miss_rate);
}

}  // namespace ptsn::lexicon
