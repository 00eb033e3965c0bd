#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/io.hpp"
#include "ptsn/model/grid.hpp"

namespace ptsn {

/// One image: its grid features and every reference caption.
template <class T>
struct CaptionSample {
  std::string id;
  model::GridFeatures<T> features;
  std::vector<std::string> refs;
};

inline constexpr const char* kCaptionsFile = "captions.tsv";

/// Writes `<dir>/<id>.grd` per sample plus `<dir>/captions.tsv` with one
/// `id<TAB>caption` line per reference, in sample order.
template <class T>
void write_caption_split(const std::filesystem::path& dir, const std::vector<CaptionSample<T>>& samples) {
  std::filesystem::create_directories(dir);
  std::string tsv;
  for (const auto& s : samples) {
    if (s.id.empty() || s.id.find_first_of("\t\n/") != std::string::npos)
      throw DataError("sample id '" + s.id + "' must be non-empty without tabs, newlines or slashes");
    model::save_grid_features((dir / (s.id + ".grd")).string(), s.features);
    for (const auto& r : s.refs) tsv += s.id + "\t" + r + "\n";
  }
  io::write_text_file((dir / kCaptionsFile).string(), tsv);
}

/// References of a split, grouped by sample id in first-appearance order
/// of captions.tsv. Grid files are not read.
inline std::vector<std::pair<std::string, std::vector<std::string>>> read_caption_refs(const std::filesystem::path& dir) {
  const auto tsv_path = dir / kCaptionsFile;
  if (!std::filesystem::exists(tsv_path)) throw DataError("missing " + tsv_path.string());
  std::istringstream is(io::read_text_file(tsv_path.string()));
  std::vector<std::pair<std::string, std::vector<std::string>>> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw DataError(tsv_path.string() + ":" + std::to_string(lineno) + ": expected id<TAB>caption");
    const std::string id = line.substr(0, tab);
    auto [it, fresh] = index.try_emplace(id, out.size());
    if (fresh) out.push_back({id, {}});
    out[it->second].second.push_back(line.substr(tab + 1));
  }
  if (out.empty()) throw DataError(tsv_path.string() + ": no captions");
  return out;
}

/// Reads a split written by write_caption_split. Samples come back in
/// first-appearance order of captions.tsv.
template <class T>
std::vector<CaptionSample<T>> read_caption_split(const std::filesystem::path& dir, std::size_t expected_dim = 0) {
  std::vector<CaptionSample<T>> out;
  for (auto& [id, refs] : read_caption_refs(dir))
    out.push_back({id, model::load_grid_features<T>((dir / (id + ".grd")).string(), expected_dim), std::move(refs)});
  return out;
}

}  // namespace ptsn
