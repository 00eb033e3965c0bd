#pragma once

#include <openssl/evp.h>

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/io.hpp"

namespace ptsn::cli {

inline std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw DataError("sha1 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Git blob id: sha1("blob <size>\0" + content).
inline std::string git_blob_hash(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + std::string(1, '\0') + content);
}

/// Records of a command run: effective config, seed and content hashes of
/// inputs and outputs. Directories contribute one entry per regular file.
class Manifest {
 public:
  Manifest(std::string command, const std::string& config_text, std::uint64_t seed) {
    j_["command"] = std::move(command);
    j_["config_sha1"] = sha1_hex(config_text);
    j_["config"] = config_text;
    j_["seed"] = seed;
    j_["inputs"] = nlohmann::json::object();
    j_["outputs"] = nlohmann::json::object();
  }

  void input(const std::filesystem::path& p) { add("inputs", p); }
  void output(const std::filesystem::path& p) { add("outputs", p); }

  void save(const std::filesystem::path& p) const { io::write_text_file(p.string(), j_.dump(2) + "\n"); }

  const nlohmann::json& json() const { return j_; }

 private:
  void add(const char* where, const std::filesystem::path& p) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) j_[where][f.string()] = git_blob_hash(io::read_text_file(f.string()));
    } else {
      j_[where][p.string()] = git_blob_hash(io::read_text_file(p.string()));
    }
  }

  nlohmann::json j_;
};

}  // namespace ptsn::cli
