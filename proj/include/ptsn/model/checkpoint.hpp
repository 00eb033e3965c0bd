#pragma once

#include <map>
#include <string>
#include <vector>

#include "ptsn/config.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/io.hpp"
#include "ptsn/model/captioner.hpp"

namespace ptsn::model {

inline constexpr const char* kCheckpointMagic = "PTSNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Container behind PTSNCKPT files: the model config snapshot, free-form
/// metadata, and named tensors stored as f32 or f64.
struct Checkpoint {
  config::KeyValues model_config;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<double>>> tensors;
  /// 32 or 64: payload precision.
  std::uint32_t bits = 64;

  const Tensor<double>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  void save(const std::string& path) const {
    if (bits != 32 && bits != 64) throw ConfigError("checkpoint: payload must be 32 or 64 bit");
    io::BinaryWriter w;
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(bits);
    w.str(model_config.serialize());
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      w.str(k);
      w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      w.str(name);
      w.u32(static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) w.u64(d);
      for (double v : t.storage()) bits == 64 ? w.f64(v) : w.f32(static_cast<float>(v));
    }
    w.save(path);
  }

  static Checkpoint load(const std::string& path) {
    auto r = io::BinaryReader::from_file(path);
    r.expect_magic(kCheckpointMagic);
    if (r.u32() != kCheckpointVersion) r.fail("unsupported checkpoint version");
    Checkpoint c;
    c.bits = r.u32();
    if (c.bits != 32 && c.bits != 64) r.fail("bad payload precision");
    c.model_config = config::KeyValues::parse(r.str(), path + " (config)");
    const auto n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      auto k = r.str();
      c.meta[k] = r.str();
    }
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto name = r.str();
      const auto rank = r.u32();
      if (rank == 0 || rank > 8) r.fail("bad tensor rank for " + name);
      Shape shape(rank);
      std::uint64_t numel = 1;
      for (auto& d : shape) {
        d = r.u64();
        if (d == 0 || d > (std::uint64_t{1} << 32)) r.fail("bad dimension for " + name);
        numel *= d;
      }
      if (numel * (c.bits / 8) > r.remaining()) r.fail("truncated tensor " + name);
      Tensor<double> t(shape);
      for (auto& v : t.storage()) v = c.bits == 64 ? r.f64() : static_cast<double>(r.f32());
      c.tensors.emplace_back(std::move(name), std::move(t));
    }
    r.expect_end();
    return c;
  }
};

/// Snapshot of a model's config and every parameter. 64-bit models store
/// f64 so a reload is bit-identical; 32-bit models store f32.
template <class T>
Checkpoint make_checkpoint(Captioner<T>& m) {
  Checkpoint c;
  c.bits = sizeof(T) == 8 ? 64 : 32;
  c.model_config = m.config().to_kv();
  for (auto* p : m.parameters()) c.tensors.emplace_back(p->name, p->value.template cast<double>());
  return c;
}

/// Copies checkpoint tensors into a model built from the same config.
/// Missing parameters or shape mismatches are data errors.
template <class T>
void load_parameters(Captioner<T>& m, const Checkpoint& c) {
  for (auto* p : m.parameters()) {
    const auto* t = c.find(p->name);
    if (!t) throw DataError("checkpoint has no parameter '" + p->name + "'");
    if (t->shape() != p->value.shape())
      throw DataError("checkpoint parameter '" + p->name + "' has shape " + shape_str(t->shape()) +
                      ", model expects " + shape_str(p->value.shape()));
    p->value = t->template cast<T>();
    p->grad = Tensor<T>(p->value.shape());
  }
}

/// Rebuilds a model from a checkpoint alone.
template <class T>
Captioner<T> captioner_from_checkpoint(const Checkpoint& c) {
  const auto cfg = ModelConfig::from_kv(c.model_config);
  std::map<std::size_t, Tensor<double>> protos;
  for (auto count : cfg.schedule.distinct()) {
    const auto* t = c.find("proto." + std::to_string(count));
    if (!t) throw DataError("checkpoint has no prototypes for level size " + std::to_string(count));
    protos.emplace(count, *t);
  }
  Captioner<T> m(cfg, protos, 0);
  load_parameters(m, c);
  return m;
}

}  // namespace ptsn::model
