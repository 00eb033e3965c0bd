#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "ptsn/errors.hpp"
#include "ptsn/io.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::model {

/// N_g x D grid features with an optional h x w layout (0 x 0 when absent).
template <class T>
struct GridFeatures {
  Tensor<T> g;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t cells() const { return g.rows(); }
  std::size_t dim() const { return g.cols(); }
  bool has_layout() const { return h != 0 || w != 0; }

  void validate() const {
    if (g.rank() != 2) throw ShapeError("grid features must be a matrix, got " + shape_str(g.shape()));
    if (has_layout() && h * w != g.rows())
      throw ShapeError("grid layout " + std::to_string(h) + "x" + std::to_string(w) + " does not match " +
                       std::to_string(g.rows()) + " cells");
  }
};

inline constexpr const char* kGridMagic = "PTSNGRD1";

template <class T>
io::BinaryWriter format_grid_features(const GridFeatures<T>& f) {
  f.validate();
  io::BinaryWriter w;
  w.magic(kGridMagic);
  w.u32(static_cast<std::uint32_t>(f.cells()));
  w.u32(static_cast<std::uint32_t>(f.dim()));
  w.u32(static_cast<std::uint32_t>(f.h));
  w.u32(static_cast<std::uint32_t>(f.w));
  for (T v : f.g.storage()) w.f32(static_cast<float>(v));
  return w;
}

template <class T>
void save_grid_features(const std::string& path, const GridFeatures<T>& f) {
  format_grid_features(f).save(path);
}

template <class T>
GridFeatures<T> parse_grid_features(io::BinaryReader& r, std::size_t expected_dim = 0) {
  r.expect_magic(kGridMagic);
  const std::uint32_t n = r.u32(), d = r.u32(), h = r.u32(), w = r.u32();
  if (n == 0 || d == 0) r.fail("grid features need N_g >= 1 and D >= 1");
  if (expected_dim != 0 && d != expected_dim)
    r.fail("feature width " + std::to_string(d) + " does not match model width " + std::to_string(expected_dim));
  if ((h != 0 || w != 0) && static_cast<std::uint64_t>(h) * w != n)
    r.fail("layout " + std::to_string(h) + "x" + std::to_string(w) + " does not match " + std::to_string(n) + " cells");
  if (r.remaining() != static_cast<std::size_t>(n) * d * 4) r.fail("payload size does not match header");
  GridFeatures<T> f{Tensor<T>::matrix(n, d), h, w};
  for (auto& v : f.g.storage()) {
    const float x = r.f32();
    if (!std::isfinite(x)) r.fail("non-finite feature value");
    v = static_cast<T>(x);
  }
  r.expect_end();
  return f;
}

/// Reads a PTSNGRD1 file; expected_dim = 0 skips the width check.
template <class T>
GridFeatures<T> load_grid_features(const std::string& path, std::size_t expected_dim = 0) {
  auto r = io::BinaryReader::from_file(path);
  return parse_grid_features<T>(r, expected_dim);
}

}  // namespace ptsn::model
