#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/numerics/rng.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::synthetic {

/// Three-level Gaussian hierarchy: super-centers, sub-centers around them,
/// concepts around sub-centers (unit within-cluster std per dimension).
///
/// Sibling sub-centers sit exactly `separation` apart and super-centers
/// `separation^2` apart whenever the counts fit in `dim` orthogonal
/// directions; otherwise directions are random unit vectors.
struct PlantedTreeSpec {
  std::size_t n_super = 8;
  std::size_t n_sub_per_super = 5;
  std::size_t concepts_per_sub = 10;
  std::size_t dim = 16;
  double separation = 8.0;
  std::uint64_t seed = 1;

  std::size_t n_sub() const { return n_super * n_sub_per_super; }
  std::size_t n_concepts() const { return n_sub() * concepts_per_sub; }

  void validate() const {
    if (n_super < 1 || n_sub_per_super < 1 || concepts_per_sub < 1 || dim < 1)
      throw ConfigError("planted spec: all counts must be >= 1");
    if (!(separation > 0.0)) throw ConfigError("planted spec: separation must be > 0");
  }
};

struct PlantedEmbeddings {
  Tensor<double> x;  // [n_concepts, dim]
  std::vector<int> sub_labels;
  std::vector<int> super_labels;
  Tensor<double> sub_centers;
  Tensor<double> super_centers;
};

namespace detail {

/// `count` unit vectors in R^dim, mutually orthogonal when count <= dim.
inline std::vector<std::vector<double>> directions(std::size_t count, std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    for (;;) {
      for (auto& e : v) e = rng.normal();
      if (i < dim) {
        for (const auto& u : out) {
          double dot = 0.0;
          for (std::size_t d = 0; d < dim; ++d) dot += v[d] * u[d];
          for (std::size_t d = 0; d < dim; ++d) v[d] -= dot * u[d];
        }
      }
      double norm = 0.0;
      for (double e : v) norm += e * e;
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (auto& e : v) e /= norm;
        break;
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace detail

inline PlantedEmbeddings gen_planted_embeddings(const PlantedTreeSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t dim = spec.dim;
  PlantedEmbeddings out;
  out.super_centers = Tensor<double>::matrix(spec.n_super, dim);
  out.sub_centers = Tensor<double>::matrix(spec.n_sub(), dim);
  out.x = Tensor<double>::matrix(spec.n_concepts(), dim);

  const double super_radius = spec.separation * spec.separation / std::sqrt(2.0);
  const double sub_radius = spec.separation / std::sqrt(2.0);
  const auto super_dirs = detail::directions(spec.n_super, dim, rng);
  std::size_t row = 0;
  for (std::size_t s = 0; s < spec.n_super; ++s) {
    for (std::size_t d = 0; d < dim; ++d) out.super_centers(s, d) = super_radius * super_dirs[s][d];
    const auto sub_dirs = detail::directions(spec.n_sub_per_super, dim, rng);
    for (std::size_t j = 0; j < spec.n_sub_per_super; ++j) {
      const std::size_t sub = s * spec.n_sub_per_super + j;
      for (std::size_t d = 0; d < dim; ++d)
        out.sub_centers(sub, d) = out.super_centers(s, d) + sub_radius * sub_dirs[j][d];
      for (std::size_t c = 0; c < spec.concepts_per_sub; ++c, ++row) {
        for (std::size_t d = 0; d < dim; ++d) out.x(row, d) = out.sub_centers(sub, d) + rng.normal();
        out.sub_labels.push_back(static_cast<int>(sub));
        out.super_labels.push_back(static_cast<int>(s));
      }
    }
  }
  return out;
}

}  // namespace ptsn::synthetic
