#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ptsn/errors.hpp"
#include "ptsn/numerics/rng.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::tree {

enum class ClusterMethod { kmeans, gmm };

inline std::string method_name(ClusterMethod m) { return m == ClusterMethod::kmeans ? "kmeans" : "gmm"; }

inline ClusterMethod parse_method(const std::string& s) {
  if (s == "kmeans" || s == "k-means") return ClusterMethod::kmeans;
  if (s == "gmm") return ClusterMethod::gmm;
  throw ConfigError("unknown clustering method '" + s + "' (expected kmeans or gmm)");
}

struct ClusterConfig {
  ClusterMethod method = ClusterMethod::kmeans;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-8;
  /// k-means++ restarts; the lowest-distortion run wins.
  int n_init = 10;
  /// Lower bound on every GMM variance.
  double var_floor = 1e-6;
  /// Weight level-2+ centroids by their member counts.
  bool weighted_levels = false;

  void validate() const {
    if (max_iters < 1) throw ConfigError("cluster config: max_iters must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("cluster config: tol must be > 0");
    if (n_init < 1) throw ConfigError("cluster config: n_init must be >= 1");
    if (!(var_floor > 0.0)) throw ConfigError("cluster config: var_floor must be > 0");
  }
};

struct ClusterResult {
  Tensor<double> centroids;  // [k, D]
  std::vector<int> assignments;
  double distortion = 0.0;
  /// Distortion after every centroid update of the winning run.
  std::vector<double> history;
  int iterations = 0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline void check_points(const Tensor<double>& x, std::size_t k, std::span<const double> weights) {
  if (x.rank() != 2) throw ShapeError("clustering: points must be a matrix");
  if (k == 0) throw ConfigError("clustering: k must be >= 1");
  if (k > x.rows())
    throw ConfigError("clustering: k = " + std::to_string(k) + " exceeds number of points " +
                      std::to_string(x.rows()));
  if (!x.all_finite()) throw DataError("clustering: non-finite point coordinates");
  if (!weights.empty()) {
    if (weights.size() != x.rows()) throw ShapeError("clustering: one weight per point required");
    for (double w : weights)
      if (!(w > 0.0) || !std::isfinite(w)) throw DataError("clustering: weights must be positive");
  }
}

inline std::vector<int> nearest(const Tensor<double>& x, const Tensor<double>& c, std::vector<double>* d2 = nullptr) {
  std::vector<int> a(x.rows());
  if (d2) d2->assign(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < c.rows(); ++j) {
      const double d = sq_dist(x.row(i), c.row(j));
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    a[i] = arg;
    if (d2) (*d2)[i] = best;
  }
  return a;
}

inline Tensor<double> weighted_means(const Tensor<double>& x, const std::vector<int>& a, std::size_t k,
                                     const std::vector<double>& w, const Tensor<double>& previous) {
  Tensor<double> c = Tensor<double>::matrix(k, x.cols());
  std::vector<double> mass(k, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto j = static_cast<std::size_t>(a[i]);
    mass[j] += w[i];
    for (std::size_t d = 0; d < x.cols(); ++d) c(j, d) += w[i] * x(i, d);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (mass[j] > 0.0) {
      for (std::size_t d = 0; d < x.cols(); ++d) c(j, d) /= mass[j];
    } else {
      for (std::size_t d = 0; d < x.cols(); ++d) c(j, d) = previous(j, d);
    }
  }
  return c;
}

inline double distortion(const Tensor<double>& x, const std::vector<int>& a, const Tensor<double>& c,
                         const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += w[i] * sq_dist(x.row(i), c.row(static_cast<std::size_t>(a[i])));
  return s;
}

/// Empty clusters take the point farthest from its centroid (among clusters
/// that keep at least one member), which then becomes that cluster's sole
/// member.
inline void repair_empty(const Tensor<double>& x, std::vector<int>& a, Tensor<double>& c) {
  const std::size_t k = c.rows();
  std::vector<std::size_t> size(k, 0);
  for (int j : a) ++size[static_cast<std::size_t>(j)];
  for (std::size_t j = 0; j < k; ++j) {
    if (size[j] > 0) continue;
    double far = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto owner = static_cast<std::size_t>(a[i]);
      if (size[owner] < 2) continue;
      const double d = sq_dist(x.row(i), c.row(owner));
      if (d > far) {
        far = d;
        arg = i;
      }
    }
    --size[static_cast<std::size_t>(a[arg])];
    a[arg] = static_cast<int>(j);
    size[j] = 1;
    std::copy(x.row(arg).begin(), x.row(arg).end(), c.row(j).begin());
  }
}

inline Tensor<double> kmeanspp_seeds(const Tensor<double>& x, std::size_t k, const std::vector<double>& w, Rng& rng) {
  Tensor<double> c = Tensor<double>::matrix(k, x.cols());
  std::size_t first = rng.categorical(w);
  std::copy(x.row(first).begin(), x.row(first).end(), c.row(0).begin());
  std::vector<double> d2(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) d2[i] = sq_dist(x.row(i), c.row(0));
  std::vector<double> score(x.rows());
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<double> cand(x.rows()), best_d2(x.rows());
  for (std::size_t j = 1; j < k; ++j) {
    for (std::size_t i = 0; i < x.rows(); ++i) score[i] = w[i] * d2[i];
    double best_pot = std::numeric_limits<double>::infinity();
    std::size_t pick = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t trial = rng.categorical(score);
      double pot = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        cand[i] = std::min(d2[i], sq_dist(x.row(i), x.row(trial)));
        pot += w[i] * cand[i];
      }
      if (pot < best_pot) {
        best_pot = pot;
        pick = trial;
        best_d2.swap(cand);
      }
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    d2 = best_d2;
  }
  return c;
}

/// Single-point transfers (Hartigan's rule) that strictly lower the
/// distortion, applied until none remains. Centroids stay exact member means.
/// Returns whether any point moved.
inline bool transfer_pass(const Tensor<double>& x, std::vector<int>& a, Tensor<double>& c,
                          const std::vector<double>& w) {
  const std::size_t k = c.rows(), dim = x.cols();
  std::vector<double> mass(k, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) mass[static_cast<std::size_t>(a[i])] += w[i];
  bool any = false;
  for (int sweep = 0; sweep < 1000; ++sweep) {
    bool moved = false;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto from = static_cast<std::size_t>(a[i]);
      if (mass[from] <= w[i] * (1.0 + 1e-12)) continue;
      const double remove = w[i] * mass[from] / (mass[from] - w[i]) * sq_dist(x.row(i), c.row(from));
      double best_gain = 0.0;
      std::size_t to = from;
      for (std::size_t j = 0; j < k; ++j) {
        if (j == from) continue;
        const double add = w[i] * mass[j] / (mass[j] + w[i]) * sq_dist(x.row(i), c.row(j));
        const double gain = remove - add;
        if (gain > best_gain + 1e-12 * remove) {
          best_gain = gain;
          to = j;
        }
      }
      if (to == from) continue;
      for (std::size_t d = 0; d < dim; ++d) {
        c(from, d) = (c(from, d) * mass[from] - w[i] * x(i, d)) / (mass[from] - w[i]);
        c(to, d) = (c(to, d) * mass[to] + w[i] * x(i, d)) / (mass[to] + w[i]);
      }
      mass[from] -= w[i];
      mass[to] += w[i];
      a[i] = static_cast<int>(to);
      moved = any = true;
    }
    if (!moved) break;
  }
  return any;
}

/// Lloyd iterations from the given centroids, then single-point transfers
/// until neither changes anything.
inline ClusterResult local_search(const Tensor<double>& x, Tensor<double> c, const std::vector<double>& w,
                                  const ClusterConfig& cfg) {
  const std::size_t k = c.rows();
  ClusterResult r;
  std::vector<int> a = nearest(x, c);
  for (int it = 0; it < cfg.max_iters; ++it) {
    repair_empty(x, a, c);
    c = weighted_means(x, a, k, w, c);
    const double dist = distortion(x, a, c, w);
    r.history.push_back(dist);
    r.iterations = it + 1;
    auto next = nearest(x, c);
    if (next == a) break;
    const double before = dist;
    a = std::move(next);
    if (it + 1 == cfg.max_iters) {
      repair_empty(x, a, c);
      c = weighted_means(x, a, k, w, c);
      r.history.push_back(distortion(x, a, c, w));
      break;
    }
    const double after = distortion(x, a, c, w);
    if (before - after <= cfg.tol * std::max(before, 1e-300) && before > 0.0) {
      repair_empty(x, a, c);
      c = weighted_means(x, a, k, w, c);
      r.history.push_back(distortion(x, a, c, w));
      break;
    }
  }
  // Lloyd fixed points can still admit improving single-point moves; take
  // them, then let Lloyd settle again.
  for (int round = 0; round < cfg.max_iters; ++round) {
    if (!transfer_pass(x, a, c, w)) break;
    c = weighted_means(x, a, k, w, c);
    r.history.push_back(distortion(x, a, c, w));
    auto next = nearest(x, c);
    if (next == a) break;
    a = std::move(next);
    repair_empty(x, a, c);
    c = weighted_means(x, a, k, w, c);
    r.history.push_back(distortion(x, a, c, w));
  }
  r.distortion = r.history.back();
  r.centroids = std::move(c);
  r.assignments = std::move(a);
  return r;
}

/// Distortion increase from deleting each cluster and sending its members to
/// their second-nearest centroid.
inline std::vector<double> removal_costs(const Tensor<double>& x, const ClusterResult& r, const std::vector<double>& w) {
  const std::size_t k = r.centroids.rows();
  std::vector<double> cost(k, 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto own = static_cast<std::size_t>(r.assignments[i]);
    double second = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (j != own) second = std::min(second, sq_dist(x.row(i), r.centroids.row(j)));
    cost[own] += w[i] * (second - sq_dist(x.row(i), r.centroids.row(own)));
  }
  return cost;
}

/// Seeds, local search, then centroid relocation: the cheapest-to-delete
/// centroids are moved onto the worst-fit point and kept if the local search
/// from there ends lower. Fixes seedings that put two centroids in one
/// natural cluster and none in another.
inline ClusterResult lloyd(const Tensor<double>& x, std::size_t k, const std::vector<double>& w,
                           const ClusterConfig& cfg, Rng& rng) {
  ClusterResult r = local_search(x, kmeanspp_seeds(x, k, w, rng), w, cfg);
  if (k < 2) return r;
  constexpr std::size_t kCandidates = 5;
  for (int round = 0; round < cfg.max_iters; ++round) {
    const auto cost = removal_costs(x, r, w);
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto p, auto q) { return cost[p] < cost[q]; });
    bool improved = false;
    for (std::size_t t = 0; t < std::min(k, kCandidates) && !improved; ++t) {
      const std::size_t j = order[t];
      double far = -1.0;
      std::size_t arg = 0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        if (static_cast<std::size_t>(r.assignments[i]) == j) continue;
        const double d = w[i] * sq_dist(x.row(i), r.centroids.row(static_cast<std::size_t>(r.assignments[i])));
        if (d > far) {
          far = d;
          arg = i;
        }
      }
      if (far <= 0.0) continue;
      Tensor<double> c = r.centroids;
      std::copy(x.row(arg).begin(), x.row(arg).end(), c.row(j).begin());
      auto trial = local_search(x, std::move(c), w, cfg);
      if (trial.distortion < r.distortion * (1.0 - 1e-12)) {
        auto history = std::move(r.history);
        history.push_back(trial.distortion);
        const int iters = r.iterations + trial.iterations;
        r = std::move(trial);
        r.history = std::move(history);
        r.iterations = iters;
        improved = true;
      }
    }
    if (!improved) break;
  }
  return r;
}

}  // namespace detail

/// Lloyd's algorithm from greedy k-means++ seeds, refined by single-point
/// transfers and centroid relocation; best of cfg.n_init restarts.
/// Optional positive per-point weights turn it into weighted k-means.
inline ClusterResult kmeans(const Tensor<double>& x, std::size_t k, const ClusterConfig& cfg,
                            std::span<const double> weights = {}) {
  cfg.validate();
  detail::check_points(x, k, weights);
  std::vector<double> w = weights.empty() ? std::vector<double>(x.rows(), 1.0)
                                          : std::vector<double>(weights.begin(), weights.end());
  Rng rng(cfg.seed);
  ClusterResult best;
  for (int run = 0; run < cfg.n_init; ++run) {
    auto r = detail::lloyd(x, k, w, cfg, rng);
    if (run == 0 || r.distortion < best.distortion) best = std::move(r);
  }
  return best;
}

struct GmmResult {
  Tensor<double> means;      // [k, D]
  Tensor<double> variances;  // [k, D]
  std::vector<double> mix;
  Tensor<double> responsibilities;  // [n, k]
  std::vector<int> assignments;
  std::vector<double> loglik_history;
};

namespace detail {

inline double log_gauss_diag(std::span<const double> x, std::span<const double> mu, std::span<const double> var) {
  double s = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double diff = x[d] - mu[d];
    s += std::log(2.0 * std::numbers::pi * var[d]) + diff * diff / var[d];
  }
  return -0.5 * s;
}

}  // namespace detail

/// EM for a mixture of diagonal Gaussians, initialized from k-means.
/// Every variance is clamped to cfg.var_floor in the M-step.
inline GmmResult gmm_fit(const Tensor<double>& x, std::size_t k, const ClusterConfig& cfg,
                         std::span<const double> weights = {}) {
  cfg.validate();
  detail::check_points(x, k, weights);
  const std::size_t n = x.rows(), dim = x.cols();
  std::vector<double> w = weights.empty() ? std::vector<double>(n, 1.0) : std::vector<double>(weights.begin(), weights.end());
  const double total_w = std::accumulate(w.begin(), w.end(), 0.0);

  ClusterConfig init_cfg = cfg;
  init_cfg.method = ClusterMethod::kmeans;
  auto init = kmeans(x, k, init_cfg, w);

  // Global variance is the fallback for singleton clusters.
  std::vector<double> gmean(dim, 0.0), gvar(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) gmean[d] += w[i] * x(i, d) / total_w;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) gvar[d] += w[i] * (x(i, d) - gmean[d]) * (x(i, d) - gmean[d]) / total_w;

  GmmResult g;
  g.means = init.centroids;
  g.variances = Tensor<double>::matrix(k, dim);
  g.mix.assign(k, 0.0);
  {
    std::vector<double> mass(k, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(init.assignments[i]);
      mass[j] += w[i];
      ++count[j];
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = x(i, d) - g.means(j, d);
        g.variances(j, d) += w[i] * diff * diff;
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      g.mix[j] = mass[j] / total_w;
      for (std::size_t d = 0; d < dim; ++d) {
        const double v = count[j] > 1 ? g.variances(j, d) / mass[j] : gvar[d];
        g.variances(j, d) = std::max(v, cfg.var_floor);
      }
    }
  }

  g.responsibilities = Tensor<double>::matrix(n, k);
  std::vector<double> logp(k);
  auto e_step = [&] {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        logp[j] = g.mix[j] > 0.0 ? std::log(g.mix[j]) + detail::log_gauss_diag(x.row(i), g.means.row(j), g.variances.row(j))
                                 : -std::numeric_limits<double>::infinity();
        mx = std::max(mx, logp[j]);
      }
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(logp[j] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < k; ++j) g.responsibilities(i, j) = std::exp(logp[j] - lse);
      ll += w[i] * lse;
    }
    return ll;
  };

  double ll = e_step();
  g.loglik_history.push_back(ll);
  for (int it = 0; it < cfg.max_iters; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      double nj = 0.0;
      for (std::size_t i = 0; i < n; ++i) nj += w[i] * g.responsibilities(i, j);
      g.mix[j] = nj / total_w;
      if (!(nj > 0.0)) continue;  // dead component keeps its parameters
      for (std::size_t d = 0; d < dim; ++d) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += w[i] * g.responsibilities(i, j) * x(i, d);
        g.means(j, d) = m / nj;
      }
      for (std::size_t d = 0; d < dim; ++d) {
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double diff = x(i, d) - g.means(j, d);
          v += w[i] * g.responsibilities(i, j) * diff * diff;
        }
        g.variances(j, d) = std::max(v / nj, cfg.var_floor);
      }
    }
    const double next = e_step();
    g.loglik_history.push_back(next);
    const bool converged = std::abs(next - ll) <= cfg.tol * std::max(std::abs(ll), 1.0);
    ll = next;
    if (converged) break;
  }

  g.assignments.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (g.responsibilities(i, j) > g.responsibilities(i, arg)) arg = j;
    g.assignments[i] = static_cast<int>(arg);
  }
  // A component that wins no point adopts the worst-explained point.
  std::vector<std::size_t> size(k, 0);
  for (int a : g.assignments) ++size[static_cast<std::size_t>(a)];
  for (std::size_t j = 0; j < k; ++j) {
    if (size[j] > 0) continue;
    double worst = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto owner = static_cast<std::size_t>(g.assignments[i]);
      if (size[owner] < 2) continue;
      const double lp = detail::log_gauss_diag(x.row(i), g.means.row(owner), g.variances.row(owner));
      if (lp < worst) {
        worst = lp;
        arg = i;
      }
    }
    --size[static_cast<std::size_t>(g.assignments[arg])];
    g.assignments[arg] = static_cast<int>(j);
    size[j] = 1;
    std::copy(x.row(arg).begin(), x.row(arg).end(), g.means.row(j).begin());
  }
  return g;
}

/// Dispatches to the configured backend; returns prototypes and hard labels.
inline ClusterResult cluster(const Tensor<double>& x, std::size_t k, const ClusterConfig& cfg,
                             std::span<const double> weights = {}) {
  if (cfg.method == ClusterMethod::kmeans) return kmeans(x, k, cfg, weights);
  auto g = gmm_fit(x, k, cfg, weights);
  ClusterResult r;
  r.centroids = std::move(g.means);
  r.assignments = std::move(g.assignments);
  r.iterations = static_cast<int>(g.loglik_history.size());
  std::vector<double> w = weights.empty() ? std::vector<double>(x.rows(), 1.0)
                                          : std::vector<double>(weights.begin(), weights.end());
  r.distortion = detail::distortion(x, r.assignments, r.centroids, w);
  return r;
}

struct PrototypeLevel {
  Tensor<double> centroids;  // [F_l, D_emb]
  /// Level l >= 2: parent (index into this level) of each level-(l-1)
  /// prototype. Empty for level 1.
  std::vector<int> parent_of;

  std::size_t size() const { return centroids.rows(); }
  friend bool operator==(const PrototypeLevel&, const PrototypeLevel&) = default;
};

struct TreeMeta {
  std::string method = "kmeans";
  std::uint64_t seed = 0;
  std::vector<std::size_t> level_sizes;
  friend bool operator==(const TreeMeta&, const TreeMeta&) = default;
};

/// Tree-structured prototypes: levels[0] is the finest level (Z_1).
struct PrototypeTree {
  std::vector<PrototypeLevel> levels;
  /// Level-1 prototype of every concept.
  std::vector<int> concept_members;
  TreeMeta meta;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t num_concepts() const { return concept_members.size(); }

  /// 1-based level access.
  const PrototypeLevel& level(std::size_t l) const {
    if (l < 1 || l > levels.size())
      throw std::out_of_range("prototype tree: level " + std::to_string(l) + " outside [1, " +
                              std::to_string(levels.size()) + "]");
    return levels[l - 1];
  }

  /// Index of the level-`l` prototype that concept `c` descends into.
  int ancestor(std::size_t c, std::size_t l) const {
    level(l);
    int idx = concept_members.at(c);
    for (std::size_t k = 2; k <= l; ++k) idx = levels[k - 1].parent_of[static_cast<std::size_t>(idx)];
    return idx;
  }

  /// Index of the level-`l` prototype above level-`from` prototype `p`.
  int ancestor_of_prototype(std::size_t from, int p, std::size_t l) const {
    for (std::size_t k = from + 1; k <= l; ++k) p = level(k).parent_of.at(static_cast<std::size_t>(p));
    return p;
  }

  /// Throws unless sizes decrease strictly, every link is in range and no
  /// prototype is childless.
  void validate() const {
    if (levels.empty()) throw DataError("prototype tree: no levels");
    auto check_links = [](const std::vector<int>& links, std::size_t parents, const std::string& what) {
      std::vector<bool> used(parents, false);
      for (int p : links) {
        if (p < 0 || static_cast<std::size_t>(p) >= parents) throw DataError(what + ": link out of range");
        used[static_cast<std::size_t>(p)] = true;
      }
      if (std::find(used.begin(), used.end(), false) != used.end()) throw DataError(what + ": empty prototype");
    };
    check_links(concept_members, levels[0].size(), "prototype tree level 1");
    if (levels[0].size() > concept_members.size()) throw DataError("prototype tree: F_1 exceeds concept count");
    if (!levels[0].parent_of.empty()) throw DataError("prototype tree: level 1 has parent links");
    for (std::size_t l = 1; l < levels.size(); ++l) {
      if (levels[l].size() >= levels[l - 1].size()) throw DataError("prototype tree: level sizes must decrease");
      if (levels[l].parent_of.size() != levels[l - 1].size())
        throw DataError("prototype tree: parent_of size mismatch at level " + std::to_string(l + 1));
      check_links(levels[l].parent_of, levels[l].size(), "prototype tree level " + std::to_string(l + 1));
      if (levels[l].centroids.cols() != levels[0].centroids.cols())
        throw DataError("prototype tree: centroid width differs across levels");
    }
  }

  friend bool operator==(const PrototypeTree&, const PrototypeTree&) = default;
};

inline void validate_level_sizes(const std::vector<std::size_t>& sizes, std::size_t num_concepts) {
  if (sizes.empty()) throw ConfigError("level sizes: at least one level required");
  if (sizes.back() < 1) throw ConfigError("level sizes: every level needs >= 1 prototype");
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] >= sizes[i - 1]) throw ConfigError("level sizes must be strictly decreasing (fine to coarse)");
  if (sizes.front() > num_concepts)
    throw ConfigError("level sizes: F_1 = " + std::to_string(sizes.front()) + " exceeds concept count " +
                      std::to_string(num_concepts));
}

/// Hierarchical clustering: Z_1 clusters the concept embeddings, each
/// further level clusters the previous level's centroids.
inline PrototypeTree build_tree(const Tensor<double>& x, const std::vector<std::size_t>& level_sizes,
                                const ClusterConfig& cfg) {
  cfg.validate();
  validate_level_sizes(level_sizes, x.rows());
  PrototypeTree t;
  t.meta = TreeMeta{method_name(cfg.method), cfg.seed, level_sizes};
  ClusterConfig level_cfg = cfg;
  level_cfg.seed = derive_seed(cfg.seed, 1);
  auto first = cluster(x, level_sizes[0], level_cfg);
  t.concept_members = first.assignments;
  t.levels.push_back(PrototypeLevel{std::move(first.centroids), {}});
  std::vector<double> counts(level_sizes[0], 0.0);
  for (int a : t.concept_members) counts[static_cast<std::size_t>(a)] += 1.0;
  for (std::size_t l = 1; l < level_sizes.size(); ++l) {
    level_cfg.seed = derive_seed(cfg.seed, l + 1);
    const auto& prev = t.levels.back().centroids;
    auto r = cfg.weighted_levels ? cluster(prev, level_sizes[l], level_cfg, counts)
                                 : cluster(prev, level_sizes[l], level_cfg);
    std::vector<double> next(level_sizes[l], 0.0);
    for (std::size_t i = 0; i < r.assignments.size(); ++i) next[static_cast<std::size_t>(r.assignments[i])] += counts[i];
    counts = std::move(next);
    t.levels.push_back(PrototypeLevel{std::move(r.centroids), std::move(r.assignments)});
  }
  t.validate();
  return t;
}

/// Up to `top_k` concept indices under prototype (level, index), nearest
/// to its centroid first.
inline std::vector<std::size_t> nearest_concepts(const PrototypeTree& t, const Tensor<double>& x, std::size_t level,
                                                 std::size_t index, std::size_t top_k) {
  const auto& lv = t.level(level);
  if (index >= lv.size())
    throw std::out_of_range("prototype index " + std::to_string(index) + " outside level of size " +
                            std::to_string(lv.size()));
  if (x.rows() != t.num_concepts()) throw ShapeError("nearest_concepts: embedding rows differ from concept count");
  std::vector<std::pair<double, std::size_t>> members;
  for (std::size_t c = 0; c < t.num_concepts(); ++c)
    if (static_cast<std::size_t>(t.ancestor(c, level)) == index)
      members.emplace_back(detail::sq_dist(x.row(c), lv.centroids.row(index)), c);
  std::sort(members.begin(), members.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < members.size() && i < top_k; ++i) out.push_back(members[i].second);
  return out;
}

inline nlohmann::json to_json(const PrototypeTree& t) {
  if (t.levels.empty()) throw ConfigError("export_tree: tree has no levels");
  nlohmann::json j;
  j["levels"] = nlohmann::json::array();
  for (const auto& lv : t.levels) {
    nlohmann::json cents = nlohmann::json::array();
    for (std::size_t r = 0; r < lv.size(); ++r)
      cents.push_back(std::vector<double>(lv.centroids.row(r).begin(), lv.centroids.row(r).end()));
    j["levels"].push_back({{"size", lv.size()}, {"centroids", std::move(cents)}, {"parent_of", lv.parent_of}});
  }
  j["concept_members"] = t.concept_members;
  j["meta"] = {{"method", t.meta.method}, {"seed", t.meta.seed}, {"level_sizes", t.meta.level_sizes}};
  return j;
}

inline PrototypeTree tree_from_json(const nlohmann::json& j) {
  try {
    PrototypeTree t;
    for (const auto& lj : j.at("levels")) {
      PrototypeLevel lv;
      const auto rows = lj.at("centroids").get<std::vector<std::vector<double>>>();
      if (rows.size() != lj.at("size").get<std::size_t>()) throw DataError("tree json: size disagrees with centroids");
      lv.centroids = Tensor<double>::from_rows(rows);
      lv.parent_of = lj.at("parent_of").get<std::vector<int>>();
      t.levels.push_back(std::move(lv));
    }
    t.concept_members = j.at("concept_members").get<std::vector<int>>();
    const auto& m = j.at("meta");
    t.meta.method = m.at("method").get<std::string>();
    t.meta.seed = m.at("seed").get<std::uint64_t>();
    t.meta.level_sizes = m.at("level_sizes").get<std::vector<std::size_t>>();
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tree json: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("tree json: ") + e.what());
  }
}

/// Graphviz structure: coarse prototypes at the top, concepts as leaves.
inline std::string to_dot(const PrototypeTree& t, const std::vector<std::string>& concept_tokens = {}) {
  if (t.levels.empty()) throw ConfigError("export_tree: tree has no levels");
  std::ostringstream os;
  os << "digraph prototypes {\n  rankdir=TB;\n";
  for (std::size_t l = t.levels.size(); l >= 1; --l) {
    for (std::size_t i = 0; i < t.levels[l - 1].size(); ++i)
      os << "  L" << l << "_" << i << " [shape=box,label=\"L" << l << "#" << i << "\"];\n";
    if (l >= 2)
      for (std::size_t i = 0; i < t.levels[l - 1].parent_of.size(); ++i)
        os << "  L" << l << "_" << t.levels[l - 1].parent_of[i] << " -> L" << (l - 1) << "_" << i << ";\n";
  }
  for (std::size_t c = 0; c < t.concept_members.size(); ++c) {
    std::string label = c < concept_tokens.size() ? concept_tokens[c] : "c" + std::to_string(c);
    os << "  c" << c << " [shape=ellipse,label=\"" << label << "\"];\n";
    os << "  L1_" << t.concept_members[c] << " -> c" << c << ";\n";
  }
  os << "}\n";
  return os.str();
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: label vectors differ in length");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double sj = 0, sa = 0, sb = 0;
  for (auto& [_, v] : joint) sj += c2(v);
  for (auto& [_, v] : ra) sa += c2(v);
  for (auto& [_, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double maxi = 0.5 * (sa + sb);
  if (maxi == expected) return 1.0;
  return (sj - expected) / (maxi - expected);
}

}  // namespace ptsn::tree
