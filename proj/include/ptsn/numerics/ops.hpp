#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/numerics/rng.hpp"
#include "ptsn/numerics/tape.hpp"

namespace ptsn::ops {

namespace detail {

template <class T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw ConfigError(std::string(op) + ": operands recorded on different tapes");
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  auto& d = dst.storage();
  const auto& s = src.storage();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace detail

/// a[m,k] x b[k,n].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.cols());
  out.mat().noalias() = av.mat() * bv.mat();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          if (t.requires_grad(ia)) t.grad_of(ia).mat().noalias() += g.mat() * t.value(ib).mat().transpose();
                          if (t.requires_grad(ib)) t.grad_of(ib).mat().noalias() += t.value(ia).mat().transpose() * g.mat();
                        });
}

/// a[m,k] x b[n,k]^T.
template <class T>
Var<T> matmul_bt(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "matmul_bt");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_bt: inner dimensions differ " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()) + "^T");
  Tensor<T> out = Tensor<T>::matrix(av.rows(), bv.rows());
  out.mat().noalias() = av.mat() * bv.mat().transpose();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul_bt", std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          if (t.requires_grad(ia)) t.grad_of(ia).mat().noalias() += g.mat() * t.value(ib).mat();
                          if (t.requires_grad(ib)) t.grad_of(ib).mat().noalias() += g.mat().transpose() * t.value(ia).mat();
                        });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          if (t.requires_grad(ia)) detail::add_into(t.grad_of(ia), g);
                          if (t.requires_grad(ib)) detail::add_into(t.grad_of(ib), g);
                        });
}

/// x[m,n] + bias broadcast over rows (bias holds n values).
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_same_tape(x, bias, "add_bias");
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.size() != xv.cols())
    throw ShapeError("add_bias: bias size " + std::to_string(bv.size()) + " vs width " +
                     std::to_string(xv.cols()));
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  const std::size_t ix = x.id, ib = bias.id;
  return x.tape->record("add_bias", std::move(out), x.requires_grad() || bias.requires_grad(),
                        [ix, ib](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          if (t.requires_grad(ix)) detail::add_into(t.grad_of(ix), g);
                          if (t.requires_grad(ib)) {
                            auto& gb = t.grad_of(ib);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
                          }
                        });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mul");
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia, ib](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          if (t.requires_grad(ia)) {
                            auto& ga = t.grad_of(ia);
                            const auto& bv = t.value(ib);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                          }
                          if (t.requires_grad(ib)) {
                            auto& gb = t.grad_of(ib);
                            const auto& av = t.value(ia);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        });
}

template <class T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v *= factor;
  const std::size_t ix = x.id;
  return x.tape->record("scale", std::move(out), x.requires_grad(),
                        [ix, factor](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          auto& gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                        });
}

/// Sum of all elements, as a one-element tensor.
template <class T>
Var<T> sum(Var<T> x) {
  Tensor<T> out = Tensor<T>::scalar(x.value().sum());
  const std::size_t ix = x.id;
  return x.tape->record("sum", std::move(out), x.requires_grad(),
                        [ix](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          for (auto& v : t.grad_of(ix).storage()) v += g[0];
                        });
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = gelu_value(v);
  const std::size_t ix = x.id;
  return x.tape->record("gelu", std::move(out), x.requires_grad(),
                        [ix](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          auto& gx = t.grad_of(ix);
                          const auto& xv = t.value(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(xv[i]);
                        });
}

enum class SoftmaxMask { none, causal };

namespace detail {

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, SoftmaxMask mask, const std::vector<bool>* excluded) {
  Tensor<T> y(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto keep = [&](std::size_t c) {
      if (mask == SoftmaxMask::causal && c > r) return false;
      if (excluded != nullptr && (*excluded)[c]) return false;
      return true;
    };
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (keep(c)) mx = std::max(mx, x(r, c));
    T total = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      const T e = keep(c) ? std::exp(x(r, c) - mx) : T(0);
      y(r, c) = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) y(r, c) /= total;
  }
  return y;
}

template <class T>
void softmax_backward(Tape<T>& t, std::size_t ix, const Tensor<T>& y, const Tensor<T>& g) {
  auto& gx = t.grad_of(ix);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T dot = T(0);
    for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
    for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
  }
}

}  // namespace detail

/// Row-wise softmax over the last axis, max-subtracted.
/// With SoftmaxMask::causal, row r only sees columns <= r.
template <class T>
Var<T> softmax(Var<T> x, SoftmaxMask mask = SoftmaxMask::none) {
  Tensor<T> y = detail::softmax_rows(x.value(), mask, nullptr);
  const std::size_t ix = x.id;
  return x.tape->record("softmax", std::move(y), x.requires_grad(),
                        [ix](Tape<T>& t, std::size_t self, const Tensor<T>& g) {
                          detail::softmax_backward(t, ix, t.value(self), g);
                        });
}

/// Layer normalization over the last axis followed by gain * . + bias.
/// Variance is the biased (1/n) estimate.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  detail::require_same_tape(x, gain, "layer_norm");
  detail::require_same_tape(x, bias, "layer_norm");
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  if (n < 2) throw ShapeError("layer_norm: last axis must have size >= 2");
  if (gain.value().size() != n || bias.value().size() != n)
    throw ShapeError("layer_norm: gain/bias size must equal width " + std::to_string(n));
  const std::size_t m = xv.rows();
  Tensor<T> xhat(xv.shape());
  std::vector<T> rstd(m);
  Tensor<T> out(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < m; ++r) {
    T mean = T(0);
    for (std::size_t c = 0; c < n; ++c) mean += xv(r, c);
    mean /= T(n);
    T var = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      const T d = xv(r, c) - mean;
      var += d * d;
    }
    var /= T(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * rstd[r];
      out(r, c) = gv[c] * xhat(r, c) + bv[c];
    }
  }
  const std::size_t ixx = x.id, ig = gain.id, ib = bias.id;
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return x.tape->record(
      "layer_norm", std::move(out), rg,
      [ixx, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t,
                                                                   const Tensor<T>& g) {
        const std::size_t rows = g.rows(), n = g.cols();
        if (t.requires_grad(ig)) {
          auto& gg = t.grad_of(ig);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * xhat(r, c);
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad_of(ib);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
        }
        if (t.requires_grad(ixx)) {
          auto& gx = t.grad_of(ixx);
          const auto& gv = t.value(ig);
          std::vector<T> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T s1 = T(0), s2 = T(0);
            for (std::size_t c = 0; c < n; ++c) {
              dxhat[c] = g(r, c) * gv[c];
              s1 += dxhat[c];
              s2 += dxhat[c] * xhat(r, c);
            }
            for (std::size_t c = 0; c < n; ++c)
              gx(r, c) += rstd[r] / T(n) * (T(n) * dxhat[c] - s1 - xhat(r, c) * s2);
          }
        }
      });
}

/// Columns [start, start + width) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t start, std::size_t width) {
  const auto& xv = x.value();
  if (width == 0 || start + width > xv.cols())
    throw ShapeError("slice_cols: range out of bounds for " + shape_str(xv.shape()));
  Tensor<T> out = Tensor<T>::matrix(xv.rows(), width);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = xv(r, start + c);
  const std::size_t ix = x.id;
  return x.tape->record("slice_cols", std::move(out), x.requires_grad(),
                        [ix, start](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          auto& gx = t.grad_of(ix);
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < g.cols(); ++c) gx(r, start + c) += g(r, c);
                        });
}

/// Rows [start, start + count) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t count) {
  const auto& xv = x.value();
  if (count == 0 || start + count > xv.rows())
    throw ShapeError("slice_rows: range out of bounds for " + shape_str(xv.shape()));
  const std::size_t n = xv.cols();
  std::vector<T> data(xv.storage().begin() + static_cast<std::ptrdiff_t>(start * n),
                      xv.storage().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  const std::size_t ix = x.id;
  return x.tape->record("slice_rows", Tensor<T>(Shape{count, n}, std::move(data)), x.requires_grad(),
                        [ix, start](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          auto& gx = t.grad_of(ix);
                          const std::size_t off = start * g.cols();
                          for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
                        });
}

/// Horizontal concatenation of matrices with equal row counts.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, total);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += v.cols();
  }
  return parts.front().tape->record(
      "concat_cols", std::move(out), rg,
      [ids = std::move(ids), offsets = std::move(offsets)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          auto& gx = t.grad_of(ids[k]);
          for (std::size_t r = 0; r < gx.rows(); ++r)
            for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g(r, offsets[k] + c);
        }
      });
}

/// Rows of `table` selected by `ids` (embedding lookup).
template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<int>& ids) {
  const auto& tv = table.value();
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  Tensor<T> out = Tensor<T>::matrix(ids.size(), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows())
      throw ShapeError("gather_rows: id " + std::to_string(ids[r]) + " out of range");
    const auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  const std::size_t it = table.id;
  return table.tape->record("gather_rows", std::move(out), table.requires_grad(),
                            [it, ids](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                              auto& gt = t.grad_of(it);
                              for (std::size_t r = 0; r < ids.size(); ++r)
                                for (std::size_t c = 0; c < g.cols(); ++c)
                                  gt(static_cast<std::size_t>(ids[r]), c) += g(r, c);
                            });
}

/// Log-softmax of one row, with optional excluded classes (probability 0).
template <class T>
std::vector<T> log_softmax_row(std::span<const T> logits, const std::vector<bool>* excluded = nullptr) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (excluded == nullptr || !(*excluded)[c]) mx = std::max(mx, logits[c]);
  T total = T(0);
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (excluded == nullptr || !(*excluded)[c]) total += std::exp(logits[c] - mx);
  const T lse = mx + std::log(total);
  std::vector<T> out(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c)
    out[c] = (excluded != nullptr && (*excluded)[c]) ? -std::numeric_limits<T>::infinity() : logits[c] - lse;
  return out;
}

/// sum_r weights[r] * (-log softmax(logits[r])[targets[r]]).
///
/// Rows with weight exactly 0 are skipped, so their targets may be any
/// placeholder. `excluded` marks classes that never receive probability mass.
template <class T>
Var<T> weighted_nll(Var<T> logits, const std::vector<int>& targets, const std::vector<T>& weights,
                    const std::vector<bool>& excluded = {}) {
  const auto& lv = logits.value();
  const std::size_t rows = lv.rows(), classes = lv.cols();
  if (targets.size() != rows || weights.size() != rows)
    throw ShapeError("weighted_nll: targets/weights must have one entry per row");
  if (!excluded.empty() && excluded.size() != classes)
    throw ShapeError("weighted_nll: exclusion mask must cover every class");
  const std::vector<bool>* mask = excluded.empty() ? nullptr : &excluded;
  Tensor<T> probs(lv.shape());
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == T(0)) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes)
      throw ShapeError("weighted_nll: target " + std::to_string(targets[r]) + " outside [0, " +
                       std::to_string(classes) + ")");
    if (mask != nullptr && (*mask)[static_cast<std::size_t>(targets[r])])
      throw ShapeError("weighted_nll: target class is excluded");
    const auto lp = log_softmax_row<T>(lv.row(r), mask);
    loss -= weights[r] * lp[static_cast<std::size_t>(targets[r])];
    for (std::size_t c = 0; c < classes; ++c) probs(r, c) = (mask && (*mask)[c]) ? T(0) : std::exp(lp[c]);
  }
  const std::size_t il = logits.id;
  return logits.tape->record(
      "weighted_nll", Tensor<T>::scalar(loss), logits.requires_grad(),
      [il, targets, weights, probs = std::move(probs)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
        auto& gl = t.grad_of(il);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          if (weights[r] == T(0)) continue;
          const T w = g[0] * weights[r];
          for (std::size_t c = 0; c < probs.cols(); ++c) gl(r, c) += w * probs(r, c);
          gl(r, static_cast<std::size_t>(targets[r])) -= w;
        }
      });
}

/// Mean negative log-likelihood over rows whose target differs from
/// `ignore_id` (pass -1 to use every row).
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, int ignore_id = -1,
                     const std::vector<bool>& excluded = {}) {
  std::size_t count = 0;
  for (int id : targets)
    if (id != ignore_id) ++count;
  if (count == 0) throw DataError("cross_entropy: no non-padding targets");
  std::vector<T> w(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) w[i] = targets[i] != ignore_id ? T(1) / T(count) : T(0);
  return weighted_nll(logits, targets, w, excluded);
}

/// W2 * gelu(W1 * x + b1) + b2, row-vector convention.
template <class T>
Var<T> feed_forward(Var<T> x, Var<T> w1, Var<T> b1, Var<T> w2, Var<T> b2) {
  if (w1.rows() != x.cols() || w2.rows() != w1.cols() || w2.cols() != x.cols())
    throw ShapeError("feed_forward: weight shapes " + shape_str(w1.shape()) + ", " +
                     shape_str(w2.shape()) + " incompatible with input width " + std::to_string(x.cols()));
  return add_bias(matmul(gelu(add_bias(matmul(x, w1), b1)), w2), b2);
}

/// Inverted dropout: zeroes each entry with probability p and scales the
/// survivors by 1/(1-p). p = 0 returns x unchanged.
template <class T>
Var<T> dropout(Var<T> x, T p, Rng& rng) {
  if (!(p >= T(0) && p < T(1))) throw ConfigError("dropout: rate must be in [0, 1)");
  if (p == T(0)) return x;
  Tensor<T> mask(x.shape());
  const T keep = T(1) / (T(1) - p);
  for (auto& m : mask.storage()) m = rng.uniform() < static_cast<double>(p) ? T(0) : keep;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ix = x.id;
  return x.tape->record("dropout", std::move(out), x.requires_grad(),
                        [ix, mask = std::move(mask)](Tape<T>& t, std::size_t, const Tensor<T>& g) {
                          auto& gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                        });
}

}  // namespace ptsn::ops
