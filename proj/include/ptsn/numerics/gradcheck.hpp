#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ptsn/numerics/tape.hpp"

namespace ptsn {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = true;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor: |a - n| / max(|a|, |n|, floor).
  double abs_floor = 1e-6;
  /// Check at most this many entries per parameter (evenly strided); 0 = all.
  std::size_t max_per_param = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(p + eps) - f(p - eps)) / 2 eps, entry by entry.
///
/// `f` must record a fresh computation on the tape it is given and be
/// deterministic in the parameter values.
template <class T>
GradcheckReport gradcheck(const std::function<Var<T>(Tape<T>&)>& f, const std::vector<Parameter<T>*>& params,
                          const GradcheckOptions& opt = {}) {
  for (auto* p : params) p->grad = Tensor<T>(p->value.shape());
  {
    Tape<T> tape;
    tape.backward(f(tape));
  }
  auto eval = [&] {
    Tape<T> tape;
    return static_cast<double>(f(tape).value()[0]);
  };

  GradcheckReport rep;
  for (auto* p : params) {
    auto& vals = p->value.storage();
    const std::size_t n = vals.size();
    const std::size_t stride = (opt.max_per_param == 0 || n <= opt.max_per_param) ? 1 : n / opt.max_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = vals[i];
      vals[i] = saved + static_cast<T>(opt.eps);
      const double up = eval();
      vals[i] = saved - static_cast<T>(opt.eps);
      const double down = eval();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double analytic = static_cast<double>(p->grad[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++rep.entries_checked;
      if (rel > rep.max_rel_error || !std::isfinite(rel)) {
        rep.max_rel_error = std::isfinite(rel) ? rel : INFINITY;
        rep.worst_param = p->name;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error <= opt.tol;
  return rep;
}

}  // namespace ptsn
