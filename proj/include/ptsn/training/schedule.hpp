#pragma once

#include <cstddef>
#include <limits>
#include <string>

#include "ptsn/errors.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::training {

/// Epoch-indexed warmup/decay: n/4 of the base rate for n <= 3, the base
/// rate up to n = 10, 0.2x up to n = 12, 0.04x afterwards.
inline double lambda_lr(std::size_t n, double base_lr) {
  if (n < 1) throw ConfigError("lambda_lr: epoch numbers start at 1");
  if (n <= 3) return static_cast<double>(n) / 4.0 * base_lr;
  if (n <= 10) return base_lr;
  if (n <= 12) return 0.2 * base_lr;
  return 0.2 * 0.2 * base_lr;
}

enum class ScheduleKind { lambda, constant };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "lambda") return ScheduleKind::lambda;
  if (s == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown lr schedule '" + s + "' (expected lambda or constant)");
}

inline const char* schedule_name(ScheduleKind k) { return k == ScheduleKind::lambda ? "lambda" : "constant"; }

/// Base rates per parameter group and how they vary with the epoch.
struct LrSchedule {
  double encoder_base = 4e-5;
  double other_base = 4e-4;
  ScheduleKind kind = ScheduleKind::lambda;

  void validate() const {
    if (!(encoder_base > 0.0) || !(other_base > 0.0)) throw ConfigError("learning rates must be > 0");
  }

  double base(ParamGroup g) const { return g == ParamGroup::encoder ? encoder_base : other_base; }

  double rate(std::size_t epoch, ParamGroup g) const {
    return kind == ScheduleKind::lambda ? lambda_lr(epoch, base(g)) : base(g);
  }
};

/// Stops once `patience` consecutive epochs fail to beat the best score.
struct EarlyStopper {
  std::size_t patience = 5;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  /// Records an epoch's score; returns true when training should stop.
  bool update(double score) {
    if (score > best) {
      best = score;
      since_best = 0;
    } else {
      ++since_best;
    }
    return since_best >= patience;
  }
};

}  // namespace ptsn::training
