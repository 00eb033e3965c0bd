#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ptsn/errors.hpp"
#include "ptsn/model/checkpoint.hpp"
#include "ptsn/numerics/tensor.hpp"

namespace ptsn::training {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  }
};

/// Adam with bias correction. Moments are kept per parameter in the order
/// the parameters are first seen; frozen parameters are skipped.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step(const std::vector<Parameter<T>*>& params, const std::function<double(ParamGroup)>& lr) {
    ensure(params);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (auto* p : params)
        if (!p->frozen)
          for (T g : p->grad.storage()) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (p->frozen) continue;
      const T rate = static_cast<T>(lr(p->group));
      auto& val = p->value.storage();
      auto& grad = p->grad.storage();
      auto& m = m_[i].storage();
      auto& v = v_[i].storage();
      for (std::size_t k = 0; k < val.size(); ++k) {
        const T g = static_cast<T>(grad[k] * scale);
        m[k] = static_cast<T>(cfg_.beta1) * m[k] + static_cast<T>(1.0 - cfg_.beta1) * g;
        v[k] = static_cast<T>(cfg_.beta2) * v[k] + static_cast<T>(1.0 - cfg_.beta2) * g * g;
        const T upd = rate * (m[k] / static_cast<T>(c1)) / (std::sqrt(v[k] / static_cast<T>(c2)) + static_cast<T>(cfg_.eps));
        if (upd != T(0)) val[k] -= upd;
      }
      p->zero_grad();
    }
  }

  /// Stores the moments and step count under "adam.*" names.
  void save(model::Checkpoint& c, const std::vector<Parameter<T>*>& params) {
    ensure(params);
    c.meta["adam.step"] = std::to_string(t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.tensors.emplace_back("adam.m/" + params[i]->name, m_[i].template cast<double>());
      c.tensors.emplace_back("adam.v/" + params[i]->name, v_[i].template cast<double>());
    }
  }

  void load(const model::Checkpoint& c, const std::vector<Parameter<T>*>& params) {
    auto it = c.meta.find("adam.step");
    if (it == c.meta.end()) throw DataError("checkpoint has no optimizer state");
    t_ = std::stoull(it->second);
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      const auto* m = c.find("adam.m/" + p->name);
      const auto* v = c.find("adam.v/" + p->name);
      if (!m || !v || m->shape() != p->value.shape() || v->shape() != p->value.shape())
        throw DataError("checkpoint optimizer state missing or mis-shaped for '" + p->name + "'");
      m_.push_back(m->template cast<T>());
      v_.push_back(v->template cast<T>());
    }
  }

 private:
  void ensure(const std::vector<Parameter<T>*>& params) {
    if (m_.size() == params.size()) return;
    if (!m_.empty()) throw ConfigError("adam: parameter list changed between steps");
    for (auto* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace ptsn::training
