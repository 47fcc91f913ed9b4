#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "portionnet/layers.hpp"

namespace portionnet {

struct OneCycleConfig {
  double warmup_fraction = 0.10;
  double div_start = 25.0;
  double div_final = 1e4;
};

/**
 * @brief One-cycle learning rate at a given optimizer step.
 *
 * Cosine ramp from base_lr / div_start up to base_lr over the first
 * floor(warmup_fraction * total_steps) steps, then cosine anneal down to
 * base_lr / div_final at step == total_steps.
 */
inline double onecycle_lr(long step, long total_steps, double base_lr, const OneCycleConfig& cfg = {}) {
  require(total_steps > 0, "onecycle_lr: total_steps must be positive");
  require(step >= 0 && step <= total_steps, "onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                                                std::to_string(total_steps) + "]");
  require(cfg.warmup_fraction >= 0 && cfg.warmup_fraction < 1, "onecycle_lr: warmup_fraction must be in [0, 1)");
  const double start = base_lr / cfg.div_start;
  const double end = base_lr / cfg.div_final;
  const auto warm = static_cast<long>(std::floor(cfg.warmup_fraction * static_cast<double>(total_steps)));
  auto cosine = [](double from, double to, double pct) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * pct));
  };
  if (step <= warm) {
    if (warm == 0) return base_lr;
    return cosine(start, base_lr, static_cast<double>(step) / static_cast<double>(warm));
  }
  return cosine(base_lr, end, static_cast<double>(step - warm) / static_cast<double>(total_steps - warm));
}

template <class T>
double global_grad_norm(const ParamList<T>& params) {
  double sq = 0.0;
  for (const auto& p : params) sq += static_cast<double>(p.grad->squaredNorm());
  return std::sqrt(sq);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_gradients(const ParamList<T>& params, double max_norm) {
  require(max_norm > 0, "clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (const auto& p : params) *p.grad *= scale;
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay; moments are keyed by parameter name.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

  struct Moments {
    Matrix<T> m;
    Matrix<T> v;
  };

  /// One update. lr_for(group) gives the learning rate of each parameter group.
  template <class LrFn>
  void step(const ParamList<T>& params, LrFn&& lr_for) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (const auto& p : params) {
      auto [it, inserted] = state_.try_emplace(p.name);
      Moments& s = it->second;
      if (inserted) {
        s.m = Matrix<T>::Zero(p.value->rows(), p.value->cols());
        s.v = Matrix<T>::Zero(p.value->rows(), p.value->cols());
      }
      const double lr = lr_for(p.group);
      s.m = b1 * s.m + (T(1) - b1) * *p.grad;
      s.v = b2 * s.v + (T(1) - b2) * p.grad->cwiseProduct(*p.grad);
      *p.value *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
      const T step_size = static_cast<T>(lr / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      const T eps = static_cast<T>(cfg_.eps);
      p.value->array() -= step_size * s.m.array() / (s.v.array().sqrt() * denom_scale + eps);
    }
  }

  long steps() const { return step_; }
  void set_steps(long s) { step_ = s; }
  std::unordered_map<std::string, Moments>& state() { return state_; }
  const std::unordered_map<std::string, Moments>& state() const { return state_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long step_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace portionnet
