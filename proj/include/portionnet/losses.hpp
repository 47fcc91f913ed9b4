#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "portionnet/layers.hpp"
#include "portionnet/tensor.hpp"

namespace portionnet {

/// Feature distillation weights and softmax temperature.
struct DistillWeights {
  double w_mse = 0.7;
  double w_cos = 0.2;
  double w_kl = 0.1;
  double temperature = 4.0;
  // Multiplies the KL term by T^2 (the usual gradient-scale correction). Off by default.
  bool kl_t_squared = false;
};

struct TaskWeights {
  double cls = 1.0;
  double reg = 0.1;
  double distill = 0.5;
  bool gradnorm_enabled = false;
  double gradnorm_alpha = 1.5;
  double gradnorm_lr = 0.025;
};

inline void validate(const DistillWeights& w) {
  require_config(w.w_mse >= 0 && w.w_cos >= 0 && w.w_kl >= 0, "distill weights must be nonnegative");
  require_config(w.temperature > 0, "distill temperature must be positive");
}

inline void validate(const TaskWeights& w) {
  require_config(w.cls >= 0 && w.reg >= 0 && w.distill >= 0, "task weights must be nonnegative");
  require_config(w.gradnorm_lr > 0, "gradnorm_lr must be positive");
}

/// Loss value plus gradients w.r.t. the two arguments.
template <class T>
struct PairLoss {
  T value = T(0);
  Matrix<T> d_a;
  Matrix<T> d_b;
};

namespace detail {
template <class T>
void check_pair(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(what) + ": shape mismatch");
  require(a.rows() > 0, std::string(what) + ": empty batch");
}

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

template <class T>
Matrix<T> log_softmax_rows(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    const T lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}
}  // namespace detail

/// Squared L2 distance summed over feature dims, averaged over the batch.
template <class T>
PairLoss<T> distill_mse(const Matrix<T>& f_a, const Matrix<T>& f_p) {
  detail::check_pair(f_a, f_p, "distill_mse");
  const T n = static_cast<T>(f_a.rows());
  const Matrix<T> diff = f_a - f_p;
  PairLoss<T> out;
  out.value = diff.squaredNorm() / n;
  out.d_a = diff * (T(2) / n);
  out.d_b = -out.d_a;
  return out;
}

inline constexpr double kCosineEps = 1e-8;

/// 1 - cos(f_a, f_p), averaged over the batch. Norms are floored at 1e-8.
template <class T>
PairLoss<T> distill_cos(const Matrix<T>& f_a, const Matrix<T>& f_p) {
  detail::check_pair(f_a, f_p, "distill_cos");
  const T n = static_cast<T>(f_a.rows());
  const T eps = static_cast<T>(kCosineEps);
  PairLoss<T> out;
  out.d_a.resize(f_a.rows(), f_a.cols());
  out.d_b.resize(f_a.rows(), f_a.cols());
  for (Eigen::Index r = 0; r < f_a.rows(); ++r) {
    const T na = std::max(f_a.row(r).norm(), eps), np = std::max(f_p.row(r).norm(), eps);
    const T dot = f_a.row(r).dot(f_p.row(r));
    const T cos = dot / (na * np);
    out.value += T(1) - cos;
    // d cos / d a = p/(|a||p|) - cos * a/|a|^2 (norm floor treated as constant when active)
    const bool a_floor = f_a.row(r).norm() < eps, p_floor = f_p.row(r).norm() < eps;
    out.d_a.row(r) = -(f_p.row(r) / (na * np) - (a_floor ? T(0) : cos / (na * na)) * f_a.row(r)) / n;
    out.d_b.row(r) = -(f_a.row(r) / (na * np) - (p_floor ? T(0) : cos / (np * np)) * f_p.row(r)) / n;
  }
  out.value /= n;
  return out;
}

/// KL(softmax(f_p/T) || softmax(f_a/T)), teacher as reference, averaged over the batch.
template <class T>
PairLoss<T> distill_kl(const Matrix<T>& f_a, const Matrix<T>& f_p, double temperature, bool t_squared = false) {
  detail::check_pair(f_a, f_p, "distill_kl");
  require(temperature > 0, "distill_kl: temperature must be positive");
  const T t = static_cast<T>(temperature);
  const T n = static_cast<T>(f_a.rows());
  const T factor = t_squared ? t * t : T(1);
  const Matrix<T> log_p = detail::log_softmax_rows<T>(f_p / t);
  const Matrix<T> log_q = detail::log_softmax_rows<T>(f_a / t);
  const Matrix<T> p = log_p.array().exp().matrix();
  const Matrix<T> q = log_q.array().exp().matrix();
  PairLoss<T> out;
  out.value = factor * (p.array() * (log_p - log_q).array()).sum() / n;
  out.d_a = (q - p) * (factor / (t * n));
  // d/dz_p of sum p (log p - log q), z_p = f_p / T: p * (log p - log q - KL_row)
  out.d_b.resize(f_p.rows(), f_p.cols());
  for (Eigen::Index r = 0; r < f_p.rows(); ++r) {
    const RowVector<T> gap = log_p.row(r) - log_q.row(r);
    const T kl_row = p.row(r).dot(gap);
    out.d_b.row(r) = (p.row(r).array() * (gap.array() - kl_row)).matrix() * (factor / (t * n));
  }
  return out;
}

template <class T>
struct DistillTerms {
  T mse = T(0), cos = T(0), kl = T(0), total = T(0);
  Matrix<T> d_a;  // gradient of total w.r.t. f_a
  Matrix<T> d_b;  // gradient of total w.r.t. f_p
};

/// w_mse * MSE + w_cos * cos + w_kl * KL.
template <class T>
DistillTerms<T> distill_total(const Matrix<T>& f_a, const Matrix<T>& f_p, const DistillWeights& w) {
  validate(w);
  const auto m = distill_mse(f_a, f_p);
  const auto c = distill_cos(f_a, f_p);
  const auto k = distill_kl(f_a, f_p, w.temperature, w.kl_t_squared);
  DistillTerms<T> out;
  out.mse = m.value, out.cos = c.value, out.kl = k.value;
  const T wm = static_cast<T>(w.w_mse), wc = static_cast<T>(w.w_cos), wk = static_cast<T>(w.w_kl);
  out.total = wm * m.value + wc * c.value + wk * k.value;
  out.d_a = wm * m.d_a + wc * c.d_a + wk * k.d_a;
  out.d_b = wm * m.d_b + wc * c.d_b + wk * k.d_b;
  return out;
}

/// Smoothed target for the true class: 1 - eps + eps / C.
inline double smoothed_true_target(double eps, int class_count) { return 1.0 - eps + eps / class_count; }

template <class T>
struct LogitLoss {
  T value = T(0);
  Matrix<T> d_logits;
};

/// Cross-entropy against label-smoothed targets, averaged over the batch.
template <class T>
LogitLoss<T> classification_loss(const Matrix<T>& logits, std::span<const int> labels, double eps) {
  const Eigen::Index b = logits.rows(), c = logits.cols();
  require(b > 0 && c > 0, "classification_loss: empty input");
  require(static_cast<Eigen::Index>(labels.size()) == b, "classification_loss: label count mismatch");
  require(eps >= 0 && eps <= 1, "classification_loss: eps must be in [0, 1]");
  const T off = static_cast<T>(eps / static_cast<double>(c));
  const T on = static_cast<T>(1.0 - eps) + off;
  const Matrix<T> log_prob = detail::log_softmax_rows<T>(logits);
  LogitLoss<T> out;
  out.d_logits = log_prob.array().exp().matrix() / static_cast<T>(b);
  for (Eigen::Index r = 0; r < b; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y >= 0 && y < c, "classification_loss: label " + std::to_string(y) + " outside [0, " +
                                 std::to_string(c) + ")");
    for (Eigen::Index k = 0; k < c; ++k) {
      const T target = k == y ? on : off;
      out.value -= target * log_prob(r, k);
      out.d_logits(r, k) -= target / static_cast<T>(b);
    }
  }
  out.value /= static_cast<T>(b);
  return out;
}

/// 0.5 r^2 for |r| <= delta, else delta (|r| - delta / 2).
template <class T>
T huber(T r, T delta) {
  const T a = std::abs(r);
  return a <= delta ? T(0.5) * r * r : delta * (a - T(0.5) * delta);
}

template <class T>
T huber_grad(T r, T delta) {
  return std::abs(r) <= delta ? r : (r > T(0) ? delta : -delta);
}

template <class T>
T sign_of(T r) {
  return static_cast<T>((r > T(0)) - (r < T(0)));
}

inline constexpr double kVolumeWeight = 0.4;
inline constexpr double kEnergyWeight = 0.6;

template <class T>
struct RegressionLoss {
  T value = T(0);
  T volume_l1 = T(0), volume_huber = T(0), energy_l1 = T(0), energy_huber = T(0);
  T energy_scale = T(1);  // divisor applied to both predicted and true energy
  Vector<T> d_volume;
  Vector<T> d_energy;
};

/// Mean |e| of the ground-truth energies; the batch normalizer for the energy terms.
template <class T>
T energy_normalizer(const Vector<T>& energy) {
  require(energy.size() > 0, "energy_normalizer: empty batch");
  const T m = energy.cwiseAbs().mean();
  require(m > T(0), "energy_normalizer: ground-truth energies are all zero");
  return m;
}

/**
 * @brief 0.4 (L1 + Huber) on volume + 0.6 (L1 + Huber) on batch-normalized energy.
 *
 * Energies (predicted and true) are divided by the mean |true energy| of the
 * batch. Pass @p energy_scale to normalize by a larger enclosing batch, e.g.
 * the full optimizer step when gradients are accumulated.
 */
template <class T>
RegressionLoss<T> regression_loss(const Vector<T>& v_hat, const Vector<T>& v, const Vector<T>& e_hat,
                                  const Vector<T>& e, double delta, std::optional<T> energy_scale = std::nullopt) {
  const Eigen::Index b = v.size();
  require(b > 0, "regression_loss: empty batch");
  require(v_hat.size() == b && e_hat.size() == b && e.size() == b, "regression_loss: batch size mismatch");
  require(delta > 0, "regression_loss: delta must be positive");
  const T d = static_cast<T>(delta);
  RegressionLoss<T> out;
  out.energy_scale = energy_scale ? *energy_scale : energy_normalizer(e);
  require(out.energy_scale > T(0), "regression_loss: energy scale must be positive");
  out.d_volume.resize(b);
  out.d_energy.resize(b);
  const T n = static_cast<T>(b);
  const T wv = static_cast<T>(kVolumeWeight), we = static_cast<T>(kEnergyWeight);
  for (Eigen::Index i = 0; i < b; ++i) {
    const T rv = v_hat(i) - v(i);
    const T re = (e_hat(i) - e(i)) / out.energy_scale;
    out.volume_l1 += std::abs(rv);
    out.volume_huber += huber(rv, d);
    out.energy_l1 += std::abs(re);
    out.energy_huber += huber(re, d);
    out.d_volume(i) = wv * (sign_of(rv) + huber_grad(rv, d)) / n;
    out.d_energy(i) = we * (sign_of(re) + huber_grad(re, d)) / (n * out.energy_scale);
  }
  out.volume_l1 /= n, out.volume_huber /= n, out.energy_l1 /= n, out.energy_huber /= n;
  out.value = wv * (out.volume_l1 + out.volume_huber) + we * (out.energy_l1 + out.energy_huber);
  return out;
}

/// Per-step loss record. Invariant: total == cls*l_cls + reg*l_reg + distill*l_distill.
struct LossBundle {
  double l_cls = 0, l_reg = 0, l_distill = 0, l_total = 0;
  double distill_mse = 0, distill_cos = 0, distill_kl = 0;
  double lambda_cls = 0, lambda_reg = 0, lambda_distill = 0;

  /// |total - weighted sum|; zero up to rounding for a bundle built by total_loss.
  double identity_residual() const {
    return std::abs(l_total - (lambda_cls * l_cls + lambda_reg * l_reg + lambda_distill * l_distill));
  }
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossComponents {
  double l_cls = 0, l_reg = 0, l_distill = 0;
  double distill_mse = 0, distill_cos = 0, distill_kl = 0;
};

inline LossBundle total_loss(const LossComponents& c, const TaskWeights& w) {
  for (auto [name, v] : {std::pair{"cls", c.l_cls}, {"reg", c.l_reg}, {"distill", c.l_distill}})
    if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + name + " loss: " + std::to_string(v));
  LossBundle b;
  b.l_cls = c.l_cls, b.l_reg = c.l_reg, b.l_distill = c.l_distill;
  b.distill_mse = c.distill_mse, b.distill_cos = c.distill_cos, b.distill_kl = c.distill_kl;
  b.lambda_cls = w.cls, b.lambda_reg = w.reg, b.lambda_distill = w.distill;
  b.l_total = w.cls * c.l_cls + w.reg * c.l_reg + w.distill * c.l_distill;
  return b;
}

/**
 * @brief One GradNorm update of task weights.
 *
 * For task i with weight w_i, loss L_i, initial loss L_i(0) and probe-gradient
 * norm G_i = ||d(w_i L_i)/dW||: target_i = mean(G) * r_i^alpha where r_i is
 * the loss ratio L_i/L_i(0) relative to its mean across tasks. Each weight
 * takes a gradient step on sum |G_i - target_i| (targets held constant), is
 * floored at a small positive value, and the set is rescaled to keep its sum.
 */
inline std::vector<double> gradnorm_step(std::span<const double> weights, std::span<const double> task_losses,
                                         std::span<const double> initial_losses,
                                         std::span<const double> weighted_grad_norms, double alpha, double lr) {
  const std::size_t n = weights.size();
  require(n > 0 && task_losses.size() == n && initial_losses.size() == n && weighted_grad_norms.size() == n,
          "gradnorm_step: inconsistent task counts");
  std::vector<double> ratio(n);
  for (std::size_t i = 0; i < n; ++i)
    ratio[i] = initial_losses[i] > 0.0 ? task_losses[i] / initial_losses[i] : 1.0;
  const double mean_ratio = std::accumulate(ratio.begin(), ratio.end(), 0.0) / static_cast<double>(n);
  const double mean_norm =
      std::accumulate(weighted_grad_norms.begin(), weighted_grad_norms.end(), 0.0) / static_cast<double>(n);
  const double sum_w = std::accumulate(weights.begin(), weights.end(), 0.0);

  std::vector<double> out(weights.begin(), weights.end());
  for (std::size_t i = 0; i < n; ++i) {
    const double rel = mean_ratio > 0 ? ratio[i] / mean_ratio : 1.0;
    const double target = mean_norm * std::pow(rel, alpha);
    const double gap = weighted_grad_norms[i] - target;
    // G_i is linear in w_i, so dG_i/dw_i = G_i / w_i.
    const double dg_dw = weights[i] > 0 ? weighted_grad_norms[i] / weights[i] : 0.0;
    out[i] = std::max(weights[i] - lr * static_cast<double>((gap > 0) - (gap < 0)) * dg_dw, 1e-6);
  }
  const double new_sum = std::accumulate(out.begin(), out.end(), 0.0);
  if (new_sum > 0)
    for (double& w : out) w *= sum_w / new_sum;
  return out;
}

}  // namespace portionnet
