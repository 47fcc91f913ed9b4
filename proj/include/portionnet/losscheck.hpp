#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "portionnet/gradcheck.hpp"
#include "portionnet/losses.hpp"

namespace portionnet {

struct LossCheck {
  std::string name;
  double expected = 0;
  double actual = 0;
  double tolerance = 0;
  bool passed = false;
};

/**
 * @brief Runs the reference examples and gradient checks of every loss.
 *
 * @param perturb name of one check whose expected constant is shifted by
 *        1e-3 (used to demonstrate that a wrong constant is reported)
 */
inline std::vector<LossCheck> run_loss_checks(const std::string& perturb = "") {
  std::vector<LossCheck> out;
  auto value = [&](const std::string& name, double expected, double actual, double tol = 1e-6) {
    if (name == perturb) expected += 1e-3;
    out.push_back({name, expected, actual, tol, std::abs(actual - expected) <= tol});
  };
  auto gradient = [&](const std::string& name, double rel_err) {
    const double tol = name == perturb ? -1.0 : 1e-4;
    out.push_back({name, 0.0, rel_err, tol, rel_err <= tol});
  };
  using M = Matrix<double>;
  Rng rng(20240611);
  auto random = [&](Eigen::Index r, Eigen::Index c) {
    M m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
  };

  // Feature distillation: squared distance.
  {
    const M f = random(4, 256);
    value("distill_mse/identical", 0.0, distill_mse<double>(f, f).value);
    value("distill_mse/offset_0.1", 2.56, distill_mse<double>(M(f.array() + 0.1), f).value);
    value("distill_mse/zeros", 0.0, distill_mse<double>(M::Zero(2, 256), M::Zero(2, 256)).value);
  }
  // Direction alignment.
  {
    const M f = random(3, 256);
    value("distill_cos/parallel", 0.0, distill_cos<double>(M(2.0 * f), f).value);
    M a = M::Zero(1, 4), b = M::Zero(1, 4);
    a(0, 0) = 1, b(0, 1) = 3;
    value("distill_cos/orthogonal", 1.0, distill_cos<double>(a, b).value);
    value("distill_cos/antiparallel", 2.0, distill_cos<double>(M(-f), f).value);
  }
  // Tempered distribution matching, teacher as reference.
  {
    const M f = random(3, 256);
    value("distill_kl/identical", 0.0, distill_kl<double>(f, f, 4.0).value);
    M fp(1, 2), fa = M::Zero(1, 2);
    fp << std::log(2.0), 0.0;
    value("distill_kl/two_dim_T1", 0.05663301226513249, distill_kl<double>(fa, fp, 1.0).value);
    double min_kl = 1.0;
    for (int i = 0; i < 20; ++i) min_kl = std::min(min_kl, distill_kl<double>(random(2, 16), random(2, 16), 4.0).value);
    value("distill_kl/nonnegative", 0.0, std::min(min_kl, 0.0));
  }
  // Weighted distillation objective.
  {
    const M a = random(3, 256), b = random(3, 256);
    const DistillWeights w;
    const auto t = distill_total<double>(a, b, w);
    value("distill_total/identical", 0.0, distill_total<double>(a, a, w).total);
    value("distill_total/weighted_sum", 0.7 * t.mse + 0.2 * t.cos + 0.1 * t.kl, t.total, 1e-7);
    DistillWeights only_mse{1.0, 0.0, 0.0, 4.0, false};
    value("distill_total/mse_only", distill_mse<double>(a, b).value, distill_total<double>(a, b, only_mse).total, 0.0);
  }
  // Label-smoothed cross-entropy.
  {
    const std::vector<int> labels{0, 5, 11};
    value("classification/uniform_C12", std::log(12.0),
          classification_loss<double>(M::Zero(3, 12), labels, 0.05).value);
    const std::vector<int> labels108{3, 107};
    value("classification/uniform_C108", std::log(108.0),
          classification_loss<double>(M::Zero(2, 108), labels108, 0.05).value);
    value("classification/smoothed_target_C108", 0.950462962962963, smoothed_true_target(0.05, 108));
    M sat = M::Constant(2, 12, -60.0);
    sat(0, 0) = 60.0, sat(1, 5) = 60.0;
    const std::vector<int> sat_labels{0, 5};
    value("classification/saturated_eps0", 0.0, classification_loss<double>(sat, sat_labels, 0.0).value);
  }
  // Huber.
  value("huber/quadratic_branch", 0.03125, huber(0.25, 0.5));
  value("huber/linear_branch", 0.375, huber(1.0, 0.5));
  value("huber/zero", 0.0, huber(0.0, 0.5));
  // Volume / energy regression.
  {
    Vector<double> v(3), e(3);
    v << 120.0, 340.0, 75.0;
    e << 150.0, 500.0, 60.0;
    value("regression/perfect", 0.0, regression_loss<double>(v, v, e, e, 0.5).value);
    const double r = 0.3;
    value("regression/volume_only", 0.4 * (std::abs(r) + huber(r, 0.5)),
          regression_loss<double>(Vector<double>(v.array() + r), v, e, e, 0.5).value);
    // Energy-only error of 0.2 normalized units isolates the 0.6 weight.
    const double scale = e.cwiseAbs().mean();
    value("regression/energy_only", 0.6 * (0.2 + huber(0.2, 0.5)),
          regression_loss<double>(v, v, Vector<double>(e.array() + 0.2 * scale), e, 0.5).value);
  }
  // Task weighting.
  {
    const LossComponents c{1.7, 4.2, 0.9, 0, 0, 0};
    value("total_loss/all_zero_weights", 0.0, total_loss(c, TaskWeights{0.0, 0.0, 0.0}).l_total, 0.0);
    value("total_loss/cls_only", c.l_cls, total_loss(c, TaskWeights{1.0, 0.0, 0.0}).l_total, 0.0);
    value("total_loss/faithful_weights", 1.7 + 0.1 * 4.2 + 0.5 * 0.9, total_loss(c, TaskWeights{}).l_total, 1e-7);
  }
  // GradNorm weight update.
  {
    const std::vector<double> w{1.0, 0.1}, l{2.0, 3.0}, l0{2.0, 3.0}, g{0.4, 0.4};
    const auto same = gradnorm_step(w, l, l0, g, 1.5, 0.025);
    value("gradnorm/fixed_point", 0.0, std::abs(same[0] - w[0]) + std::abs(same[1] - w[1]));
    const std::vector<double> g2{0.8, 0.4};
    const auto moved = gradnorm_step(w, l, l0, g2, 1.5, 0.025);
    value("gradnorm/large_norm_decreases", 1.0, moved[0] < w[0] ? 1.0 : 0.0, 0.0);
    value("gradnorm/sum_preserved", w[0] + w[1], moved[0] + moved[1]);
  }

  // Gradient checks on small random inputs.
  {
    M a = random(3, 8), b = random(3, 8);
    const DistillWeights w;
    auto pair_check = [&](const std::string& name, auto&& fn) {
      const auto res = fn(a, b);
      GradCheckResult g = check_gradient(a, res.d_a, [&] { return static_cast<double>(fn(a, b).value); }, name + ".a");
      g.merge(check_gradient(b, res.d_b, [&] { return static_cast<double>(fn(a, b).value); }, name + ".b"));
      gradient(name, g.max_rel_error);
    };
    pair_check("gradient/distill_mse", [](const M& x, const M& y) { return distill_mse<double>(x, y); });
    pair_check("gradient/distill_cos", [](const M& x, const M& y) { return distill_cos<double>(x, y); });
    pair_check("gradient/distill_kl", [](const M& x, const M& y) { return distill_kl<double>(x, y, 4.0); });
    const auto t = distill_total<double>(a, b, w);
    GradCheckResult gt = check_gradient(a, t.d_a, [&] { return distill_total<double>(a, b, w).total; }, "a");
    gt.merge(check_gradient(b, t.d_b, [&] { return distill_total<double>(a, b, w).total; }, "b"));
    gradient("gradient/distill_total", gt.max_rel_error);

    M logits = random(4, 6);
    const std::vector<int> labels{1, 0, 5, 3};
    const auto cl = classification_loss<double>(logits, labels, 0.05);
    gradient("gradient/classification",
             check_gradient(logits, cl.d_logits,
                            [&] { return classification_loss<double>(logits, labels, 0.05).value; }, "logits")
                 .max_rel_error);

    // Residuals kept away from the Huber and L1 kinks.
    M v(4, 1), vt(4, 1), e(4, 1), et(4, 1);
    v << 1.3, 2.9, 0.4, 5.2;
    vt << 1.0, 2.0, 0.7, 6.1;
    e << 3.0, 1.2, 0.9, 8.3;
    et << 2.5, 1.9, 0.5, 7.0;
    auto reg = [&] {
      return regression_loss<double>(Vector<double>(v.col(0)), Vector<double>(vt.col(0)), Vector<double>(e.col(0)),
                                     Vector<double>(et.col(0)), 0.5)
          .value;
    };
    const auto rl = regression_loss<double>(Vector<double>(v.col(0)), Vector<double>(vt.col(0)),
                                            Vector<double>(e.col(0)), Vector<double>(et.col(0)), 0.5);
    GradCheckResult gr = check_gradient(v, M(rl.d_volume), reg, "volume");
    gr.merge(check_gradient(e, M(rl.d_energy), reg, "energy"));
    gradient("gradient/regression", gr.max_rel_error);
  }
  return out;
}

}  // namespace portionnet
