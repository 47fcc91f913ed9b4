#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "portionnet/layers.hpp"

namespace portionnet {

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;  // "<name>[index]" of the worst entry
  std::size_t checked = 0;

  void merge(const GradCheckResult& o) {
    if (o.max_rel_error > max_rel_error) max_rel_error = o.max_rel_error, worst = o.worst;
    checked += o.checked;
  }
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
/// dominating through rounding noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/**
 * @brief Compares an analytic gradient with central differences.
 *
 * @param x tensor perturbed in place (restored afterwards)
 * @param analytic dL/dx computed by backward
 * @param loss recomputes the scalar loss from the current x
 * @param max_entries entries checked, spread evenly over the tensor
 */
template <class F>
GradCheckResult check_gradient(Matrix<double>& x, const Matrix<double>& analytic, F&& loss, const std::string& name,
                               double h = 1e-5, std::size_t max_entries = 24) {
  require(x.rows() == analytic.rows() && x.cols() == analytic.cols(), "check_gradient: shape mismatch for " + name);
  GradCheckResult res;
  const auto n = static_cast<std::size_t>(x.size());
  const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_entries));
  for (std::size_t i = 0; i < n; i += stride) {
    double& v = x.data()[i];
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    const double numeric = (up - down) / (2 * h);
    const double err = relative_error(analytic.data()[i], numeric);
    if (err > res.max_rel_error || res.worst.empty()) {
      res.max_rel_error = err;
      res.worst = name + "[" + std::to_string(i) + "]";
    }
    ++res.checked;
  }
  return res;
}

/// Runs check_gradient over every parameter; gradients must already hold
/// dL/dparam from a single backward pass.
template <class F>
GradCheckResult check_parameter_gradients(const ParamList<double>& params, F&& loss, double h = 1e-5,
                                          std::size_t max_entries = 24) {
  GradCheckResult total;
  for (const auto& p : params) {
    const Matrix<double> analytic = *p.grad;
    total.merge(check_gradient(*p.value, analytic, loss, p.name, h, max_entries));
  }
  return total;
}

/// Fixed random weights R so that L = sum(y .* R) gives dL/dy = R.
inline Matrix<double> random_projection(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix<double> r(rows, cols);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  return r;
}

}  // namespace portionnet
