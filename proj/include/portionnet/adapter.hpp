#pragma once

#include <string>

#include "portionnet/encoders.hpp"
#include "portionnet/layers.hpp"

namespace portionnet {

struct AdapterConfig {
  int in_dim = kFeatureDim;
  int hidden = 512;
  int out_dim = kFeatureDim;
};

/// RGB-to-geometry student: two affine layers with one SiLU in between and no
/// normalization. Its output stands in for the teacher feature when no point
/// cloud is available.
template <class T>
class Adapter {
 public:
  Adapter() = default;
  Adapter(const AdapterConfig& cfg, Rng& rng) : mlp_({cfg.in_dim, cfg.hidden, cfg.out_dim}, rng) {}

  Matrix<T> forward(const Matrix<T>& rgb) { return mlp_.forward(rgb); }
  Matrix<T> apply(const Matrix<T>& rgb) const { return mlp_.apply(rgb); }
  Matrix<T> backward(const Matrix<T>& dy) { return mlp_.backward(dy); }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    mlp_.parameters(out, prefix, group);
  }

  /// Zeroes every weight and bias.
  void zero() {
    ParamList<T> ps;
    parameters(ps, "adapter", ParamGroup::head);
    for (auto& p : ps) p.value->setZero();
  }

 private:
  Mlp<T> mlp_;
};

}  // namespace portionnet
