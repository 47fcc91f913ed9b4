#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "portionnet/encoders.hpp"
#include "portionnet/layers.hpp"

namespace portionnet {

/**
 * @brief Multi-head cross-attention where each side is a single token.
 *
 * Query comes from one modality, key/value from the other. With one key the
 * per-head softmax weight is exactly 1, so the output is W_o W_v kv; the
 * query/key projections still exist and are evaluated, they just receive zero
 * gradient.
 */
template <class T>
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(int dim, int heads, Rng& rng)
      : heads_(heads), q_(dim, dim, rng), k_(dim, dim, rng), v_(dim, dim, rng), o_(dim, dim, rng) {
    require_config(heads >= 1 && dim % heads == 0, "CrossAttention: dim must be divisible by head count");
  }

  int heads() const { return heads_; }

  Matrix<T> forward(const Matrix<T>& query, const Matrix<T>& kv) {
    const Matrix<T> q = q_.forward(query), k = k_.forward(kv);
    v_cache_ = v_.forward(kv);
    weights_ = attention_weights(q, k);
    return o_.forward(weighted_values(weights_, v_cache_));
  }

  Matrix<T> apply(const Matrix<T>& query, const Matrix<T>& kv) const {
    const Matrix<T> w = attention_weights(q_.apply(query), k_.apply(kv));
    return o_.apply(weighted_values(w, v_.apply(kv)));
  }

  struct Grads {
    Matrix<T> d_query;
    Matrix<T> d_kv;
  };

  Grads backward(const Matrix<T>& dy) {
    const Matrix<T> dctx = o_.backward(dy);
    const Eigen::Index b = dy.rows(), dh = dy.cols() / heads_;
    Matrix<T> dv(b, dy.cols()), dscore(b, heads_);
    for (Eigen::Index r = 0; r < b; ++r)
      for (Eigen::Index h = 0; h < heads_; ++h) {
        const T w = weights_(r, h);
        dv.row(r).segment(h * dh, dh) = w * dctx.row(r).segment(h * dh, dh);
        // Softmax Jacobian over a single key: w * (g - w * g) == 0.
        const T g = dctx.row(r).segment(h * dh, dh).dot(v_cache_.row(r).segment(h * dh, dh));
        dscore(r, h) = w * (g - w * g);
      }
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Matrix<T> dq(b, dy.cols()), dk(b, dy.cols());
    // Scores are q.k / sqrt(dh); propagate through both projections.
    for (Eigen::Index r = 0; r < b; ++r)
      for (Eigen::Index h = 0; h < heads_; ++h) {
        dq.row(r).segment(h * dh, dh) = dscore(r, h) * inv_sqrt * k_last_.row(r).segment(h * dh, dh);
        dk.row(r).segment(h * dh, dh) = dscore(r, h) * inv_sqrt * q_last_.row(r).segment(h * dh, dh);
      }
    Grads g;
    g.d_query = q_.backward(dq);
    g.d_kv = k_.backward(dk) + v_.backward(dv);
    return g;
  }

  /// Per-head attention weights from the most recent forward pass (B x heads).
  const Matrix<T>& last_weights() const { return weights_; }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    q_.parameters(out, prefix + ".q", group);
    k_.parameters(out, prefix + ".k", group);
    v_.parameters(out, prefix + ".v", group);
    o_.parameters(out, prefix + ".o", group);
  }

  Linear<T>& output_projection() { return o_; }

 private:
  Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k) {
    q_last_ = q, k_last_ = k;
    return std::as_const(*this).attention_weights(q, k);
  }

  Matrix<T> attention_weights(const Matrix<T>& q, const Matrix<T>& k) const {
    const Eigen::Index b = q.rows(), dh = q.cols() / heads_;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Matrix<T> w(b, heads_);
    for (Eigen::Index r = 0; r < b; ++r)
      for (Eigen::Index h = 0; h < heads_; ++h) {
        // Softmax over the key sequence, which has length one.
        const T score = q.row(r).segment(h * dh, dh).dot(k.row(r).segment(h * dh, dh)) * inv_sqrt;
        const T max_score = score;
        const T e = std::exp(score - max_score);
        const T sum = e;
        w(r, h) = e / sum;
      }
    return w;
  }

  Matrix<T> weighted_values(const Matrix<T>& w, const Matrix<T>& v) const {
    const Eigen::Index dh = v.cols() / heads_;
    Matrix<T> ctx(v.rows(), v.cols());
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index h = 0; h < heads_; ++h) ctx.row(r).segment(h * dh, dh) = w(r, h) * v.row(r).segment(h * dh, dh);
    return ctx;
  }

  int heads_ = 8;
  Linear<T> q_, k_, v_, o_;
  Matrix<T> v_cache_, weights_, q_last_, k_last_;
};

struct FusionConfig {
  int dim = kFeatureDim;
  int heads = 8;
  int mlp_hidden = 512;
};

/// Bidirectional cross-attention with residual + layer norm on each branch,
/// concatenation, and a two-layer fusion MLP back to the feature width.
template <class T>
class Fusion {
 public:
  Fusion() = default;
  Fusion(const FusionConfig& cfg, Rng& rng)
      : rgb2geo_(cfg.dim, cfg.heads, rng), geo2rgb_(cfg.dim, cfg.heads, rng), norm_rgb_(cfg.dim),
        norm_geo_(cfg.dim), mlp_({2 * cfg.dim, cfg.mlp_hidden, cfg.dim}, rng), dim_(cfg.dim) {}

  Matrix<T> forward(const Matrix<T>& rgb, const Matrix<T>& geo) {
    check(rgb, geo);
    const Matrix<T> r = norm_rgb_.forward(rgb + rgb2geo_.forward(rgb, geo));
    const Matrix<T> g = norm_geo_.forward(geo + geo2rgb_.forward(geo, rgb));
    return mlp_.forward(concat(r, g));
  }

  Matrix<T> apply(const Matrix<T>& rgb, const Matrix<T>& geo) const {
    check(rgb, geo);
    const Matrix<T> r = norm_rgb_.apply(rgb + rgb2geo_.apply(rgb, geo));
    const Matrix<T> g = norm_geo_.apply(geo + geo2rgb_.apply(geo, rgb));
    return mlp_.apply(concat(r, g));
  }

  struct Grads {
    Matrix<T> d_rgb;
    Matrix<T> d_geo;
  };

  Grads backward(const Matrix<T>& dy) {
    const Matrix<T> dcat = mlp_.backward(dy);
    const Matrix<T> dr = norm_rgb_.backward(dcat.leftCols(dim_));
    const Matrix<T> dg = norm_geo_.backward(dcat.rightCols(dim_));
    const auto a = rgb2geo_.backward(dr);
    const auto b = geo2rgb_.backward(dg);
    return {dr + a.d_query + b.d_kv, dg + b.d_query + a.d_kv};
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    rgb2geo_.parameters(out, prefix + ".attn_rgb2geo", group);
    geo2rgb_.parameters(out, prefix + ".attn_geo2rgb", group);
    norm_rgb_.parameters(out, prefix + ".norm_rgb", group);
    norm_geo_.parameters(out, prefix + ".norm_geo", group);
    mlp_.parameters(out, prefix + ".mlp", group);
  }

  CrossAttention<T>& rgb_to_geo() { return rgb2geo_; }
  CrossAttention<T>& geo_to_rgb() { return geo2rgb_; }
  Mlp<T>& mlp() { return mlp_; }

 private:
  void check(const Matrix<T>& rgb, const Matrix<T>& geo) const {
    require(rgb.cols() == dim_ && geo.cols() == dim_,
            "fuse: both features must be " + std::to_string(dim_) + "-d");
    require(rgb.rows() == geo.rows(), "fuse: batch sizes differ");
  }

  static Matrix<T> concat(const Matrix<T>& x, const Matrix<T>& y) {
    Matrix<T> out(x.rows(), x.cols() + y.cols());
    out << x, y;
    return out;
  }

  CrossAttention<T> rgb2geo_, geo2rgb_;
  LayerNorm<T> norm_rgb_, norm_geo_;
  Mlp<T> mlp_;
  int dim_ = kFeatureDim;
};

struct HeadsConfig {
  int dim = kFeatureDim;
  int class_count = 108;
  std::vector<int> cls_hidden{512, 256};
  int vol_hidden = 128;
  std::vector<int> energy_hidden{128, 128};
};

template <class T>
struct Predictions {
  Matrix<T> class_logits;  // B x C
  Vector<T> volume;        // mL, > 0
  Vector<T> energy;        // kcal
};

/**
 * @brief Classification, volume and energy heads.
 *
 * Volume is softplus(head) * volume_scale; energy reads the fused feature
 * concatenated with the unscaled softplus volume and is multiplied by
 * energy_scale. The scales are fixed target-unit constants (1 by default).
 */
template <class T>
class Heads {
 public:
  Heads() = default;
  Heads(const HeadsConfig& cfg, Rng& rng) {
    std::vector<int> cls{cfg.dim};
    cls.insert(cls.end(), cfg.cls_hidden.begin(), cfg.cls_hidden.end());
    cls.push_back(cfg.class_count);
    cls_ = Mlp<T>(cls, rng);
    vol_ = Mlp<T>({cfg.dim, cfg.vol_hidden, 1}, rng);
    std::vector<int> en{cfg.dim + 1};
    en.insert(en.end(), cfg.energy_hidden.begin(), cfg.energy_hidden.end());
    en.push_back(1);
    energy_ = Mlp<T>(en, rng);
    class_count_ = cfg.class_count;
  }

  int class_count() const { return class_count_; }
  int energy_input_dim() const { return energy_.in_dim(); }

  void set_target_scales(double volume_scale, double energy_scale) {
    require(volume_scale > 0 && energy_scale > 0, "target scales must be positive");
    volume_scale_ = volume_scale, energy_scale_ = energy_scale;
  }
  double volume_scale() const { return volume_scale_; }
  double energy_scale() const { return energy_scale_; }

  Matrix<T> classify(const Matrix<T>& f) { return cls_.forward(f); }

  Predictions<T> forward(const Matrix<T>& f) {
    Predictions<T> p;
    p.class_logits = cls_.forward(f);
    vol_pre_ = vol_.forward(f).col(0);
    const Vector<T> unit_vol = vol_pre_.unaryExpr([](T x) { return softplus(x); });
    p.volume = unit_vol * static_cast<T>(volume_scale_);
    p.energy = energy_.forward(concat(f, unit_vol)).col(0) * static_cast<T>(energy_scale_);
    return p;
  }

  Predictions<T> apply(const Matrix<T>& f) const {
    Predictions<T> p;
    p.class_logits = cls_.apply(f);
    const Vector<T> unit_vol = vol_.apply(f).col(0).unaryExpr([](T x) { return softplus(x); });
    p.volume = unit_vol * static_cast<T>(volume_scale_);
    p.energy = energy_.apply(concat(f, unit_vol)).col(0) * static_cast<T>(energy_scale_);
    return p;
  }

  /// Returns d(loss)/d(fused feature).
  Matrix<T> backward(const Matrix<T>& d_logits, const Vector<T>& d_volume, const Vector<T>& d_energy) {
    Matrix<T> df = cls_.backward(d_logits);
    const Matrix<T> de_in = energy_.backward(d_energy * static_cast<T>(energy_scale_));
    const Eigen::Index dim = df.cols();
    df += de_in.leftCols(dim);
    // Volume path: direct loss gradient (through the scale) plus the energy head's use of unit volume.
    const Vector<T> d_unit = d_volume * static_cast<T>(volume_scale_) + de_in.col(dim);
    const Vector<T> d_pre = d_unit.cwiseProduct(vol_pre_.unaryExpr([](T x) { return sigmoid(x); }));
    df += vol_.backward(d_pre);
    return df;
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    cls_.parameters(out, prefix + ".cls", group);
    vol_.parameters(out, prefix + ".vol", group);
    energy_.parameters(out, prefix + ".energy", group);
  }

  Mlp<T>& volume_mlp() { return vol_; }
  Mlp<T>& energy_mlp() { return energy_; }

 private:
  static Matrix<T> concat(const Matrix<T>& f, const Vector<T>& v) {
    Matrix<T> out(f.rows(), f.cols() + 1);
    out << f, v;
    return out;
  }

  Mlp<T> cls_, vol_, energy_;
  int class_count_ = 0;
  double volume_scale_ = 1.0, energy_scale_ = 1.0;
  Vector<T> vol_pre_;
};

}  // namespace portionnet
