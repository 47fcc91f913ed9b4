#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "portionnet/portionnet.hpp"

namespace portionnet::fixtures {

/// Reduced widths so double-precision finite differences stay fast.
inline ModelConfig tiny_model_config(int class_count = 4) {
  ModelConfig cfg;
  cfg.rgb.patch_size = 8;
  cfg.rgb.patch_dim = 12;
  cfg.rgb.conv_channels1 = 4;
  cfg.rgb.conv_channels2 = 6;
  cfg.rgb.conv_dim = 8;
  cfg.rgb.proj_hidden = 16;
  cfg.rgb.out_dim = 16;
  cfg.geo.pointnet_widths = {8, 12};
  cfg.geo.bbox_dim = 6;
  cfg.geo.proj_hidden = 16;
  cfg.geo.out_dim = 16;
  cfg.geo.n_points = 64;
  cfg.adapter = {16, 24, 16};
  cfg.fusion = {16, 4, 24};
  cfg.heads.dim = 16;
  cfg.heads.class_count = class_count;
  cfg.heads.cls_hidden = {12, 8};
  cfg.heads.vol_hidden = 8;
  cfg.heads.energy_hidden = {8, 8};
  cfg.init_seed = 7;
  return cfg;
}

inline SyntheticConfig tiny_data_config(int class_count = 4, int per_class = 5) {
  SyntheticConfig cfg;
  cfg.class_count = class_count;
  cfg.samples_per_class = per_class;
  cfg.n_points = 64;
  cfg.resolution = 32;
  cfg.seed = 11;
  return cfg;
}

inline Matrix<double> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/**
 * @brief Checks parameter gradients of a module under L = sum(y .* R).
 *
 * @param forward caching forward pass returning y
 * @param backward accumulates parameter gradients for upstream dy
 * @param apply non-caching forward used for the finite differences
 */
inline GradCheckResult check_module(ParamList<double> params, const std::function<Matrix<double>()>& forward,
                                    const std::function<void(const Matrix<double>&)>& backward,
                                    const std::function<Matrix<double>()>& apply, Rng& rng) {
  const Matrix<double> y = forward();
  const Matrix<double> r = random_projection(y.rows(), y.cols(), rng);
  zero_grads(params);
  backward(r);
  std::vector<Matrix<double>> analytic;
  for (const auto& p : params) analytic.push_back(*p.grad);
  auto loss = [&] { return apply().cwiseProduct(r).sum(); };
  GradCheckResult total;
  for (std::size_t i = 0; i < params.size(); ++i)
    total.merge(check_gradient(*params[i].value, analytic[i], loss, params[i].name, 1e-5, 12));
  return total;
}

/// Gradient of L = sum(y .* R) w.r.t. a module input.
inline GradCheckResult check_input(Matrix<double>& x, const std::function<Matrix<double>()>& forward,
                                   const std::function<Matrix<double>(const Matrix<double>&)>& backward,
                                   const std::function<Matrix<double>()>& apply, Rng& rng,
                                   const std::string& name) {
  const Matrix<double> y = forward();
  const Matrix<double> r = random_projection(y.rows(), y.cols(), rng);
  const Matrix<double> analytic = backward(r);
  return check_gradient(x, analytic, [&] { return apply().cwiseProduct(r).sum(); }, name, 1e-5, 24);
}

inline ImageBatch<double> random_images(int batch, int res, Rng& rng) {
  ImageBatch<double> img;
  img.height = img.width = res;
  img.pixels.resize(batch, static_cast<Eigen::Index>(res) * res * 3);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = rng.uniform();
  return img;
}

inline PointBatch<double> random_points(int batch, int n, Rng& rng) {
  PointBatch<double> pts;
  pts.n_points = n;
  pts.points = random_matrix(static_cast<Eigen::Index>(batch) * n, 3, rng, 0.05);
  pts.bbox.resize(batch, 3);
  for (Eigen::Index i = 0; i < pts.bbox.size(); ++i) pts.bbox.data()[i] = rng.uniform(0.03, 0.15);
  return pts;
}

struct NamedCheck {
  std::string name;
  GradCheckResult result;
};

/// Gradient checks of every trainable module and every loss on reduced
/// dimensions, in double precision.
inline std::vector<NamedCheck> module_gradient_checks() {
  std::vector<NamedCheck> out;
  Rng rng(99);
  const ModelConfig cfg = tiny_model_config();

  {  // RGB encoder: both backbones plus projection.
    Rng init(1);
    RgbEncoder<double> enc(cfg.rgb, init);
    auto images = random_images(2, 16, rng);
    ParamList<double> ps;
    enc.parameters(ps, "rgb", ParamGroup::encoder);
    out.push_back({"encoders/rgb", check_module(
                                       ps, [&] { return enc.forward(images); },
                                       [&](const Matrix<double>& dy) { enc.backward(dy); },
                                       [&] { return enc.apply(images); }, rng)});
  }
  {  // Geometry encoder: per-point MLP, multiscale pooling, box embedding, projection.
    Rng init(2);
    GeometryEncoder<double> enc(cfg.geo, init);
    auto pts = random_points(2, cfg.geo.n_points, rng);
    ParamList<double> ps;
    enc.parameters(ps, "geo", ParamGroup::encoder);
    out.push_back({"encoders/geometry", check_module(
                                            ps, [&] { return enc.forward(pts); },
                                            [&](const Matrix<double>& dy) { enc.backward(dy); },
                                            [&] { return enc.apply(pts); }, rng)});
  }
  {  // Multiscale pooling w.r.t. its input.
    Matrix<double> f = random_matrix(80, 5, rng);
    const std::vector<int> res{8, 16, 64};
    std::vector<Eigen::Index> picks;
    out.push_back({"encoders/multiscale_pool",
                   check_input(
                       f, [&] { return Matrix<double>(multiscale_pool<double>(f, res, &picks)); },
                       [&](const Matrix<double>& dy) {
                         return multiscale_pool_backward<double>(dy.row(0), f.rows(), f.cols(), res, picks);
                       },
                       [&] { return Matrix<double>(multiscale_pool<double>(f, res)); }, rng, "features")});
  }
  {  // Adapter: parameters and input.
    Rng init(3);
    Adapter<double> ad(cfg.adapter, init);
    Matrix<double> x = random_matrix(3, cfg.adapter.in_dim, rng);
    ParamList<double> ps;
    ad.parameters(ps, "adapter", ParamGroup::head);
    GradCheckResult g = check_module(
        ps, [&] { return ad.forward(x); }, [&](const Matrix<double>& dy) { ad.backward(dy); },
        [&] { return ad.apply(x); }, rng);
    g.merge(check_input(
        x, [&] { return ad.forward(x); }, [&](const Matrix<double>& dy) { return ad.backward(dy); },
        [&] { return ad.apply(x); }, rng, "rgb"));
    out.push_back({"adapter", g});
  }
  {  // Fusion: parameters and both inputs.
    Rng init(4);
    Fusion<double> fu(cfg.fusion, init);
    Matrix<double> a = random_matrix(3, cfg.fusion.dim, rng), b = random_matrix(3, cfg.fusion.dim, rng);
    ParamList<double> ps;
    fu.parameters(ps, "fusion", ParamGroup::head);
    GradCheckResult g = check_module(
        ps, [&] { return fu.forward(a, b); }, [&](const Matrix<double>& dy) { fu.backward(dy); },
        [&] { return fu.apply(a, b); }, rng);
    g.merge(check_input(
        a, [&] { return fu.forward(a, b); }, [&](const Matrix<double>& dy) { return fu.backward(dy).d_rgb; },
        [&] { return fu.apply(a, b); }, rng, "rgb"));
    g.merge(check_input(
        b, [&] { return fu.forward(a, b); }, [&](const Matrix<double>& dy) { return fu.backward(dy).d_geo; },
        [&] { return fu.apply(a, b); }, rng, "geo"));
    out.push_back({"fusion", g});
  }
  {  // Heads: logits, volume and energy jointly, with non-unit target scales.
    Rng init(5);
    Heads<double> h(cfg.heads, init);
    h.set_target_scales(3.0, 5.0);
    Matrix<double> f = random_matrix(3, cfg.heads.dim, rng);
    const int c = cfg.heads.class_count;
    auto stack = [c](const Predictions<double>& p) {
      Matrix<double> y(p.class_logits.rows(), c + 2);
      y << p.class_logits, p.volume, p.energy;
      return y;
    };
    auto split_back = [&, c](const Matrix<double>& dy) {
      return h.backward(dy.leftCols(c), Vector<double>(dy.col(c)), Vector<double>(dy.col(c + 1)));
    };
    ParamList<double> ps;
    h.parameters(ps, "head", ParamGroup::head);
    GradCheckResult g = check_module(
        ps, [&] { return stack(h.forward(f)); }, [&](const Matrix<double>& dy) { split_back(dy); },
        [&] { return stack(h.apply(f)); }, rng);
    g.merge(check_input(
        f, [&] { return stack(h.forward(f)); }, split_back, [&] { return stack(h.apply(f)); }, rng, "fused"));
    out.push_back({"heads", g});
  }
  // Losses, via the loss-check report.
  for (const auto& c : run_loss_checks())
    if (c.name.rfind("gradient/", 0) == 0) {
      GradCheckResult g;
      g.max_rel_error = c.actual;
      g.worst = c.name;
      g.checked = 1;
      out.push_back({"losses/" + c.name.substr(9), g});
    }
  return out;
}

/**
 * @brief Full training-step gradient check on a small batch, every mode and
 * distillation weight combination, in double precision.
 *
 * With lambda > 0 the distillation target is a stopped gradient, so the
 * teacher's finite differences include a term backward omits by design;
 * geometry parameters are only checked at lambda = 0.
 */
inline std::vector<NamedCheck> full_model_gradient_checks(const Dataset& data, const ModelConfig& cfg) {
  std::vector<NamedCheck> out;
  const std::vector<std::size_t> idx{0, 5, 13, 22};
  const Batch<double> batch = make_batch<double>(data, idx);
  for (auto mode : {TrainingMode::multimodal, TrainingMode::rgb_only})
    for (double lambda : {0.0, 0.5}) {
      PortionNet<double> model(cfg);
      model.heads().set_target_scales(200.0, 250.0);
      LossSettings ls;
      ls.task.distill = lambda;
      const auto params = model.parameters();
      zero_grads(params);
      model.train_step(batch, mode, ls);
      std::vector<Matrix<double>> analytic;
      for (const auto& p : params) analytic.push_back(*p.grad);
      auto loss = [&] {
        PortionNet<double> copy = model;
        return copy.train_step(batch, mode, ls).bundle.l_total;
      };
      GradCheckResult total;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (lambda > 0 && params[i].name.rfind("geo.", 0) == 0) continue;
        total.merge(check_gradient(*params[i].value, analytic[i], loss, params[i].name, 1e-5, 6));
      }
      std::ostringstream name;
      name << "model/" << to_string(mode) << "_lambda" << lambda;
      out.push_back({name.str(), total});
    }
  return out;
}

}  // namespace portionnet::fixtures
