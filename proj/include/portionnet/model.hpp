#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "portionnet/adapter.hpp"
#include "portionnet/data_model.hpp"
#include "portionnet/encoders.hpp"
#include "portionnet/fusion_heads.hpp"
#include "portionnet/losses.hpp"

namespace portionnet {

/// Which features feed the geometry branch of the fusion module.
enum class TrainingMode { multimodal, rgb_only };

inline std::string to_string(TrainingMode m) { return m == TrainingMode::multimodal ? "multimodal" : "rgb_only"; }

struct ModelConfig {
  RgbEncoderConfig rgb;
  GeometryEncoderConfig geo;
  AdapterConfig adapter;
  FusionConfig fusion;
  HeadsConfig heads;
  std::uint64_t init_seed = 0;
};

/// Full-size layer widths with the stand-in backbones: ViT-B/16-shaped patch
/// encoder (16x16 patches, 768-d, 3072-wide token MLP; 224 px images), 1024 points.
inline ModelConfig faithful_model_config(int class_count = 108) {
  ModelConfig cfg;
  cfg.rgb.patch_size = 16;
  cfg.rgb.patch_mlp_hidden = 3072;
  cfg.rgb.conv_channels1 = 64;
  cfg.rgb.conv_channels2 = 128;
  cfg.geo.n_points = 1024;
  cfg.geo.pointnet_widths = {64, 128, 1024};
  cfg.heads.class_count = class_count;
  return cfg;
}

/// Reduced widths used for the synthetic experiments; the feature interfaces
/// (1280-d concat, 256-d features, 64-d box embedding, 8 heads) are unchanged.
inline ModelConfig desk_model_config(int class_count = 12) {
  ModelConfig cfg;
  cfg.rgb.patch_size = 8;
  cfg.rgb.patch_mlp_hidden = 0;
  cfg.geo.n_points = 512;
  cfg.geo.pointnet_widths = {32, 64, 128};
  cfg.heads.class_count = class_count;
  return cfg;
}

/// A training or evaluation batch in model precision.
template <class T>
struct Batch {
  ImageBatch<T> images;
  PointBatch<T> points;
  std::vector<int> labels;
  Vector<T> volume;
  Vector<T> energy;

  Eigen::Index size() const { return images.size(); }
};

template <class T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  require(!indices.empty(), "make_batch: no samples");
  const auto& first = ds.samples.at(indices[0]);
  const int h = first.image.height, w = first.image.width;
  const int n = static_cast<int>(first.points.rows());
  const auto b = static_cast<Eigen::Index>(indices.size());
  Batch<T> batch;
  batch.images.height = h, batch.images.width = w;
  batch.images.pixels.resize(b, static_cast<Eigen::Index>(h) * w * 3);
  batch.points.n_points = n;
  batch.points.points.resize(b * n, 3);
  batch.points.bbox.resize(b, 3);
  batch.labels.resize(indices.size());
  batch.volume.resize(b);
  batch.energy.resize(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const FoodSample& s = ds.samples.at(indices[static_cast<std::size_t>(i)]);
    require(s.image.height == h && s.image.width == w, "make_batch: mixed image resolutions");
    require(s.points.rows() == n, "make_batch: mixed cloud sizes");
    for (Eigen::Index k = 0; k < batch.images.pixels.cols(); ++k)
      batch.images.pixels(i, k) = static_cast<T>(s.image.pixels[static_cast<std::size_t>(k)]);
    batch.points.points.middleRows(i * n, n) = s.points.cast<T>();
    for (int k = 0; k < 3; ++k) batch.points.bbox(i, k) = static_cast<T>(s.bbox_dims[static_cast<std::size_t>(k)]);
    batch.labels[static_cast<std::size_t>(i)] = s.class_id;
    batch.volume(i) = static_cast<T>(s.volume);
    batch.energy(i) = static_cast<T>(s.energy);
  }
  return batch;
}

template <class T>
Batch<T> make_batch(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch<T>(ds, idx);
}

/// Settings for one loss evaluation; mirrors the relevant training config.
struct LossSettings {
  TaskWeights task;
  DistillWeights distill;
  double label_smoothing = 0.05;
  double huber_delta = 0.5;
};

/**
 * @brief The complete network: RGB encoder, geometry teacher, adapter,
 * fusion and heads.
 *
 * Parameter names are stable and used by checkpoints:
 * rgb.*, geo.*, adapter.*, fusion.*, head.*. rgb and geo train in the
 * encoder learning-rate group, the rest in the head group.
 */
template <class T>
class PortionNet {
 public:
  PortionNet() = default;

  explicit PortionNet(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng(derive_seed(cfg.init_seed, 0x1A17));
    rgb_ = RgbEncoder<T>(cfg.rgb, rng);
    geo_ = GeometryEncoder<T>(cfg.geo, rng);
    adapter_ = Adapter<T>(cfg.adapter, rng);
    fusion_ = Fusion<T>(cfg.fusion, rng);
    heads_ = Heads<T>(cfg.heads, rng);
  }

  // Parameter views point into members; copies rebuild them on demand.
  PortionNet(const PortionNet&) = default;
  PortionNet& operator=(const PortionNet&) = default;

  const ModelConfig& config() const { return cfg_; }
  int class_count() const { return heads_.class_count(); }

  ParamList<T> parameters() {
    ParamList<T> ps;
    rgb_.parameters(ps, "rgb", ParamGroup::encoder);
    geo_.parameters(ps, "geo", ParamGroup::encoder);
    adapter_.parameters(ps, "adapter", ParamGroup::head);
    fusion_.parameters(ps, "fusion", ParamGroup::head);
    heads_.parameters(ps, "head", ParamGroup::head);
    return ps;
  }

  RgbEncoder<T>& rgb_encoder() { return rgb_; }
  GeometryEncoder<T>& geometry_encoder() { return geo_; }
  Adapter<T>& adapter() { return adapter_; }
  Fusion<T>& fusion() { return fusion_; }
  Heads<T>& heads() { return heads_; }
  const RgbEncoder<T>& rgb_encoder() const { return rgb_; }
  const GeometryEncoder<T>& geometry_encoder() const { return geo_; }
  const Adapter<T>& adapter() const { return adapter_; }
  const Fusion<T>& fusion() const { return fusion_; }
  const Heads<T>& heads() const { return heads_; }

  /// Inference. With @p points the teacher feeds fusion (RGB+PC); without,
  /// the adapter does (RGB only) and the geometry encoder is never touched.
  Predictions<T> predict(const ImageBatch<T>& images, const PointBatch<T>* points = nullptr) const {
    const Matrix<T> rgb = rgb_.apply(images);
    const Matrix<T> geo = points ? geo_.apply(*points) : adapter_.apply(rgb);
    return heads_.apply(fusion_.apply(rgb, geo));
  }

  struct StepResult {
    LossBundle bundle;
    Predictions<T> predictions;
    bool adapter_fed_fusion = false;
    bool teacher_fed_fusion = false;
    // ||d(lambda_i L_i)/dW|| at the fusion MLP's output layer, per task
    // (classification, regression); filled when probe norms are requested.
    double probe_norm_cls = 0, probe_norm_reg = 0;
  };

  /**
   * @brief Forward + backward for one (micro-)batch.
   *
   * Gradients of loss_scale * L_total are added to the parameter gradient
   * buffers. The distillation target is the teacher feature with gradient
   * stopped; in rgb_only mode the teacher is still evaluated for that target
   * when the distillation weight is nonzero.
   *
   * @param energy_scale batch normalizer for the energy terms; defaults to
   *        this batch's mean |energy|.
   */
  StepResult train_step(const Batch<T>& batch, TrainingMode mode, const LossSettings& ls, T loss_scale = T(1),
                        std::optional<T> energy_scale = std::nullopt, bool probe_norms = false) {
    const bool use_distill = ls.task.distill > 0.0;
    const bool need_teacher = mode == TrainingMode::multimodal || use_distill;
    const bool need_adapter = mode == TrainingMode::rgb_only || use_distill;

    StepResult res;
    const Matrix<T> rgb = rgb_.forward(batch.images);
    Matrix<T> teacher, adapted;
    if (need_teacher) teacher = geo_.forward(batch.points);
    if (need_adapter) adapted = adapter_.forward(rgb);
    const Matrix<T>& geo_in = mode == TrainingMode::multimodal ? teacher : adapted;
    res.teacher_fed_fusion = mode == TrainingMode::multimodal;
    res.adapter_fed_fusion = mode == TrainingMode::rgb_only;

    const Matrix<T> fused = fusion_.forward(rgb, geo_in);
    res.predictions = heads_.forward(fused);

    const auto cls = classification_loss<T>(res.predictions.class_logits, batch.labels, ls.label_smoothing);
    const auto reg = regression_loss<T>(res.predictions.volume, batch.volume, res.predictions.energy, batch.energy,
                                        ls.huber_delta, energy_scale);
    LossComponents comp;
    comp.l_cls = static_cast<double>(cls.value);
    comp.l_reg = static_cast<double>(reg.value);
    DistillTerms<T> dist;
    if (use_distill) {
      dist = distill_total<T>(adapted, teacher, ls.distill);
      comp.l_distill = static_cast<double>(dist.total);
      comp.distill_mse = static_cast<double>(dist.mse);
      comp.distill_cos = static_cast<double>(dist.cos);
      comp.distill_kl = static_cast<double>(dist.kl);
    }
    res.bundle = total_loss(comp, ls.task);

    const T s = loss_scale;
    const T lc = static_cast<T>(ls.task.cls) * s, lr = static_cast<T>(ls.task.reg) * s;
    Matrix<T> d_fused;
    if (probe_norms) {
      // Head backward is linear in its upstream gradient, so two partial
      // passes accumulate exactly the parameter gradients of one full pass.
      const Matrix<T> zl = Matrix<T>::Zero(cls.d_logits.rows(), cls.d_logits.cols());
      const Vector<T> zv = Vector<T>::Zero(reg.d_volume.size());
      const Matrix<T> d_cls = heads_.backward(cls.d_logits * lc, zv, zv);
      const Matrix<T> d_reg = heads_.backward(zl, reg.d_volume * lr, reg.d_energy * lr);
      const Matrix<T>& h = fusion_.mlp().last().last_input();
      res.probe_norm_cls = static_cast<double>((d_cls.transpose() * h).norm() / s);
      res.probe_norm_reg = static_cast<double>((d_reg.transpose() * h).norm() / s);
      d_fused = d_cls + d_reg;
    } else {
      d_fused = heads_.backward(cls.d_logits * lc, reg.d_volume * lr, reg.d_energy * lr);
    }
    const auto fg = fusion_.backward(d_fused);
    Matrix<T> d_rgb = fg.d_rgb;
    if (mode == TrainingMode::multimodal) geo_.backward(fg.d_geo);
    if (need_adapter) {
      Matrix<T> d_adapted = Matrix<T>::Zero(adapted.rows(), adapted.cols());
      if (mode == TrainingMode::rgb_only) d_adapted += fg.d_geo;
      if (use_distill) d_adapted += dist.d_a * (static_cast<T>(ls.task.distill) * s);
      d_rgb += adapter_.backward(d_adapted);
    }
    rgb_.backward(d_rgb);
    return res;
  }

 private:
  ModelConfig cfg_;
  RgbEncoder<T> rgb_;
  GeometryEncoder<T> geo_;
  Adapter<T> adapter_;
  Fusion<T> fusion_;
  Heads<T> heads_;
};

}  // namespace portionnet
