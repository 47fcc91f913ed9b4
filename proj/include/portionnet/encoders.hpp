#pragma once

#include <algorithm>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "portionnet/data_model.hpp"
#include "portionnet/layers.hpp"

namespace portionnet {

inline constexpr int kFeatureDim = 256;
inline constexpr int kBboxEmbedDim = 64;
inline constexpr std::array<int, 4> kPoolResolutions{64, 128, 256, 512};

/// Batch of rasters flattened to rows of H*W*3 channel-interleaved values.
template <class T>
struct ImageBatch {
  int height = 0;
  int width = 0;
  Matrix<T> pixels;

  Eigen::Index size() const { return pixels.rows(); }
};

/// Batch of equally sized point clouds stacked as (B*N) x 3, plus B x 3 box extents.
template <class T>
struct PointBatch {
  int n_points = 0;
  Matrix<T> points;
  Matrix<T> bbox;

  Eigen::Index size() const { return bbox.rows(); }
};

struct BackboneSpec {
  std::string name;
  int output_dim = 0;
};

/// Image feature extractor feeding the RGB projection. Pretrained networks can
/// be plugged in by implementing this interface.
template <class T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BackboneSpec spec() const = 0;
  virtual Matrix<T> forward(const ImageBatch<T>& images) = 0;
  virtual Matrix<T> apply(const ImageBatch<T>& images) const = 0;
  virtual void backward(const Matrix<T>& dy) = 0;
  virtual void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) = 0;
  virtual std::unique_ptr<Backbone<T>> clone() const = 0;
};

// ---------------------------------------------------------------------------

/// ViT-style stand-in: non-overlapping patches, linear patch embedding, one
/// residual token MLP, mean over tokens.
template <class T>
class PatchEncoder final : public Backbone<T> {
 public:
  PatchEncoder(int patch, int embed_dim, int mlp_hidden, Rng& rng)
      : patch_(patch), embed_(patch * patch * 3, embed_dim, rng) {
    require_config(patch >= 1 && embed_dim >= 1, "PatchEncoder: invalid dimensions");
    if (mlp_hidden > 0) mlp_ = Mlp<T>({embed_dim, mlp_hidden, embed_dim}, rng), has_mlp_ = true;
  }

  BackboneSpec spec() const override { return {"patch", embed_.out_dim()}; }

  Matrix<T> forward(const ImageBatch<T>& images) override {
    batch_ = images.size();
    const Matrix<T> patches = extract(images, tokens_);
    Matrix<T> t = embed_.forward(patches);
    if (has_mlp_) t += mlp_.forward(t);
    return mean_tokens(t);
  }

  Matrix<T> apply(const ImageBatch<T>& images) const override {
    Eigen::Index tokens = 0;
    const Matrix<T> patches = extract(images, tokens);
    Matrix<T> t = embed_.apply(patches);
    if (has_mlp_) t += mlp_.apply(t);
    Matrix<T> out(images.size(), t.cols());
    for (Eigen::Index b = 0; b < images.size(); ++b)
      out.row(b) = t.middleRows(b * tokens, tokens).colwise().mean();
    return out;
  }

  void backward(const Matrix<T>& dy) override {
    Matrix<T> dt(batch_ * tokens_, dy.cols());
    for (Eigen::Index b = 0; b < batch_; ++b)
      dt.middleRows(b * tokens_, tokens_).rowwise() = dy.row(b) / static_cast<T>(tokens_);
    if (has_mlp_) dt += mlp_.backward(dt);
    embed_.backward(dt);
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) override {
    embed_.parameters(out, prefix + ".patch_embed", group);
    if (has_mlp_) mlp_.parameters(out, prefix + ".mlp", group);
  }

  std::unique_ptr<Backbone<T>> clone() const override { return std::make_unique<PatchEncoder>(*this); }

 private:
  Matrix<T> extract(const ImageBatch<T>& images, Eigen::Index& tokens) const {
    require_config(images.height >= patch_ && images.width >= patch_ && images.height % patch_ == 0 &&
                       images.width % patch_ == 0,
                   "PatchEncoder: image size " + std::to_string(images.height) + "x" +
                       std::to_string(images.width) + " is not a multiple of patch size " +
                       std::to_string(patch_));
    const int ph = images.height / patch_, pw = images.width / patch_;
    tokens = static_cast<Eigen::Index>(ph) * pw;
    const int pdim = patch_ * patch_ * 3;
    Matrix<T> patches(images.size() * tokens, pdim);
    for (Eigen::Index b = 0; b < images.size(); ++b) {
      for (int py = 0; py < ph; ++py) {
        for (int px = 0; px < pw; ++px) {
          const Eigen::Index row = b * tokens + py * pw + px;
          int col = 0;
          for (int y = 0; y < patch_; ++y) {
            const Eigen::Index src = (static_cast<Eigen::Index>(py * patch_ + y) * images.width + px * patch_) * 3;
            for (int k = 0; k < patch_ * 3; ++k) patches(row, col++) = images.pixels(b, src + k);
          }
        }
      }
    }
    return patches;
  }

  Matrix<T> mean_tokens(const Matrix<T>& t) const {
    Matrix<T> out(batch_, t.cols());
    for (Eigen::Index b = 0; b < batch_; ++b) out.row(b) = t.middleRows(b * tokens_, tokens_).colwise().mean();
    return out;
  }

  int patch_;
  Linear<T> embed_;
  Mlp<T> mlp_;
  bool has_mlp_ = false;
  Eigen::Index batch_ = 0, tokens_ = 0;
};

/// k x k convolution over NHWC maps stored as (B*H*W) x C, via im2col.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
      : in_ch_(in_ch), kernel_(kernel), stride_(stride), pad_(pad), linear_(kernel * kernel * in_ch, out_ch, rng) {}

  int out_size(int n) const { return (n + 2 * pad_ - kernel_) / stride_ + 1; }

  Matrix<T> forward(const Matrix<T>& x, Eigen::Index batch, int height, int width) {
    batch_ = batch, h_ = height, w_ = width;
    return linear_.forward(im2col(x, batch, height, width));
  }

  Matrix<T> apply(const Matrix<T>& x, Eigen::Index batch, int height, int width) const {
    return linear_.apply(im2col(x, batch, height, width));
  }

  Matrix<T> backward(const Matrix<T>& dy) {
    const Matrix<T> dcols = linear_.backward(dy);
    const int ho = out_size(h_), wo = out_size(w_);
    Matrix<T> dx = Matrix<T>::Zero(batch_ * h_ * w_, in_ch_);
    for (Eigen::Index b = 0; b < batch_; ++b)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index row = (b * ho + oy) * wo + ox;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h_) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= w_) continue;
              dx.row((b * h_ + iy) * w_ + ix) += dcols.row(row).segment((ky * kernel_ + kx) * in_ch_, in_ch_);
            }
          }
        }
    return dx;
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    linear_.parameters(out, prefix, group);
  }

 private:
  Matrix<T> im2col(const Matrix<T>& x, Eigen::Index batch, int height, int width) const {
    require(x.cols() == in_ch_ && x.rows() == batch * height * width, "Conv2d: input shape mismatch");
    const int ho = out_size(height), wo = out_size(width);
    require_config(ho >= 1 && wo >= 1, "Conv2d: input smaller than kernel");
    Matrix<T> cols = Matrix<T>::Zero(batch * ho * wo, kernel_ * kernel_ * in_ch_);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const Eigen::Index row = (b * ho + oy) * wo + ox;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= height) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= width) continue;
              cols.row(row).segment((ky * kernel_ + kx) * in_ch_, in_ch_) = x.row((b * height + iy) * width + ix);
            }
          }
        }
    return cols;
  }

  int in_ch_ = 0, kernel_ = 3, stride_ = 1, pad_ = 0;
  Linear<T> linear_;
  Eigen::Index batch_ = 0;
  int h_ = 0, w_ = 0;
};

/// ResNet-style stand-in: two strided convolutions, global average pool, linear head.
template <class T>
class ConvEncoder final : public Backbone<T> {
 public:
  ConvEncoder(int channels1, int channels2, int output_dim, Rng& rng)
      : conv1_(3, channels1, 3, 2, 1, rng), conv2_(channels1, channels2, 3, 2, 1, rng), fc_(channels2, output_dim, rng) {}

  BackboneSpec spec() const override { return {"conv", fc_.out_dim()}; }

  Matrix<T> forward(const ImageBatch<T>& images) override {
    check(images);
    batch_ = images.size();
    h1_ = conv1_.out_size(images.height), w1_ = conv1_.out_size(images.width);
    h2_ = conv2_.out_size(h1_), w2_ = conv2_.out_size(w1_);
    const Matrix<T> x = as_nhwc(images);
    pre1_ = conv1_.forward(x, batch_, images.height, images.width);
    pre2_ = conv2_.forward(silu(pre1_), batch_, h1_, w1_);
    return fc_.forward(pool(silu(pre2_), batch_, h2_ * w2_));
  }

  Matrix<T> apply(const ImageBatch<T>& images) const override {
    check(images);
    const int h1 = conv1_.out_size(images.height), w1 = conv1_.out_size(images.width);
    const int h2 = conv2_.out_size(h1), w2 = conv2_.out_size(w1);
    const Matrix<T> a1 = silu(conv1_.apply(as_nhwc(images), images.size(), images.height, images.width));
    const Matrix<T> a2 = silu(conv2_.apply(a1, images.size(), h1, w1));
    return fc_.apply(pool(a2, images.size(), h2 * w2));
  }

  void backward(const Matrix<T>& dy) override {
    const Matrix<T> dpooled = fc_.backward(dy);
    const Eigen::Index area = static_cast<Eigen::Index>(h2_) * w2_;
    Matrix<T> da2(batch_ * area, dpooled.cols());
    for (Eigen::Index b = 0; b < batch_; ++b)
      da2.middleRows(b * area, area).rowwise() = dpooled.row(b) / static_cast<T>(area);
    const Matrix<T> da1 = conv2_.backward(silu_backward(pre2_, da2));
    conv1_.backward(silu_backward(pre1_, da1));
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) override {
    conv1_.parameters(out, prefix + ".conv1", group);
    conv2_.parameters(out, prefix + ".conv2", group);
    fc_.parameters(out, prefix + ".fc", group);
  }

  std::unique_ptr<Backbone<T>> clone() const override { return std::make_unique<ConvEncoder>(*this); }

 private:
  static void check(const ImageBatch<T>& images) {
    require_config(images.height >= 8 && images.width >= 8, "ConvEncoder: images must be at least 8x8");
    require(images.pixels.cols() == static_cast<Eigen::Index>(images.height) * images.width * 3,
            "ConvEncoder: pixel row width does not match image size");
  }

  static Matrix<T> as_nhwc(const ImageBatch<T>& images) {
    Matrix<T> x(images.size() * images.height * images.width, 3);
    std::copy(images.pixels.data(), images.pixels.data() + images.pixels.size(), x.data());
    return x;
  }

  static Matrix<T> pool(const Matrix<T>& a, Eigen::Index batch, Eigen::Index area) {
    Matrix<T> out(batch, a.cols());
    for (Eigen::Index b = 0; b < batch; ++b) out.row(b) = a.middleRows(b * area, area).colwise().mean();
    return out;
  }

  Conv2d<T> conv1_, conv2_;
  Linear<T> fc_;
  Eigen::Index batch_ = 0;
  int h1_ = 0, w1_ = 0, h2_ = 0, w2_ = 0;
  Matrix<T> pre1_, pre2_;
};

// ---------------------------------------------------------------------------

struct RgbEncoderConfig {
  int patch_size = 8;
  int patch_dim = 768;
  int patch_mlp_hidden = 0;
  int conv_channels1 = 16;
  int conv_channels2 = 32;
  int conv_dim = 512;
  int proj_hidden = 512;
  int out_dim = kFeatureDim;
};

/// Two backbones, concatenated (768 + 512 = 1280 by default), then a
/// two-layer projection to the shared feature width.
template <class T>
class RgbEncoder {
 public:
  RgbEncoder() = default;

  RgbEncoder(const RgbEncoderConfig& cfg, Rng& rng)
      : RgbEncoder(std::make_unique<PatchEncoder<T>>(cfg.patch_size, cfg.patch_dim, cfg.patch_mlp_hidden, rng),
                   std::make_unique<ConvEncoder<T>>(cfg.conv_channels1, cfg.conv_channels2, cfg.conv_dim, rng),
                   cfg.proj_hidden, cfg.out_dim, rng) {}

  RgbEncoder(std::unique_ptr<Backbone<T>> a, std::unique_ptr<Backbone<T>> b, int proj_hidden, int out_dim, Rng& rng)
      : a_(std::move(a)), b_(std::move(b)) {
    proj_ = Mlp<T>({concat_dim(), proj_hidden, out_dim}, rng);
  }

  RgbEncoder(const RgbEncoder& o) : a_(o.a_ ? o.a_->clone() : nullptr), b_(o.b_ ? o.b_->clone() : nullptr), proj_(o.proj_) {}
  RgbEncoder& operator=(const RgbEncoder& o) {
    if (this != &o) *this = RgbEncoder(o);
    return *this;
  }
  RgbEncoder(RgbEncoder&&) noexcept = default;
  RgbEncoder& operator=(RgbEncoder&&) noexcept = default;

  int concat_dim() const { return a_->spec().output_dim + b_->spec().output_dim; }
  std::array<BackboneSpec, 2> backbones() const { return {a_->spec(), b_->spec()}; }

  Matrix<T> forward(const ImageBatch<T>& images) {
    require(images.size() > 0, "encode_rgb: empty batch");
    return proj_.forward(concat(a_->forward(images), b_->forward(images)));
  }

  Matrix<T> apply(const ImageBatch<T>& images) const {
    require(images.size() > 0, "encode_rgb: empty batch");
    return proj_.apply(concat(a_->apply(images), b_->apply(images)));
  }

  /// Concatenated backbone output before projection.
  Matrix<T> backbone_features(const ImageBatch<T>& images) const { return concat(a_->apply(images), b_->apply(images)); }

  void backward(const Matrix<T>& dy) {
    const Matrix<T> dcat = proj_.backward(dy);
    const int da = a_->spec().output_dim;
    a_->backward(dcat.leftCols(da));
    b_->backward(dcat.rightCols(dcat.cols() - da));
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    a_->parameters(out, prefix + ".backbone_a", group);
    b_->parameters(out, prefix + ".backbone_b", group);
    proj_.parameters(out, prefix + ".proj", group);
  }

 private:
  static Matrix<T> concat(const Matrix<T>& x, const Matrix<T>& y) {
    Matrix<T> out(x.rows(), x.cols() + y.cols());
    out << x, y;
    return out;
  }

  std::unique_ptr<Backbone<T>> a_, b_;
  Mlp<T> proj_;
};

// ---------------------------------------------------------------------------

/// Resolutions from the fixed ladder that fit a cloud of n points.
inline std::vector<int> pooling_resolutions(int n_points) {
  std::vector<int> out;
  for (int k : kPoolResolutions)
    if (k <= n_points) out.push_back(k);
  return out;
}

/**
 * @brief Multi-scale adaptive pooling over an unordered point set.
 *
 * Each channel is sorted ascending over the points, which makes the sequence
 * independent of point order. For each resolution k the sorted sequence is
 * adaptively max-pooled to k slots (slot i covers [floor(iN/k), ceil((i+1)N/k)))
 * and the k slots are averaged. Output is the per-resolution D-vectors
 * concatenated, width = resolutions.size() * D.
 *
 * If @p picks is given it receives, per (resolution, channel, slot), the
 * index of the point that supplied the slot maximum; used by backward.
 */
template <class T>
RowVector<T> multiscale_pool(const Eigen::Ref<const Matrix<T>>& features, std::span<const int> resolutions,
                             std::vector<Eigen::Index>* picks = nullptr) {
  const Eigen::Index n = features.rows(), d = features.cols();
  require(n > 0 && d > 0, "multiscale_pool: empty input");
  require(!resolutions.empty(), "multiscale_pool: no resolutions");
  for (int k : resolutions) require(k >= 1 && k <= n, "multiscale_pool: resolution exceeds point count");

  RowVector<T> out(static_cast<Eigen::Index>(resolutions.size()) * d);
  // picks layout: resolution-major, then channel, then slot.
  std::vector<std::size_t> offset(resolutions.size(), 0);
  std::size_t total = 0;
  for (std::size_t s = 0; s < resolutions.size(); ++s) {
    offset[s] = total;
    total += static_cast<std::size_t>(resolutions[s]) * static_cast<std::size_t>(d);
  }
  if (picks) picks->assign(total, 0);

  // Channel-contiguous copy; (value, index) pairs sort ties by point index,
  // which keeps the picks deterministic.
  const Matrix<T> channels = features.transpose();
  std::vector<std::pair<T, Eigen::Index>> order(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < d; ++c) {
    const T* row = channels.data() + c * n;
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = {row[i], i};
    std::sort(order.begin(), order.end());
    for (std::size_t s = 0; s < resolutions.size(); ++s) {
      const Eigen::Index k = resolutions[s];
      T acc = T(0);
      for (Eigen::Index slot = 0; slot < k; ++slot) {
        const Eigen::Index end = ((slot + 1) * n + k - 1) / k;
        const auto& [value, src] = order[static_cast<std::size_t>(end - 1)];
        acc += value;
        if (picks) (*picks)[offset[s] + static_cast<std::size_t>(c * k + slot)] = src;
      }
      out(static_cast<Eigen::Index>(s) * d + c) = acc / static_cast<T>(k);
    }
  }
  return out;
}

/// Gradient of multiscale_pool w.r.t. its N x D input, given the recorded picks.
template <class T>
Matrix<T> multiscale_pool_backward(const RowVector<T>& dout, Eigen::Index n, Eigen::Index d,
                                   std::span<const int> resolutions, const std::vector<Eigen::Index>& picks) {
  Matrix<T> dx = Matrix<T>::Zero(n, d);
  std::size_t p = 0;
  for (std::size_t s = 0; s < resolutions.size(); ++s) {
    const Eigen::Index k = resolutions[s];
    for (Eigen::Index c = 0; c < d; ++c) {
      const T g = dout(static_cast<Eigen::Index>(s) * d + c) / static_cast<T>(k);
      for (Eigen::Index slot = 0; slot < k; ++slot) dx(picks[p++], c) += g;
    }
  }
  return dx;
}

/// Learned R^3 -> R^64 embedding of bounding-box extents.
template <class T>
class BboxEmbedding {
 public:
  BboxEmbedding() = default;
  BboxEmbedding(int out_dim, Rng& rng) : linear_(3, out_dim, rng) {}

  Matrix<T> forward(const Matrix<T>& dims) {
    check(dims);
    pre_ = linear_.forward(dims);
    return silu(pre_);
  }
  Matrix<T> apply(const Matrix<T>& dims) const {
    check(dims);
    return silu(linear_.apply(dims));
  }
  Matrix<T> backward(const Matrix<T>& dy) { return linear_.backward(silu_backward(pre_, dy)); }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    linear_.parameters(out, prefix, group);
  }

  int out_dim() const { return linear_.out_dim(); }

 private:
  static void check(const Matrix<T>& dims) {
    require(dims.cols() == 3, "embed_bbox: expected 3 extents per row");
    require((dims.array() > T(0)).all(), "embed_bbox: bounding-box extents must be positive");
  }

  Linear<T> linear_;
  Matrix<T> pre_;
};

struct GeometryEncoderConfig {
  std::vector<int> pointnet_widths{64, 128, 256};
  int bbox_dim = kBboxEmbedDim;
  int proj_hidden = 512;
  int out_dim = kFeatureDim;
  int n_points = 1024;
  // Fixed unit conversion applied to coordinates and extents (10 -> decimeters).
  // A constant, so absolute scale survives into the features.
  double coordinate_scale = 10.0;
};

/**
 * @brief PointNet-style geometry encoder (the distillation teacher).
 *
 * Shared per-point MLP (SiLU after every layer) -> multi-scale pooling ->
 * concatenation with the bounding-box embedding -> two-layer projection.
 */
template <class T>
class GeometryEncoder {
 public:
  GeometryEncoder() = default;

  GeometryEncoder(const GeometryEncoderConfig& cfg, Rng& rng)
      : n_points_(cfg.n_points), scale_(cfg.coordinate_scale), resolutions_(pooling_resolutions(cfg.n_points)) {
    require_config(cfg.n_points >= kMinCloudSize,
                   "GeometryEncoder: n_points must be >= " + std::to_string(kMinCloudSize));
    require_config(!cfg.pointnet_widths.empty(), "GeometryEncoder: pointnet_widths must not be empty");
    std::vector<int> dims{3};
    dims.insert(dims.end(), cfg.pointnet_widths.begin(), cfg.pointnet_widths.end());
    pointnet_ = Mlp<T>(dims, rng);
    bbox_ = BboxEmbedding<T>(cfg.bbox_dim, rng);
    const int pooled = static_cast<int>(resolutions_.size()) * cfg.pointnet_widths.back();
    proj_ = Mlp<T>({pooled + cfg.bbox_dim, cfg.proj_hidden, cfg.out_dim}, rng);
  }

  const std::vector<int>& resolutions() const { return resolutions_; }
  int n_points() const { return n_points_; }

  Matrix<T> forward(const PointBatch<T>& batch) {
    check(batch);
    batch_ = batch.size();
    point_pre_ = pointnet_.forward(batch.points * static_cast<T>(scale_));
    const Matrix<T> f = silu(point_pre_);
    const Eigen::Index d = f.cols();
    picks_.assign(static_cast<std::size_t>(batch_), {});
    Matrix<T> pooled(batch_, static_cast<Eigen::Index>(resolutions_.size()) * d);
    for (Eigen::Index b = 0; b < batch_; ++b)
      pooled.row(b) = multiscale_pool<T>(f.middleRows(b * n_points_, n_points_), resolutions_,
                                         &picks_[static_cast<std::size_t>(b)]);
    const Matrix<T> emb = bbox_.forward(batch.bbox * static_cast<T>(scale_));
    return proj_.forward(concat(pooled, emb));
  }

  Matrix<T> apply(const PointBatch<T>& batch) const {
    check(batch);
    const Matrix<T> f = silu(pointnet_.apply(batch.points * static_cast<T>(scale_)));
    Matrix<T> pooled(batch.size(), static_cast<Eigen::Index>(resolutions_.size()) * f.cols());
    for (Eigen::Index b = 0; b < batch.size(); ++b)
      pooled.row(b) = multiscale_pool<T>(f.middleRows(b * n_points_, n_points_), resolutions_);
    return proj_.apply(concat(pooled, bbox_.apply(batch.bbox * static_cast<T>(scale_))));
  }

  void backward(const Matrix<T>& dy) {
    const Matrix<T> dcat = proj_.backward(dy);
    const Eigen::Index pooled_width = dcat.cols() - bbox_.out_dim();
    bbox_.backward(dcat.rightCols(bbox_.out_dim()));
    const Eigen::Index d = point_pre_.cols();
    Matrix<T> df(batch_ * n_points_, d);
    for (Eigen::Index b = 0; b < batch_; ++b)
      df.middleRows(b * n_points_, n_points_) = multiscale_pool_backward<T>(
          dcat.row(b).leftCols(pooled_width), n_points_, d, resolutions_, picks_[static_cast<std::size_t>(b)]);
    pointnet_.backward(silu_backward(point_pre_, df));
  }

  void parameters(ParamList<T>& out, const std::string& prefix, ParamGroup group) {
    pointnet_.parameters(out, prefix + ".pointnet", group);
    bbox_.parameters(out, prefix + ".bbox_embed", group);
    proj_.parameters(out, prefix + ".proj", group);
  }

  const BboxEmbedding<T>& bbox_embedding() const { return bbox_; }

 private:
  void check(const PointBatch<T>& batch) const {
    require(batch.size() > 0, "encode_geometry: empty batch");
    require_config(batch.n_points == n_points_, "encode_geometry: expected " + std::to_string(n_points_) +
                                                    " points per cloud, got " + std::to_string(batch.n_points));
    require(batch.points.rows() == batch.size() * n_points_ && batch.points.cols() == 3,
            "encode_geometry: points must be (B*N) x 3");
  }

  static Matrix<T> concat(const Matrix<T>& x, const Matrix<T>& y) {
    Matrix<T> out(x.rows(), x.cols() + y.cols());
    out << x, y;
    return out;
  }

  int n_points_ = 0;
  double scale_ = 1.0;
  std::vector<int> resolutions_;
  Mlp<T> pointnet_;
  BboxEmbedding<T> bbox_;
  Mlp<T> proj_;
  Eigen::Index batch_ = 0;
  Matrix<T> point_pre_;
  std::vector<std::vector<Eigen::Index>> picks_;
};

}  // namespace portionnet
