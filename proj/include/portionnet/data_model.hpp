#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "portionnet/tensor.hpp"

namespace portionnet {

enum class ShapeKind { box, ellipsoid, cylinder };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::box: return "box";
    case ShapeKind::ellipsoid: return "ellipsoid";
    case ShapeKind::cylinder: return "cylinder";
  }
  throw InvalidArgument("unknown shape kind");
}

inline ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "box") return ShapeKind::box;
  if (s == "ellipsoid") return ShapeKind::ellipsoid;
  if (s == "cylinder") return ShapeKind::cylinder;
  throw InvalidArgument("unknown shape kind '" + s + "'");
}

/**
 * @brief Parametric solid standing in for a food item.
 *
 * Extent semantics depend on the kind (meters):
 *  - box: full side lengths along x, y, z
 *  - ellipsoid: semi-axes along x, y, z
 *  - cylinder: elliptic cross-section semi-axes along x, y, then full height along z
 */
struct ShapeSpec {
  ShapeKind kind = ShapeKind::box;
  std::array<double, 3> extents{0.1, 0.1, 0.1};
  double density = 1.0;  // kcal/mL
  int class_id = 0;
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw InvalidArgument("unknown split");
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + s + "'");
}

/// H x W x 3 raster, channel-interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  float& at(int row, int col, int ch) { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  float at(int row, int col, int ch) const { return pixels[(static_cast<std::size_t>(row) * width + col) * 3 + ch]; }
  bool operator==(const Image&) const = default;
};

struct FoodSample {
  Image image;
  Matrix<double> points;  // N x 3, meters, shape centered at origin
  std::array<double, 3> bbox_dims{};
  int class_id = 0;
  double volume = 0.0;  // mL
  double energy = 0.0;  // kcal
  Split split = Split::train;
};

struct Dataset {
  std::vector<FoodSample> samples;
  int class_count = 0;

  /// Samples belonging to one split, in original order.
  Dataset filter(Split split) const {
    Dataset out;
    out.class_count = class_count;
    for (const auto& s : samples)
      if (s.split == split) out.samples.push_back(s);
    return out;
  }

  std::size_t size() const { return samples.size(); }
};

// ---------------------------------------------------------------------------

inline void check_extents(const ShapeSpec& spec) {
  for (double e : spec.extents)
    require(std::isfinite(e) && e > 0.0, "shape extents must be positive and finite");
}

/// Exact volume of the solid in mL.
inline double analytic_volume(const ShapeSpec& spec) {
  check_extents(spec);
  const auto [a, b, c] = spec.extents;
  constexpr double m3_to_ml = 1e6;
  switch (spec.kind) {
    case ShapeKind::box: return a * b * c * m3_to_ml;
    case ShapeKind::ellipsoid: return 4.0 / 3.0 * std::numbers::pi * a * b * c * m3_to_ml;
    case ShapeKind::cylinder: return std::numbers::pi * a * b * c * m3_to_ml;
  }
  throw InvalidArgument("analytic_volume: unknown shape kind");
}

/// Full axis-aligned extents of the solid (meters).
inline std::array<double, 3> bounding_box(const ShapeSpec& spec) {
  check_extents(spec);
  const auto [a, b, c] = spec.extents;
  switch (spec.kind) {
    case ShapeKind::box: return {a, b, c};
    case ShapeKind::ellipsoid: return {2 * a, 2 * b, 2 * c};
    case ShapeKind::cylinder: return {2 * a, 2 * b, c};
  }
  throw InvalidArgument("bounding_box: unknown shape kind");
}

/// Ramanujan's second perimeter approximation; relative error below 1e-9 for
/// the aspect ratios generated here.
inline double ellipse_perimeter(double a, double b) {
  const double h = (a - b) * (a - b) / ((a + b) * (a + b));
  return std::numbers::pi * (a + b) * (1.0 + 3.0 * h / (10.0 + std::sqrt(4.0 - 3.0 * h)));
}

inline constexpr int kMinCloudSize = 64;

/// Points uniformly distributed over the surface of the solid.
inline Matrix<double> sample_point_cloud(const ShapeSpec& spec, int n_points, std::uint64_t seed) {
  require_config(n_points >= kMinCloudSize,
                 "sample_point_cloud: n_points must be >= " + std::to_string(kMinCloudSize) + ", got " +
                     std::to_string(n_points));
  check_extents(spec);
  Rng rng(seed);
  Matrix<double> pts(n_points, 3);
  const auto [a, b, c] = spec.extents;
  const double two_pi = 2.0 * std::numbers::pi;

  for (int i = 0; i < n_points; ++i) {
    double x = 0, y = 0, z = 0;
    switch (spec.kind) {
      case ShapeKind::box: {
        const double ax = b * c, ay = a * c, az = a * b;
        const double pick = rng.uniform() * (ax + ay + az);
        const double sign = rng.uniform() < 0.5 ? -0.5 : 0.5;
        const double u = rng.uniform() - 0.5, v = rng.uniform() - 0.5;
        if (pick < ax) {
          x = sign * a, y = u * b, z = v * c;
        } else if (pick < ax + ay) {
          x = u * a, y = sign * b, z = v * c;
        } else {
          x = u * a, y = v * b, z = sign * c;
        }
        break;
      }
      case ShapeKind::ellipsoid: {
        // Map a uniform sphere point onto the ellipsoid and accept in
        // proportion to the local area stretch.
        const double gmax = std::max({b * c, a * c, a * b});
        for (;;) {
          double ux = rng.normal(), uy = rng.normal(), uz = rng.normal();
          const double n = std::sqrt(ux * ux + uy * uy + uz * uz);
          if (n == 0.0) continue;
          ux /= n, uy /= n, uz /= n;
          const double g = std::sqrt(std::pow(b * c * ux, 2) + std::pow(a * c * uy, 2) + std::pow(a * b * uz, 2));
          if (rng.uniform() * gmax <= g) {
            x = a * ux, y = b * uy, z = c * uz;
            break;
          }
        }
        break;
      }
      case ShapeKind::cylinder: {
        const double cap = std::numbers::pi * a * b;
        const double side = ellipse_perimeter(a, b) * c;
        if (rng.uniform() * (2 * cap + side) < 2 * cap) {
          const double r = std::sqrt(rng.uniform());
          const double t = two_pi * rng.uniform();
          x = a * r * std::cos(t), y = b * r * std::sin(t);
          z = rng.uniform() < 0.5 ? -0.5 * c : 0.5 * c;
        } else {
          const double smax = std::max(a, b);
          double t = 0;
          for (;;) {
            t = two_pi * rng.uniform();
            const double ds = std::sqrt(std::pow(a * std::sin(t), 2) + std::pow(b * std::cos(t), 2));
            if (rng.uniform() * smax <= ds) break;
          }
          x = a * std::cos(t), y = b * std::sin(t);
          z = (rng.uniform() - 0.5) * c;
        }
        break;
      }
    }
    pts(i, 0) = x, pts(i, 1) = y, pts(i, 2) = z;
  }
  return pts;
}

/// Fill color for a class: evenly spread hues at fixed saturation and value.
inline std::array<float, 3> class_color(int class_id) {
  const double hue = std::fmod(class_id * 0.6180339887498949, 1.0) * 6.0;
  const double s = 0.8, v = 0.9;
  const int sector = static_cast<int>(hue) % 6;
  const double f = hue - std::floor(hue);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double r = 0, g = 0, bl = 0;
  switch (sector) {
    case 0: r = v, g = t, bl = p; break;
    case 1: r = q, g = v, bl = p; break;
    case 2: r = p, g = v, bl = t; break;
    case 3: r = p, g = q, bl = v; break;
    case 4: r = t, g = p, bl = v; break;
    default: r = v, g = p, bl = q; break;
  }
  return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(bl)};
}

inline constexpr int kMinResolution = 32;

/// Top-down orthographic silhouette over a fixed square window of
/// +-half_width meters, so pixel counts carry absolute size.
inline Image render_rgb(const ShapeSpec& spec, int resolution, double half_width = 0.1) {
  require(resolution >= kMinResolution, "render_rgb: resolution must be >= " + std::to_string(kMinResolution));
  require(half_width > 0.0, "render_rgb: half_width must be positive");
  check_extents(spec);
  Image img;
  img.height = img.width = resolution;
  img.pixels.assign(static_cast<std::size_t>(resolution) * resolution * 3, 0.0f);
  const auto color = class_color(spec.class_id);
  const auto [a, b, c] = spec.extents;
  const double pixel = 2.0 * half_width / resolution;
  for (int row = 0; row < resolution; ++row) {
    const double y = half_width - (row + 0.5) * pixel;
    for (int col = 0; col < resolution; ++col) {
      const double x = -half_width + (col + 0.5) * pixel;
      bool inside = false;
      if (spec.kind == ShapeKind::box) {
        inside = std::abs(x) <= 0.5 * a && std::abs(y) <= 0.5 * b;
      } else {
        inside = (x / a) * (x / a) + (y / b) * (y / b) <= 1.0;
      }
      if (inside)
        for (int ch = 0; ch < 3; ++ch) img.at(row, col, ch) = color[ch];
    }
  }
  return img;
}

inline std::size_t silhouette_pixels(const Image& img) {
  std::size_t n = 0;
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      if (img.at(r, c, 0) + img.at(r, c, 1) + img.at(r, c, 2) > 0.0f) ++n;
  return n;
}

// ---------------------------------------------------------------------------

inline constexpr int kShapeKinds = 3;
inline constexpr int kDensityTiers = 4;
inline constexpr int kSizeBuckets = 9;
inline constexpr int kMaxClasses = kShapeKinds * kDensityTiers * kSizeBuckets;  // 108

struct SyntheticConfig {
  int class_count = 12;
  int samples_per_class = 40;
  double size_jitter = 0.15;  // per-sample uniform scale in [1 - j, 1 + j]
  int n_points = 512;  // desk default; the full-size model pairs with 1024
  int resolution = 48;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::vector<ShapeKind> kinds{ShapeKind::box, ShapeKind::ellipsoid, ShapeKind::cylinder};

  int max_classes() const { return static_cast<int>(kinds.size()) * kDensityTiers * kSizeBuckets; }
};

struct ClassRecipe {
  ShapeKind kind;
  int density_tier;
  int size_bucket;
};

inline constexpr std::array<double, kDensityTiers> kTierDensity{0.6, 1.1, 1.7, 2.4};

/// Class id -> (kind, density tier, size bucket) over the enabled kinds. The
/// first kinds x tiers ids cover every kind/tier pair; higher ids shift the
/// size bucket, so the map is a bijection onto all combinations and small
/// class counts still span several sizes.
inline ClassRecipe class_recipe(int class_id, std::span<const ShapeKind> kinds) {
  require(!kinds.empty(), "class_recipe: no shape kinds");
  const int k = static_cast<int>(kinds.size());
  require(class_id >= 0 && class_id < k * kDensityTiers * kSizeBuckets, "class id out of range");
  const int r = class_id % (k * kDensityTiers);
  const int q = class_id / (k * kDensityTiers);
  return {kinds[static_cast<std::size_t>(r % k)], r / k, (r + q) % kSizeBuckets};
}

inline ClassRecipe class_recipe(int class_id) {
  constexpr std::array<ShapeKind, kShapeKinds> all{ShapeKind::box, ShapeKind::ellipsoid, ShapeKind::cylinder};
  return class_recipe(class_id, all);
}

/// Nominal (unjittered) shape for a recipe.
inline ShapeSpec recipe_spec(const ClassRecipe& recipe, int class_id) {
  const double L = 0.04 + 0.01 * recipe.size_bucket;
  ShapeSpec spec;
  spec.kind = recipe.kind;
  spec.class_id = class_id;
  spec.density = kTierDensity[static_cast<std::size_t>(recipe.density_tier)];
  switch (recipe.kind) {
    case ShapeKind::box: spec.extents = {L, 0.8 * L, 0.6 * L}; break;
    case ShapeKind::ellipsoid: spec.extents = {0.5 * L, 0.4 * L, 0.3 * L}; break;
    case ShapeKind::cylinder: spec.extents = {0.5 * L, 0.4 * L, 0.6 * L}; break;
  }
  return spec;
}

inline ShapeSpec class_base_spec(int class_id) { return recipe_spec(class_recipe(class_id), class_id); }

inline void validate(const SyntheticConfig& cfg) {
  require_config(!cfg.kinds.empty(), "data.kinds must list at least one shape kind");
  for (std::size_t i = 0; i < cfg.kinds.size(); ++i)
    for (std::size_t j = i + 1; j < cfg.kinds.size(); ++j)
      require_config(cfg.kinds[i] != cfg.kinds[j], "data.kinds lists '" + to_string(cfg.kinds[i]) + "' twice");
  require_config(cfg.class_count >= 1 && cfg.class_count <= cfg.max_classes(),
                 "data.class_count must be in [1, " + std::to_string(cfg.max_classes()) + "] for " +
                     std::to_string(cfg.kinds.size()) + " shape kinds, got " + std::to_string(cfg.class_count));
  require_config(cfg.samples_per_class >= 1, "data.samples_per_class must be >= 1");
  require_config(cfg.size_jitter >= 0.0 && cfg.size_jitter < 0.5, "data.size_jitter must be in [0, 0.5)");
  require_config(cfg.n_points >= kMinCloudSize, "data.n_points must be >= " + std::to_string(kMinCloudSize));
  require_config(cfg.resolution >= kMinResolution, "data.resolution must be >= " + std::to_string(kMinResolution));
  require_config(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0, "data.train_fraction must be in (0, 1]");
}

/// Builds one sample. Pure function of (config, class id, index within class).
inline FoodSample make_sample(const SyntheticConfig& cfg, int class_id, int index) {
  const std::uint64_t sample_seed =
      derive_seed(cfg.seed, static_cast<std::uint64_t>(class_id) * 1000003ull + static_cast<std::uint64_t>(index));
  Rng rng(sample_seed);
  ShapeSpec spec = recipe_spec(class_recipe(class_id, cfg.kinds), class_id);
  const double scale = rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
  for (double& e : spec.extents) e *= scale;

  FoodSample s;
  s.class_id = class_id;
  s.volume = analytic_volume(spec);
  s.energy = s.volume * spec.density;
  s.bbox_dims = bounding_box(spec);
  s.points = sample_point_cloud(spec, cfg.n_points, rng.bits());
  s.image = render_rgb(spec, cfg.resolution);
  return s;
}

/// Stratified synthetic dataset: each class contributes samples_per_class
/// items, round(train_fraction * samples_per_class) of which land in train.
inline Dataset generate_synthetic_dataset(const SyntheticConfig& cfg) {
  validate(cfg);
  Dataset ds;
  ds.class_count = cfg.class_count;
  const int n_train = static_cast<int>(std::lround(cfg.train_fraction * cfg.samples_per_class));
  ds.samples.reserve(static_cast<std::size_t>(cfg.class_count) * cfg.samples_per_class);
  for (int c = 0; c < cfg.class_count; ++c) {
    std::vector<int> order(static_cast<std::size_t>(cfg.samples_per_class));
    for (int i = 0; i < cfg.samples_per_class; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng split_rng(derive_seed(cfg.seed, 0xC1A55000ull + static_cast<std::uint64_t>(c)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.below(i)]);
    std::vector<bool> is_train(order.size(), false);
    for (int i = 0; i < n_train; ++i) is_train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

    for (int i = 0; i < cfg.samples_per_class; ++i) {
      FoodSample s = make_sample(cfg, c, i);
      s.split = is_train[static_cast<std::size_t>(i)] ? Split::train : Split::test;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace portionnet
