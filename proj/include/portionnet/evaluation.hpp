#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "portionnet/model.hpp"

namespace portionnet {

enum class InferenceMode { rgb, rgb_pc };

inline std::string to_string(InferenceMode m) { return m == InferenceMode::rgb ? "RGB" : "RGB+PC"; }

inline InferenceMode inference_mode_from_string(const std::string& s) {
  if (s == "rgb" || s == "RGB") return InferenceMode::rgb;
  if (s == "rgbpc" || s == "rgb_pc" || s == "RGB+PC") return InferenceMode::rgb_pc;
  throw InvalidArgument("unknown inference mode '" + s + "' (expected rgb or rgbpc)");
}

namespace detail {
inline void check_same(std::span<const double> pred, std::span<const double> truth, const char* what) {
  require(pred.size() == truth.size(), std::string(what) + ": size mismatch");
  require(!pred.empty(), std::string(what) + ": empty input");
}
}  // namespace detail

/// Mean absolute error, in the units of the inputs.
inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::check_same(pred, truth, "mae");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

/// Mean absolute percentage error, in percent.
inline double mape(std::span<const double> pred, std::span<const double> truth) {
  detail::check_same(pred, truth, "mape");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(truth[i] != 0.0, "mape: true value at index " + std::to_string(i) + " is zero");
    s += std::abs(pred[i] - truth[i]) / std::abs(truth[i]);
  }
  return 100.0 * s / static_cast<double>(pred.size());
}

/// Coefficient of determination, 1 - SS_res / SS_tot.
inline double r2(std::span<const double> pred, std::span<const double> truth) {
  detail::check_same(pred, truth, "r2");
  require(truth.size() >= 2, "r2: need at least two samples");
  const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  require(ss_tot > 0.0, "r2: true values have zero variance");
  return 1.0 - ss_res / ss_tot;
}

/// Index of the largest logit; ties go to the lowest index.
template <class Row>
int argmax_row(const Row& row) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(row.size()); ++k)
    if (row(k) > row(best)) best = k;
  return best;
}

/// Percentage of rows whose argmax equals the label.
template <class T>
double accuracy(const Matrix<T>& logits, std::span<const int> labels) {
  require(logits.rows() == static_cast<Eigen::Index>(labels.size()), "accuracy: label count mismatch");
  require(!labels.empty(), "accuracy: empty input");
  std::size_t hit = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    if (argmax_row(logits.row(r)) == labels[static_cast<std::size_t>(r)]) ++hit;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// R^2 pooled over volume and energy after standardizing each by its true
/// mean and standard deviation (equals the mean of the per-target R^2).
inline double pooled_r2(std::span<const double> vol_pred, std::span<const double> vol_true,
                        std::span<const double> en_pred, std::span<const double> en_true) {
  auto standardized_sse = [](std::span<const double> p, std::span<const double> t) {
    const double n = static_cast<double>(t.size());
    const double mean = std::accumulate(t.begin(), t.end(), 0.0) / n;
    double var = 0;
    for (double x : t) var += (x - mean) * (x - mean);
    var /= n;
    require(var > 0.0, "pooled_r2: zero variance target");
    double sse = 0;
    for (std::size_t i = 0; i < t.size(); ++i) sse += (p[i] - t[i]) * (p[i] - t[i]) / var;
    return sse;
  };
  detail::check_same(vol_pred, vol_true, "pooled_r2");
  detail::check_same(en_pred, en_true, "pooled_r2");
  const double sse = standardized_sse(vol_pred, vol_true) + standardized_sse(en_pred, en_true);
  // Standardized targets have SS_tot == n each.
  return 1.0 - sse / static_cast<double>(vol_true.size() + en_true.size());
}

struct MetricsReport {
  InferenceMode mode = InferenceMode::rgb;
  double accuracy = 0;     // %
  double volume_mae = 0;   // mL
  double volume_mape = 0;  // %
  double energy_mae = 0;   // kcal
  double energy_mape = 0;  // %
  double r2 = 0;           // pooled standardized
  double r2_volume = 0;
  double r2_energy = 0;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
};

struct PredictionSet {
  std::vector<double> volume_pred, volume_true, energy_pred, energy_true;
  std::vector<int> labels;
  Matrix<double> logits;
};

/// Runs inference over a dataset in fixed-size chunks. Never mutates the model.
template <class T>
PredictionSet predict_dataset(const PortionNet<T>& model, const Dataset& ds, InferenceMode mode,
                              std::size_t chunk = 64) {
  require(ds.size() > 0, "evaluate: empty dataset");
  require(ds.class_count == model.class_count(), "evaluate: dataset has " + std::to_string(ds.class_count) +
                                                     " classes but the model predicts " +
                                                     std::to_string(model.class_count()));
  PredictionSet out;
  out.logits.resize(static_cast<Eigen::Index>(ds.size()), model.class_count());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    const Batch<T> b = make_batch<T>(ds, idx);
    const Predictions<T> p = model.predict(b.images, mode == InferenceMode::rgb_pc ? &b.points : nullptr);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto r = static_cast<Eigen::Index>(j);
      out.volume_pred.push_back(static_cast<double>(p.volume(r)));
      out.energy_pred.push_back(static_cast<double>(p.energy(r)));
      out.volume_true.push_back(ds.samples[idx[j]].volume);
      out.energy_true.push_back(ds.samples[idx[j]].energy);
      out.labels.push_back(ds.samples[idx[j]].class_id);
      out.logits.row(static_cast<Eigen::Index>(idx[j])) = p.class_logits.row(r).template cast<double>();
    }
  }
  return out;
}

inline MetricsReport metrics_from(const PredictionSet& p, InferenceMode mode, std::uint64_t seed = 0) {
  MetricsReport r;
  r.mode = mode;
  r.seed = seed;
  r.samples = p.labels.size();
  r.accuracy = accuracy<double>(p.logits, p.labels);
  r.volume_mae = mae(p.volume_pred, p.volume_true);
  r.volume_mape = mape(p.volume_pred, p.volume_true);
  r.energy_mae = mae(p.energy_pred, p.energy_true);
  r.energy_mape = mape(p.energy_pred, p.energy_true);
  if (p.labels.size() >= 2) {
    r.r2_volume = r2(p.volume_pred, p.volume_true);
    r.r2_energy = r2(p.energy_pred, p.energy_true);
    r.r2 = pooled_r2(p.volume_pred, p.volume_true, p.energy_pred, p.energy_true);
  }
  return r;
}

/// Full pass over @p ds. RGB mode routes adapter features into fusion,
/// RGB+PC routes teacher features.
template <class T>
MetricsReport evaluate(const PortionNet<T>& model, const Dataset& ds, InferenceMode mode, std::uint64_t seed = 0) {
  return metrics_from(predict_dataset(model, ds, mode), mode, seed);
}

/// Mean and sample standard deviation of each report field across seeds.
struct AggregateReport {
  InferenceMode mode = InferenceMode::rgb;
  std::vector<std::uint64_t> seeds;
  MetricsReport mean;
  MetricsReport stddev;
};

inline AggregateReport aggregate(std::span<const MetricsReport> reports) {
  require(!reports.empty(), "aggregate: no reports");
  AggregateReport agg;
  agg.mode = reports[0].mode;
  const double n = static_cast<double>(reports.size());
  auto field = [&](double MetricsReport::*f) {
    double mean = 0;
    for (const auto& r : reports) mean += r.*f;
    mean /= n;
    double var = 0;
    for (const auto& r : reports) var += (r.*f - mean) * (r.*f - mean);
    const double sd = reports.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    agg.mean.*f = mean;
    agg.stddev.*f = sd;
  };
  for (auto f : {&MetricsReport::accuracy, &MetricsReport::volume_mae, &MetricsReport::volume_mape,
                 &MetricsReport::energy_mae, &MetricsReport::energy_mape, &MetricsReport::r2,
                 &MetricsReport::r2_volume, &MetricsReport::r2_energy})
    field(f);
  agg.mean.mode = agg.stddev.mode = agg.mode;
  agg.mean.samples = agg.stddev.samples = reports[0].samples;
  for (const auto& r : reports) agg.seeds.push_back(r.seed);
  return agg;
}

/// Reference predictor: training-set means of volume and energy for every sample.
inline MetricsReport mean_baseline(const Dataset& train, const Dataset& test) {
  require(train.size() > 0 && test.size() > 0, "mean_baseline: empty split");
  double v = 0, e = 0;
  for (const auto& s : train.samples) v += s.volume, e += s.energy;
  v /= static_cast<double>(train.size());
  e /= static_cast<double>(train.size());
  PredictionSet p;
  p.logits = Matrix<double>::Zero(static_cast<Eigen::Index>(test.size()), test.class_count);
  for (const auto& s : test.samples) {
    p.volume_pred.push_back(v), p.energy_pred.push_back(e);
    p.volume_true.push_back(s.volume), p.energy_true.push_back(s.energy);
    p.labels.push_back(s.class_id);
  }
  return metrics_from(p, InferenceMode::rgb);
}

}  // namespace portionnet
