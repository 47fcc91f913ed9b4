#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "portionnet/evaluation.hpp"
#include "portionnet/model.hpp"
#include "portionnet/optim.hpp"

namespace portionnet {

struct TrainingConfig {
  double alpha_rgb_only = 0.3;
  int epochs = 25;
  OneCycleConfig schedule;
  double lr_encoders = 1e-4;
  double lr_heads = 5e-4;  // heads, fusion and adapter
  int micro_batch = 16;
  int accumulation_steps = 4;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  TaskWeights task;
  DistillWeights distill;
  double label_smoothing = 0.05;
  double huber_delta = 0.5;
  AdamWConfig adamw;
  // Sets the volume/energy head output scales to the training-set means.
  bool target_scaling = true;
  bool validate_each_epoch = true;

  int effective_batch() const { return micro_batch * accumulation_steps; }

  LossSettings loss_settings() const { return {task, distill, label_smoothing, huber_delta}; }
};

inline void validate(const TrainingConfig& c) {
  require_config(c.alpha_rgb_only >= 0.0 && c.alpha_rgb_only <= 1.0, "training.alpha must be in [0, 1]");
  require_config(c.epochs >= 1, "training.epochs must be >= 1");
  require_config(c.lr_encoders > 0 && c.lr_heads > 0, "training learning rates must be positive");
  require_config(c.micro_batch >= 1 && c.accumulation_steps >= 1, "training batch sizes must be >= 1");
  require_config(c.clip_norm > 0, "training.clip_norm must be positive");
  require_config(c.schedule.warmup_fraction >= 0 && c.schedule.warmup_fraction < 1,
                 "training.warmup_fraction must be in [0, 1)");
  require_config(c.schedule.div_start > 0 && c.schedule.div_final > 0, "one-cycle divisors must be positive");
  require_config(c.label_smoothing >= 0 && c.label_smoothing <= 1, "training.label_smoothing must be in [0, 1]");
  require_config(c.huber_delta > 0, "training.huber_delta must be positive");
  validate(c.task);
  validate(c.distill);
}

/// Per-step mode: RGB-only iff a counter-based uniform draw keyed on
/// (seed, batch_index) falls below alpha.
inline TrainingMode select_mode(std::uint64_t batch_index, double alpha, std::uint64_t seed) {
  require(alpha >= 0.0 && alpha <= 1.0, "select_mode: alpha must be in [0, 1]");
  const double draw = unit_double(splitmix64(derive_seed(seed, 0x4D4F4445ull) + batch_index));
  return draw < alpha ? TrainingMode::rgb_only : TrainingMode::multimodal;
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  TrainingMode mode = TrainingMode::multimodal;
  double lr_encoders = 0, lr_heads = 0;
  double grad_norm = 0;  // before clipping
  LossBundle bundle;
};

struct EpochRecord {
  int epoch = 0;
  LossBundle mean;
  long steps = 0;
  long rgb_only_steps = 0;
  double seconds = 0;
  std::optional<MetricsReport> val_rgb;
  std::optional<MetricsReport> val_rgbpc;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  long adapter_fed_steps = 0;  // optimizer steps where the adapter fed fusion
  std::vector<double> gradnorm_initial_losses;
};

template <class T>
struct TrainingState {
  PortionNet<T> model;
  AdamW<T> optimizer;
  TrainingConfig config;
  TaskWeights task_weights;  // current weights (GradNorm may move them)
  int epoch = 0;             // completed epochs
  TrainingHistory history;
};

/// Thrown on a non-finite loss or gradient; carries the state at the end of
/// the last completed epoch.
template <class T>
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, TrainingState<T> last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const TrainingState<T>& last_good() const { return last_good_; }

 private:
  TrainingState<T> last_good_;
};

struct StepOutcome {
  LossBundle bundle;
  double grad_norm = 0;
  bool adapter_fed = false;
  double probe_norm_cls = 0, probe_norm_reg = 0;
};

inline constexpr double kIdentityTolerance = 1e-6;

/**
 * @brief Accumulates gradients over micro-batches of one optimizer step,
 * clips them, and applies AdamW.
 *
 * Each micro-batch's mean loss is weighted by its share of the step, and the
 * energy normalizer is computed over the whole step, so the update equals a
 * single pass over all step samples.
 */
template <class T>
StepOutcome optimizer_step(PortionNet<T>& model, AdamW<T>& opt, const Dataset& ds,
                           std::span<const std::size_t> step_indices, TrainingMode mode, const LossSettings& ls,
                           int micro_batch, double clip_norm, double lr_encoders, double lr_heads,
                           bool probe_norms = false) {
  require(!step_indices.empty(), "optimizer_step: empty step");
  const ParamList<T> params = model.parameters();
  zero_grads(params);

  double mean_abs_e = 0;
  for (std::size_t i : step_indices) mean_abs_e += std::abs(ds.samples.at(i).energy);
  mean_abs_e /= static_cast<double>(step_indices.size());
  const auto energy_scale = static_cast<T>(mean_abs_e);

  LossComponents comp;
  StepOutcome out;
  const auto total = static_cast<double>(step_indices.size());
  for (std::size_t start = 0; start < step_indices.size(); start += static_cast<std::size_t>(micro_batch)) {
    const std::size_t end = std::min(step_indices.size(), start + static_cast<std::size_t>(micro_batch));
    const auto micro = step_indices.subspan(start, end - start);
    const double share = static_cast<double>(micro.size()) / total;
    const Batch<T> batch = make_batch<T>(ds, micro);
    const auto res = model.train_step(batch, mode, ls, static_cast<T>(share), energy_scale, probe_norms);
    comp.l_cls += share * res.bundle.l_cls;
    comp.l_reg += share * res.bundle.l_reg;
    comp.l_distill += share * res.bundle.l_distill;
    comp.distill_mse += share * res.bundle.distill_mse;
    comp.distill_cos += share * res.bundle.distill_cos;
    comp.distill_kl += share * res.bundle.distill_kl;
    out.probe_norm_cls += share * res.probe_norm_cls;
    out.probe_norm_reg += share * res.probe_norm_reg;
    out.adapter_fed = out.adapter_fed || res.adapter_fed_fusion;
  }
  out.bundle = total_loss(comp, ls.task);
  if (out.bundle.identity_residual() > kIdentityTolerance * std::max(1.0, std::abs(out.bundle.l_total)))
    throw std::logic_error("loss bundle violates total = sum(lambda_i * L_i)");

  out.grad_norm = clip_gradients(params, clip_norm);
  if (!std::isfinite(out.grad_norm)) throw NonFiniteLoss("non-finite gradient norm");
  opt.step(params, [&](ParamGroup g) { return g == ParamGroup::encoder ? lr_encoders : lr_heads; });
  return out;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Number of optimizer steps per epoch for a training split of n samples.
inline long steps_per_epoch(std::size_t n, const TrainingConfig& cfg) {
  const auto eff = static_cast<std::size_t>(cfg.effective_batch());
  return static_cast<long>((n + eff - 1) / eff);
}

/**
 * @brief Dual-mode training loop.
 *
 * Each optimizer step draws its mode once (all micro-batches share it),
 * accumulates gradients, clips, and steps AdamW with per-group learning rates
 * from the shared one-cycle schedule. After every epoch the model is
 * validated in both inference modes if @p val is given.
 */
template <class T>
TrainingState<T> train(const ModelConfig& model_cfg, const Dataset& train_set, const Dataset* val,
                       const TrainingConfig& cfg, const EpochCallback& on_epoch = {}) {
  validate(cfg);
  require(train_set.size() > 0, "train: empty training split");
  require(train_set.class_count == model_cfg.heads.class_count,
          "train: dataset has " + std::to_string(train_set.class_count) + " classes, model expects " +
              std::to_string(model_cfg.heads.class_count));

  TrainingState<T> state;
  state.model = PortionNet<T>(model_cfg);
  state.optimizer = AdamW<T>(cfg.adamw);
  state.config = cfg;
  state.task_weights = cfg.task;
  if (cfg.target_scaling) {
    double v = 0, e = 0;
    for (const auto& s : train_set.samples) v += s.volume, e += s.energy;
    v /= static_cast<double>(train_set.size());
    e /= static_cast<double>(train_set.size());
    // Unusable targets keep unit scales; the loss then aborts the run.
    if (std::isfinite(v) && std::isfinite(e) && v > 0 && e > 0) state.model.heads().set_target_scales(v, e);
  }

  const long per_epoch = steps_per_epoch(train_set.size(), cfg);
  const long total_steps = per_epoch * cfg.epochs;
  const auto eff = static_cast<std::size_t>(cfg.effective_batch());
  TrainingState<T> last_good = state;
  long global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle(derive_seed(cfg.seed, 0x5EED0000ull + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    LossComponents sum;
    for (std::size_t start = 0; start < order.size(); start += eff, ++global_step) {
      const std::size_t end = std::min(order.size(), start + eff);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const TrainingMode mode = select_mode(static_cast<std::uint64_t>(global_step), cfg.alpha_rgb_only, cfg.seed);
      const double g = onecycle_lr(global_step, total_steps, 1.0, cfg.schedule);
      LossSettings ls = cfg.loss_settings();
      ls.task = state.task_weights;

      StepOutcome out;
      try {
        out = optimizer_step(state.model, state.optimizer, train_set, idx, mode, ls, cfg.micro_batch, cfg.clip_norm,
                             cfg.lr_encoders * g, cfg.lr_heads * g, ls.task.gradnorm_enabled);
      } catch (const NonFiniteLoss& e) {
        throw TrainingAborted<T>(std::string("training aborted at step ") + std::to_string(global_step) + ": " +
                                     e.what(),
                                 std::move(last_good));
      }

      if (ls.task.gradnorm_enabled) {
        // Only classification and regression reach the probe layer.
        const std::array<double, 2> losses{out.bundle.l_cls, out.bundle.l_reg};
        if (state.history.gradnorm_initial_losses.empty())
          state.history.gradnorm_initial_losses.assign(losses.begin(), losses.end());
        const std::array<double, 2> w{state.task_weights.cls, state.task_weights.reg};
        const std::array<double, 2> norms{out.probe_norm_cls, out.probe_norm_reg};
        const auto nw = gradnorm_step(w, losses, state.history.gradnorm_initial_losses, norms,
                                      ls.task.gradnorm_alpha, ls.task.gradnorm_lr);
        state.task_weights.cls = nw[0];
        state.task_weights.reg = nw[1];
      }

      StepRecord sr;
      sr.step = global_step;
      sr.epoch = epoch + 1;
      sr.mode = mode;
      sr.lr_encoders = cfg.lr_encoders * g;
      sr.lr_heads = cfg.lr_heads * g;
      sr.grad_norm = out.grad_norm;
      sr.bundle = out.bundle;
      state.history.steps.push_back(sr);
      if (out.adapter_fed) ++state.history.adapter_fed_steps;
      ++rec.steps;
      if (mode == TrainingMode::rgb_only) ++rec.rgb_only_steps;
      sum.l_cls += out.bundle.l_cls, sum.l_reg += out.bundle.l_reg, sum.l_distill += out.bundle.l_distill;
      sum.distill_mse += out.bundle.distill_mse, sum.distill_cos += out.bundle.distill_cos;
      sum.distill_kl += out.bundle.distill_kl;
    }
    const double n = static_cast<double>(rec.steps);
    LossComponents mean{sum.l_cls / n, sum.l_reg / n, sum.l_distill / n,
                        sum.distill_mse / n, sum.distill_cos / n, sum.distill_kl / n};
    rec.mean = total_loss(mean, state.task_weights);
    if (val && val->size() > 0 && cfg.validate_each_epoch) {
      rec.val_rgb = evaluate(state.model, *val, InferenceMode::rgb, cfg.seed);
      rec.val_rgbpc = evaluate(state.model, *val, InferenceMode::rgb_pc, cfg.seed);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.epoch = epoch + 1;
    state.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    last_good = state;
  }
  return state;
}

}  // namespace portionnet
