#pragma once

#include <string>

#include "json.hpp"
#include "portionnet/evaluation.hpp"
#include "portionnet/training.hpp"

namespace portionnet {

using Json = nlohmann::json;

inline Json to_json(const LossBundle& b) {
  return {{"l_total", b.l_total},         {"l_cls", b.l_cls},
          {"l_reg", b.l_reg},             {"l_distill", b.l_distill},
          {"distill_mse", b.distill_mse}, {"distill_cos", b.distill_cos},
          {"distill_kl", b.distill_kl},   {"lambda_cls", b.lambda_cls},
          {"lambda_reg", b.lambda_reg},   {"lambda_distill", b.lambda_distill}};
}

inline LossBundle loss_bundle_from_json(const Json& j) {
  LossBundle b;
  b.l_total = j.at("l_total").get<double>();
  b.l_cls = j.at("l_cls").get<double>();
  b.l_reg = j.at("l_reg").get<double>();
  b.l_distill = j.at("l_distill").get<double>();
  b.distill_mse = j.at("distill_mse").get<double>();
  b.distill_cos = j.at("distill_cos").get<double>();
  b.distill_kl = j.at("distill_kl").get<double>();
  b.lambda_cls = j.at("lambda_cls").get<double>();
  b.lambda_reg = j.at("lambda_reg").get<double>();
  b.lambda_distill = j.at("lambda_distill").get<double>();
  return b;
}

inline Json to_json(const MetricsReport& r) {
  return {{"mode", to_string(r.mode)},
          {"accuracy", r.accuracy},
          {"volume_mae", r.volume_mae},
          {"volume_mape", r.volume_mape},
          {"energy_mae", r.energy_mae},
          {"energy_mape", r.energy_mape},
          {"r2", r.r2},
          {"r2_volume", r.r2_volume},
          {"r2_energy", r.r2_energy},
          {"seed", r.seed},
          {"samples", r.samples}};
}

inline MetricsReport metrics_report_from_json(const Json& j) {
  MetricsReport r;
  r.mode = inference_mode_from_string(j.at("mode").get<std::string>());
  r.accuracy = j.at("accuracy").get<double>();
  r.volume_mae = j.at("volume_mae").get<double>();
  r.volume_mape = j.at("volume_mape").get<double>();
  r.energy_mae = j.at("energy_mae").get<double>();
  r.energy_mape = j.at("energy_mape").get<double>();
  r.r2 = j.at("r2").get<double>();
  r.r2_volume = j.at("r2_volume").get<double>();
  r.r2_energy = j.at("r2_energy").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.samples = j.at("samples").get<std::size_t>();
  return r;
}

/// Mean and standard deviation per field, keyed "<field>_mean" / "<field>_std".
inline Json to_json(const AggregateReport& a) {
  Json j = {{"mode", to_string(a.mode)}, {"seeds", a.seeds}, {"samples", a.mean.samples}};
  const Json m = to_json(a.mean), s = to_json(a.stddev);
  for (const char* f : {"accuracy", "volume_mae", "volume_mape", "energy_mae", "energy_mape", "r2", "r2_volume",
                        "r2_energy"}) {
    j[std::string(f) + "_mean"] = m.at(f);
    j[std::string(f) + "_std"] = s.at(f);
  }
  return j;
}

inline Json to_json(const StepRecord& s) {
  return {{"type", "step"},          {"step", s.step},
          {"epoch", s.epoch},        {"mode", to_string(s.mode)},
          {"lr_encoders", s.lr_encoders}, {"lr_heads", s.lr_heads},
          {"grad_norm", s.grad_norm}, {"loss", to_json(s.bundle)}};
}

inline StepRecord step_record_from_json(const Json& j) {
  StepRecord s;
  s.step = j.at("step").get<long>();
  s.epoch = j.at("epoch").get<int>();
  s.mode = j.at("mode").get<std::string>() == "rgb_only" ? TrainingMode::rgb_only : TrainingMode::multimodal;
  s.lr_encoders = j.at("lr_encoders").get<double>();
  s.lr_heads = j.at("lr_heads").get<double>();
  s.grad_norm = j.at("grad_norm").get<double>();
  s.bundle = loss_bundle_from_json(j.at("loss"));
  return s;
}

inline Json to_json(const EpochRecord& e) {
  Json j = {{"type", "epoch"},
            {"epoch", e.epoch},
            {"steps", e.steps},
            {"rgb_only_steps", e.rgb_only_steps},
            {"seconds", e.seconds},
            {"loss", to_json(e.mean)}};
  j["val_rgb"] = e.val_rgb ? to_json(*e.val_rgb) : Json(nullptr);
  j["val_rgbpc"] = e.val_rgbpc ? to_json(*e.val_rgbpc) : Json(nullptr);
  return j;
}

inline EpochRecord epoch_record_from_json(const Json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.steps = j.at("steps").get<long>();
  e.rgb_only_steps = j.at("rgb_only_steps").get<long>();
  e.seconds = j.at("seconds").get<double>();
  e.mean = loss_bundle_from_json(j.at("loss"));
  if (!j.at("val_rgb").is_null()) e.val_rgb = metrics_report_from_json(j.at("val_rgb"));
  if (!j.at("val_rgbpc").is_null()) e.val_rgbpc = metrics_report_from_json(j.at("val_rgbpc"));
  return e;
}

inline Json to_json(const TrainingHistory& h) {
  Json epochs = Json::array(), steps = Json::array();
  for (const auto& e : h.epochs) epochs.push_back(to_json(e));
  for (const auto& s : h.steps) steps.push_back(to_json(s));
  return {{"epochs", epochs},
          {"steps", steps},
          {"adapter_fed_steps", h.adapter_fed_steps},
          {"gradnorm_initial_losses", h.gradnorm_initial_losses}};
}

inline TrainingHistory training_history_from_json(const Json& j) {
  TrainingHistory h;
  for (const auto& e : j.at("epochs")) h.epochs.push_back(epoch_record_from_json(e));
  for (const auto& s : j.at("steps")) h.steps.push_back(step_record_from_json(s));
  h.adapter_fed_steps = j.at("adapter_fed_steps").get<long>();
  h.gradnorm_initial_losses = j.at("gradnorm_initial_losses").get<std::vector<double>>();
  return h;
}

}  // namespace portionnet
