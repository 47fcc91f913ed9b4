#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "portionnet/data_model.hpp"
#include "portionnet/evaluation.hpp"
#include "portionnet/model.hpp"
#include "portionnet/training.hpp"

namespace portionnet {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// JSON <-> config structs. Readers assume the document has already been
// merged over a complete default document (see resolve_run_config), so every
// key is present.

namespace detail {

template <class T>
T get_as(const Json& j, const std::string& key, const std::string& path) {
  if (!j.contains(key)) throw ConfigError("missing key '" + path + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("key '" + path + key + "' has the wrong type (got " + std::string(j.at(key).type_name()) + ")");
  }
}

inline void merge_strict(Json& base, const Json& over, const std::string& path,
                         std::map<std::string, std::string>* sources, const std::string& source) {
  if (!over.is_object()) throw ConfigError("'" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key, sources, source);
    } else {
      slot = it.value();
      if (sources) (*sources)[key] = source;
    }
  }
}

}  // namespace detail

inline Json to_json(const SyntheticConfig& c) {
  Json kinds = Json::array();
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  return {{"class_count", c.class_count},       {"samples_per_class", c.samples_per_class},
          {"size_jitter", c.size_jitter},       {"n_points", c.n_points},
          {"resolution", c.resolution},         {"train_fraction", c.train_fraction},
          {"seed", c.seed},                     {"kinds", kinds}};
}

inline SyntheticConfig synthetic_config_from_json(const Json& j) {
  const std::string p = "data.";
  SyntheticConfig c;
  c.class_count = detail::get_as<int>(j, "class_count", p);
  c.samples_per_class = detail::get_as<int>(j, "samples_per_class", p);
  c.size_jitter = detail::get_as<double>(j, "size_jitter", p);
  c.n_points = detail::get_as<int>(j, "n_points", p);
  c.resolution = detail::get_as<int>(j, "resolution", p);
  c.train_fraction = detail::get_as<double>(j, "train_fraction", p);
  c.seed = detail::get_as<std::uint64_t>(j, "seed", p);
  const auto kinds = detail::get_as<std::vector<std::string>>(j, "kinds", p);
  c.kinds.clear();
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    try {
      c.kinds.push_back(shape_kind_from_string(kinds[i]));
    } catch (const InvalidArgument&) {
      throw ConfigError("data.kinds[" + std::to_string(i) + "]: unknown shape kind '" + kinds[i] +
                        "' (expected box, ellipsoid or cylinder)");
    }
  }
  return c;
}

/// Architecture section. Class count and cloud size are taken from the data
/// section, so they are not repeated here.
inline Json to_json(const ModelConfig& c, const std::string& preset) {
  return {{"preset", preset},
          {"init_seed_offset", 0},
          {"embed_dim", c.fusion.dim},
          {"rgb",
           {{"patch_size", c.rgb.patch_size},
            {"patch_dim", c.rgb.patch_dim},
            {"patch_mlp_hidden", c.rgb.patch_mlp_hidden},
            {"conv_channels1", c.rgb.conv_channels1},
            {"conv_channels2", c.rgb.conv_channels2},
            {"conv_dim", c.rgb.conv_dim},
            {"proj_hidden", c.rgb.proj_hidden}}},
          {"geo",
           {{"pointnet_widths", c.geo.pointnet_widths},
            {"bbox_dim", c.geo.bbox_dim},
            {"proj_hidden", c.geo.proj_hidden},
            {"coordinate_scale", c.geo.coordinate_scale}}},
          {"adapter", {{"hidden", c.adapter.hidden}}},
          {"fusion", {{"heads", c.fusion.heads}, {"mlp_hidden", c.fusion.mlp_hidden}}},
          {"heads",
           {{"cls_hidden", c.heads.cls_hidden},
            {"vol_hidden", c.heads.vol_hidden},
            {"energy_hidden", c.heads.energy_hidden}}}};
}

inline ModelConfig model_preset(const std::string& name, int class_count = 12) {
  if (name == "desk") return desk_model_config(class_count);
  if (name == "faithful") return faithful_model_config(class_count);
  throw ConfigError("model.preset: unknown preset '" + name + "' (expected desk or faithful)");
}

inline ModelConfig model_config_from_json(const Json& j) {
  using detail::get_as;
  ModelConfig c = model_preset(get_as<std::string>(j, "preset", "model."));
  const Json& rgb = j.at("rgb");
  c.rgb.patch_size = get_as<int>(rgb, "patch_size", "model.rgb.");
  c.rgb.patch_dim = get_as<int>(rgb, "patch_dim", "model.rgb.");
  c.rgb.patch_mlp_hidden = get_as<int>(rgb, "patch_mlp_hidden", "model.rgb.");
  c.rgb.conv_channels1 = get_as<int>(rgb, "conv_channels1", "model.rgb.");
  c.rgb.conv_channels2 = get_as<int>(rgb, "conv_channels2", "model.rgb.");
  c.rgb.conv_dim = get_as<int>(rgb, "conv_dim", "model.rgb.");
  c.rgb.proj_hidden = get_as<int>(rgb, "proj_hidden", "model.rgb.");
  const Json& geo = j.at("geo");
  c.geo.pointnet_widths = get_as<std::vector<int>>(geo, "pointnet_widths", "model.geo.");
  c.geo.bbox_dim = get_as<int>(geo, "bbox_dim", "model.geo.");
  c.geo.proj_hidden = get_as<int>(geo, "proj_hidden", "model.geo.");
  c.geo.coordinate_scale = get_as<double>(geo, "coordinate_scale", "model.geo.");
  c.adapter.hidden = get_as<int>(j.at("adapter"), "hidden", "model.adapter.");
  c.fusion.heads = get_as<int>(j.at("fusion"), "heads", "model.fusion.");
  c.fusion.mlp_hidden = get_as<int>(j.at("fusion"), "mlp_hidden", "model.fusion.");
  const Json& h = j.at("heads");
  c.heads.cls_hidden = get_as<std::vector<int>>(h, "cls_hidden", "model.heads.");
  c.heads.vol_hidden = get_as<int>(h, "vol_hidden", "model.heads.");
  c.heads.energy_hidden = get_as<std::vector<int>>(h, "energy_hidden", "model.heads.");
  c.init_seed = get_as<std::uint64_t>(j, "init_seed_offset", "model.");
  const int dim = get_as<int>(j, "embed_dim", "model.");
  c.rgb.out_dim = c.geo.out_dim = dim;
  c.adapter.in_dim = c.adapter.out_dim = dim;
  c.fusion.dim = c.heads.dim = dim;
  return c;
}

inline void validate(const ModelConfig& c) {
  require_config(c.rgb.patch_size >= 1 && c.rgb.patch_dim >= 1, "model.rgb: patch sizes must be positive");
  require_config(c.rgb.patch_mlp_hidden >= 0, "model.rgb.patch_mlp_hidden must be >= 0");
  require_config(c.rgb.conv_channels1 >= 1 && c.rgb.conv_channels2 >= 1 && c.rgb.conv_dim >= 1,
                 "model.rgb: conv widths must be positive");
  require_config(c.rgb.proj_hidden >= 1, "model.rgb.proj_hidden must be positive");
  require_config(!c.geo.pointnet_widths.empty(), "model.geo.pointnet_widths must not be empty");
  for (int w : c.geo.pointnet_widths) require_config(w >= 1, "model.geo.pointnet_widths must be positive");
  require_config(c.geo.bbox_dim >= 1 && c.geo.proj_hidden >= 1, "model.geo widths must be positive");
  require_config(c.geo.coordinate_scale > 0, "model.geo.coordinate_scale must be positive");
  require_config(c.adapter.hidden >= 1, "model.adapter.hidden must be positive");
  require_config(c.fusion.heads >= 1 && c.fusion.dim % c.fusion.heads == 0,
                 "model.fusion.heads must divide the feature width " + std::to_string(c.fusion.dim));
  require_config(c.fusion.mlp_hidden >= 1, "model.fusion.mlp_hidden must be positive");
  require_config(c.heads.class_count >= 1, "class count must be positive");
  for (int w : c.heads.cls_hidden) require_config(w >= 1, "model.heads.cls_hidden must be positive");
  for (int w : c.heads.energy_hidden) require_config(w >= 1, "model.heads.energy_hidden must be positive");
  require_config(c.heads.vol_hidden >= 1, "model.heads.vol_hidden must be positive");
}

inline Json to_json(const TrainingConfig& c) {
  return {{"alpha", c.alpha_rgb_only},
          {"epochs", c.epochs},
          {"warmup_fraction", c.schedule.warmup_fraction},
          {"div_start", c.schedule.div_start},
          {"div_final", c.schedule.div_final},
          {"lr_encoders", c.lr_encoders},
          {"lr_heads", c.lr_heads},
          {"micro_batch", c.micro_batch},
          {"accumulation_steps", c.accumulation_steps},
          {"clip_norm", c.clip_norm},
          {"lambda_cls", c.task.cls},
          {"lambda_reg", c.task.reg},
          {"lambda_distill", c.task.distill},
          {"gradnorm", c.task.gradnorm_enabled},
          {"gradnorm_alpha", c.task.gradnorm_alpha},
          {"gradnorm_lr", c.task.gradnorm_lr},
          {"w_mse", c.distill.w_mse},
          {"w_cos", c.distill.w_cos},
          {"w_kl", c.distill.w_kl},
          {"temperature", c.distill.temperature},
          {"kl_t_squared", c.distill.kl_t_squared},
          {"label_smoothing", c.label_smoothing},
          {"huber_delta", c.huber_delta},
          {"weight_decay", c.adamw.weight_decay},
          {"beta1", c.adamw.beta1},
          {"beta2", c.adamw.beta2},
          {"adam_eps", c.adamw.eps},
          {"target_scaling", c.target_scaling},
          {"validate_each_epoch", c.validate_each_epoch}};
}

inline TrainingConfig training_config_from_json(const Json& j) {
  using detail::get_as;
  const std::string p = "training.";
  TrainingConfig c;
  c.alpha_rgb_only = get_as<double>(j, "alpha", p);
  c.epochs = get_as<int>(j, "epochs", p);
  c.schedule.warmup_fraction = get_as<double>(j, "warmup_fraction", p);
  c.schedule.div_start = get_as<double>(j, "div_start", p);
  c.schedule.div_final = get_as<double>(j, "div_final", p);
  c.lr_encoders = get_as<double>(j, "lr_encoders", p);
  c.lr_heads = get_as<double>(j, "lr_heads", p);
  c.micro_batch = get_as<int>(j, "micro_batch", p);
  c.accumulation_steps = get_as<int>(j, "accumulation_steps", p);
  c.clip_norm = get_as<double>(j, "clip_norm", p);
  c.task.cls = get_as<double>(j, "lambda_cls", p);
  c.task.reg = get_as<double>(j, "lambda_reg", p);
  c.task.distill = get_as<double>(j, "lambda_distill", p);
  c.task.gradnorm_enabled = get_as<bool>(j, "gradnorm", p);
  c.task.gradnorm_alpha = get_as<double>(j, "gradnorm_alpha", p);
  c.task.gradnorm_lr = get_as<double>(j, "gradnorm_lr", p);
  c.distill.w_mse = get_as<double>(j, "w_mse", p);
  c.distill.w_cos = get_as<double>(j, "w_cos", p);
  c.distill.w_kl = get_as<double>(j, "w_kl", p);
  c.distill.temperature = get_as<double>(j, "temperature", p);
  c.distill.kl_t_squared = get_as<bool>(j, "kl_t_squared", p);
  c.label_smoothing = get_as<double>(j, "label_smoothing", p);
  c.huber_delta = get_as<double>(j, "huber_delta", p);
  c.adamw.weight_decay = get_as<double>(j, "weight_decay", p);
  c.adamw.beta1 = get_as<double>(j, "beta1", p);
  c.adamw.beta2 = get_as<double>(j, "beta2", p);
  c.adamw.eps = get_as<double>(j, "adam_eps", p);
  c.target_scaling = get_as<bool>(j, "target_scaling", p);
  c.validate_each_epoch = get_as<bool>(j, "validate_each_epoch", p);
  return c;
}

struct EvaluationConfig {
  std::vector<InferenceMode> modes{InferenceMode::rgb, InferenceMode::rgb_pc};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

/// Paths and overwrite policy. Empty strings mean "not set".
struct IoConfig {
  std::string data_dir;
  std::string out_dir;
  std::string checkpoint;
  bool force = false;
};

/// One-factor-at-a-time ablation grid: each alpha value runs at the base
/// lambda_distill, each lambda_distill value at the base alpha.
struct SweepConfig {
  std::vector<double> alpha{0.0, 0.3, 0.5};
  std::vector<double> lambda_distill{0.0, 0.5, 1.0};
  int parallel = 1;
};

/// Everything one command needs. The run seed drives model initialization,
/// shuffling and mode selection; data.seed drives generation.
struct RunConfig {
  SyntheticConfig data;
  ModelConfig model = desk_model_config();
  std::string model_preset = "desk";
  TrainingConfig training;
  EvaluationConfig evaluation;
  IoConfig io;
  SweepConfig sweep;
  std::uint64_t seed = 0;

  /// Model config with the data-dependent fields and the run seed filled in.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.heads.class_count = data.class_count;
    m.geo.n_points = data.n_points;
    m.init_seed = derive_seed(seed, model.init_seed);
    return m;
  }

  TrainingConfig resolved_training() const {
    TrainingConfig t = training;
    t.seed = seed;
    return t;
  }
};

inline Json to_json(const EvaluationConfig& c) {
  Json modes = Json::array();
  for (auto m : c.modes) modes.push_back(m == InferenceMode::rgb ? "rgb" : "rgbpc");
  return {{"modes", modes}, {"seeds", c.seeds}};
}

inline Json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"data", to_json(c.data)},
          {"model", to_json(c.model, c.model_preset)},
          {"training", to_json(c.training)},
          {"evaluation", to_json(c.evaluation)},
          {"io",
           {{"data_dir", c.io.data_dir},
            {"out_dir", c.io.out_dir},
            {"checkpoint", c.io.checkpoint},
            {"force", c.io.force}}},
          {"sweep",
           {{"alpha", c.sweep.alpha}, {"lambda_distill", c.sweep.lambda_distill}, {"parallel", c.sweep.parallel}}}};
}

inline void validate(const RunConfig& c) {
  validate(c.data);
  validate(c.resolved_model());
  validate(c.training);
  require_config(!c.evaluation.modes.empty(), "evaluation.modes must not be empty");
  require_config(!c.evaluation.seeds.empty(), "evaluation.seeds must not be empty");
  for (double a : c.sweep.alpha) require_config(a >= 0 && a <= 1, "sweep.alpha values must be in [0, 1]");
  for (double l : c.sweep.lambda_distill) require_config(l >= 0, "sweep.lambda_distill values must be >= 0");
  require_config(c.sweep.parallel >= 1, "sweep.parallel must be >= 1");
  const int min_side = c.model.rgb.patch_size;
  require_config(c.data.resolution % min_side == 0, "data.resolution (" + std::to_string(c.data.resolution) +
                                                         ") must be a multiple of model.rgb.patch_size (" +
                                                         std::to_string(min_side) + ")");
}

inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  c.seed = detail::get_as<std::uint64_t>(j, "seed", "");
  c.data = synthetic_config_from_json(j.at("data"));
  c.model_preset = detail::get_as<std::string>(j.at("model"), "preset", "model.");
  c.model = model_config_from_json(j.at("model"));
  c.training = training_config_from_json(j.at("training"));
  const Json& ev = j.at("evaluation");
  c.evaluation.modes.clear();
  for (const auto& m : detail::get_as<std::vector<std::string>>(ev, "modes", "evaluation.")) {
    try {
      c.evaluation.modes.push_back(inference_mode_from_string(m));
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("evaluation.modes: ") + e.what());
    }
  }
  c.evaluation.seeds = detail::get_as<std::vector<std::uint64_t>>(ev, "seeds", "evaluation.");
  const Json& io = j.at("io");
  c.io.data_dir = detail::get_as<std::string>(io, "data_dir", "io.");
  c.io.out_dir = detail::get_as<std::string>(io, "out_dir", "io.");
  c.io.checkpoint = detail::get_as<std::string>(io, "checkpoint", "io.");
  c.io.force = detail::get_as<bool>(io, "force", "io.");
  const Json& sw = j.at("sweep");
  c.sweep.alpha = detail::get_as<std::vector<double>>(sw, "alpha", "sweep.");
  c.sweep.lambda_distill = detail::get_as<std::vector<double>>(sw, "lambda_distill", "sweep.");
  c.sweep.parallel = detail::get_as<int>(sw, "parallel", "sweep.");
  return c;
}

/// One command-line override: dotted key and its JSON value.
struct Override {
  std::string key;
  Json value;
};

struct ResolvedConfig {
  RunConfig config;
  Json document;
  std::map<std::string, std::string> sources;  // dotted key -> file | flag | env (absent: default)
};

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

/**
 * @brief Builds the run configuration with precedence flags > file > defaults.
 *
 * Any key not present in the default document is rejected. If neither the
 * file nor a flag sets "seed", PORTIONNET_SEED is used when set.
 */
inline ResolvedConfig resolve_run_config(const std::optional<Json>& file, const std::vector<Override>& flags) {
  auto find_preset = [&]() -> std::string {
    for (const auto& o : flags)
      if (o.key == "model.preset") return o.value.get<std::string>();
    if (file && file->contains("model") && (*file)["model"].is_object() && (*file)["model"].contains("preset")) {
      const Json& p = (*file)["model"]["preset"];
      if (!p.is_string()) throw ConfigError("key 'model.preset' must be a string");
      return p.get<std::string>();
    }
    return "desk";
  };
  RunConfig defaults;
  defaults.model_preset = find_preset();
  defaults.model = model_preset(defaults.model_preset);

  ResolvedConfig out;
  out.document = to_json(defaults);
  if (file) detail::merge_strict(out.document, *file, "", &out.sources, "file");

  if (!out.sources.count("seed")) {
    bool flag_seed = false;
    for (const auto& o : flags) flag_seed = flag_seed || o.key == "seed";
    if (const char* env = std::getenv("PORTIONNET_SEED"); env && !flag_seed) {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
        out.document["seed"] = v;
        out.sources["seed"] = "env";
      } catch (const std::exception&) {
        throw ConfigError(std::string("PORTIONNET_SEED is not an unsigned integer: '") + env + "'");
      }
    }
  }

  for (const auto& o : flags) {
    Json* slot = &out.document;
    std::stringstream ss(o.key);
    std::string part, walked;
    while (std::getline(ss, part, '.')) {
      walked += (walked.empty() ? "" : ".") + part;
      if (!slot->is_object() || !slot->contains(part)) throw ConfigError("unknown config key '" + walked + "'");
      slot = &(*slot)[part];
    }
    *slot = o.value;
    out.sources[o.key] = "flag";
  }
  out.config = run_config_from_json(out.document);
  validate(out.config);
  return out;
}

/// Lines of "key = value  (source)" for every leaf, in document order.
inline std::vector<std::string> describe_config(const ResolvedConfig& r) {
  std::vector<std::string> lines;
  auto walk = [&](auto&& self, const Json& node, const std::string& path) -> void {
    for (auto it = node.begin(); it != node.end(); ++it) {
      const std::string key = path.empty() ? it.key() : path + "." + it.key();
      if (it.value().is_object()) {
        self(self, it.value(), key);
        continue;
      }
      const auto src = r.sources.find(key);
      lines.push_back(key + " = " + it.value().dump() + "  (" + (src == r.sources.end() ? "default" : src->second) +
                      ")");
    }
  };
  walk(walk, r.document, "");
  return lines;
}

/// Canonical text of everything that affects a training run (paths, sweep
/// grid and evaluation settings excluded).
inline std::string config_canonical(const RunConfig& c) {
  Json j = to_json(c);
  j.erase("io");
  j.erase("sweep");
  j.erase("evaluation");
  return j.dump();
}

}  // namespace portionnet
