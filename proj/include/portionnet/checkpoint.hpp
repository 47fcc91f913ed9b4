#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "portionnet/config.hpp"
#include "portionnet/digest.hpp"
#include "portionnet/serialize.hpp"
#include "portionnet/training.hpp"

namespace portionnet {

/// Rejected because the stored architecture does not match the expected one.
class DigestMismatch : public IntegrityError {
 public:
  DigestMismatch(const std::string& expected, const std::string& found)
      : IntegrityError("architecture digest mismatch: expected " + expected + ", checkpoint has " + found),
        expected_(expected), found_(found) {}
  const std::string& expected() const { return expected_; }
  const std::string& found() const { return found_; }

 private:
  std::string expected_, found_;
};

inline constexpr char kCheckpointMagic[8] = {'P', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to rebuild the network, including the derived fields.
inline Json architecture_json(const ModelConfig& c) {
  Json j = to_json(c, "custom");
  j.erase("preset");
  j.erase("init_seed_offset");
  j["class_count"] = c.heads.class_count;
  j["n_points"] = c.geo.n_points;
  j["init_seed"] = c.init_seed;
  return j;
}

inline ModelConfig architecture_from_json(const Json& j) {
  Json doc = j;
  doc["preset"] = "desk";
  doc["init_seed_offset"] = j.at("init_seed");
  ModelConfig c = model_config_from_json(doc);
  c.heads.class_count = j.at("class_count").get<int>();
  c.geo.n_points = j.at("n_points").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

/// SHA-256 over the ordered parameter names and shapes.
template <class T>
std::string architecture_digest(PortionNet<T>& model) {
  Sha256 h;
  for (const auto& p : model.parameters())
    h.update(p.name + ":" + std::to_string(p.value->rows()) + "x" + std::to_string(p.value->cols()) + ";");
  return h.hex();
}

/// SHA-256 over every parameter value; changes whenever any weight changes.
template <class T>
std::string parameter_digest(PortionNet<T>& model) {
  Sha256 h;
  for (const auto& p : model.parameters()) {
    h.update(p.name);
    h.update(reinterpret_cast<const char*>(p.value->data()), static_cast<std::size_t>(p.value->size()) * sizeof(T));
  }
  return h.hex();
}

/// Metadata stored alongside a checkpoint that is not part of TrainingState.
struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::string config_digest;  // digest of the run configuration
  Json run_config;            // full resolved configuration document (may be null)
};

struct LoadedCheckpoint {
  TrainingState<float> state;
  CheckpointInfo info;
  std::string architecture_digest;
  Json metadata;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float f) { le(std::bit_cast<std::uint32_t>(f)); }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const char* data, std::size_t size) : p_(data), end_(data + size) {}
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end_ - p_) < n) throw IntegrityError("checkpoint is truncated");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(p_[i])) << (8 * i);
    p_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(p_, n);
    p_ += n;
    return s;
  }
  bool done() const { return p_ == end_; }

 private:
  const char* p_;
  const char* end_;
};

inline void write_array(ByteWriter& w, const std::string& name, const Matrix<float>& m) {
  w.le(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.le(static_cast<std::uint32_t>(m.rows()));
  w.le(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
}

}  // namespace detail

/**
 * @brief Writes a single-file checkpoint.
 *
 * Layout (all integers little-endian):
 *   magic "PNETCKPT" | u32 version | u64 metadata length | metadata JSON |
 *   u32 array count | arrays | u32 CRC-32 of every preceding byte.
 * Each array is u16 name length, name, u32 rows, u32 cols, rows*cols float32
 * in row-major order. Model parameters keep their own names; optimizer
 * moments are stored as "adamw.m.<name>" and "adamw.v.<name>".
 * The file is written to a temporary path and renamed into place.
 */
inline void save_checkpoint(TrainingState<float>& state, const CheckpointInfo& info, const std::string& path) {
  const ParamList<float> params = state.model.parameters();
  Json meta;
  meta["format"] = "portionnet-checkpoint";
  meta["epoch"] = state.epoch;
  meta["seed"] = info.seed;
  meta["config_digest"] = info.config_digest;
  meta["run_config"] = info.run_config;
  meta["architecture"] = architecture_json(state.model.config());
  meta["architecture_digest"] = architecture_digest(state.model);
  meta["training"] = to_json(state.config);
  meta["training"]["seed"] = state.config.seed;
  meta["task_weights"] = {{"cls", state.task_weights.cls},
                          {"reg", state.task_weights.reg},
                          {"distill", state.task_weights.distill}};
  meta["target_scales"] = {{"volume", state.model.heads().volume_scale()},
                           {"energy", state.model.heads().energy_scale()}};
  meta["optimizer_steps"] = state.optimizer.steps();
  meta["history"] = to_json(state.history);
  const std::string meta_text = meta.dump();

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.le(kCheckpointVersion);
  w.le(static_cast<std::uint64_t>(meta_text.size()));
  w.bytes(meta_text.data(), meta_text.size());

  std::uint32_t count = 0;
  for (const auto& p : params) count += 1 + (state.optimizer.state().count(p.name) ? 2 : 0);
  w.le(count);
  for (const auto& p : params) detail::write_array(w, p.name, *p.value);
  for (const auto& p : params) {
    const auto it = state.optimizer.state().find(p.name);
    if (it == state.optimizer.state().end()) continue;
    detail::write_array(w, "adamw.m." + p.name, it->second.m);
    detail::write_array(w, "adamw.v." + p.name, it->second.v);
  }
  const std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.le(crc);

  const std::filesystem::path target(path);
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + tmp.string() + "'");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw std::runtime_error("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, target);
}

/**
 * @brief Reads and fully validates a checkpoint before building any state.
 *
 * Corruption (bad magic, CRC, truncation, unknown or missing arrays, shape
 * mismatch) raises IntegrityError. If @p expected_architecture is given and
 * differs from the stored architecture digest, DigestMismatch names both.
 */
inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const std::optional<std::string>& expected_architecture = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("checkpoint '" + path + "' does not exist or is unreadable");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kCheckpointMagic + 4 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IntegrityError("'" + path + "' is not a checkpoint (bad magic)");
  {
    detail::ByteReader tail(bytes.data() + bytes.size() - 4, 4);
    const auto stored = tail.le<std::uint32_t>();
    const auto actual = crc32_of(bytes.data(), bytes.size() - 4);
    if (stored != actual) throw IntegrityError("checkpoint '" + path + "' failed its CRC-32 check (corrupt file)");
  }
  detail::ByteReader r(bytes.data() + 8, bytes.size() - 12);
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = r.le<std::uint64_t>();
  if (meta_len > bytes.size()) throw IntegrityError("checkpoint is truncated");
  LoadedCheckpoint out;
  try {
    out.metadata = Json::parse(r.str(static_cast<std::size_t>(meta_len)));
  } catch (const Json::parse_error& e) {
    throw IntegrityError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }

  const Json& meta = out.metadata;
  try {
    out.architecture_digest = meta.at("architecture_digest").get<std::string>();
    if (expected_architecture && *expected_architecture != out.architecture_digest)
      throw DigestMismatch(*expected_architecture, out.architecture_digest);

    const ModelConfig arch = architecture_from_json(meta.at("architecture"));
    TrainingState<float>& st = out.state;
    st.model = PortionNet<float>(arch);
    const std::string rebuilt = architecture_digest(st.model);
    if (rebuilt != out.architecture_digest) throw DigestMismatch(rebuilt, out.architecture_digest);

    Json training = meta.at("training");
    const auto train_seed = training.at("seed").get<std::uint64_t>();
    training.erase("seed");
    st.config = training_config_from_json(training);
    st.config.seed = train_seed;
    st.optimizer = AdamW<float>(st.config.adamw);
    st.optimizer.set_steps(meta.at("optimizer_steps").get<long>());
    st.task_weights = st.config.task;
    st.task_weights.cls = meta.at("task_weights").at("cls").get<double>();
    st.task_weights.reg = meta.at("task_weights").at("reg").get<double>();
    st.task_weights.distill = meta.at("task_weights").at("distill").get<double>();
    st.model.heads().set_target_scales(meta.at("target_scales").at("volume").get<double>(),
                                       meta.at("target_scales").at("energy").get<double>());
    st.epoch = meta.at("epoch").get<int>();
    st.history = training_history_from_json(meta.at("history"));
    out.info.seed = meta.at("seed").get<std::uint64_t>();
    out.info.config_digest = meta.at("config_digest").get<std::string>();
    out.info.run_config = meta.at("run_config");
  } catch (const Json::exception& e) {
    throw IntegrityError(std::string("checkpoint metadata is incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint metadata is invalid: ") + e.what());
  }

  TrainingState<float>& st = out.state;
  const ParamList<float> params = st.model.parameters();
  std::unordered_map<std::string, Matrix<float>*> targets;
  for (const auto& p : params) targets[p.name] = p.value;
  std::unordered_map<std::string, bool> seen;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint16_t>();
    const std::string name = r.str(name_len);
    const auto rows = r.le<std::uint32_t>();
    const auto cols = r.le<std::uint32_t>();
    r.need(static_cast<std::size_t>(rows) * cols * 4);
    Matrix<float>* dest = nullptr;
    if (auto it = targets.find(name); it != targets.end()) {
      dest = it->second;
    } else if (name.rfind("adamw.m.", 0) == 0 || name.rfind("adamw.v.", 0) == 0) {
      const std::string pname = name.substr(8);
      if (!targets.count(pname)) throw IntegrityError("checkpoint has optimizer state for unknown parameter " + pname);
      auto& mom = st.optimizer.state()[pname];
      dest = name[6] == 'm' ? &mom.m : &mom.v;
      dest->resize(targets[pname]->rows(), targets[pname]->cols());
    } else {
      throw IntegrityError("checkpoint has unknown array '" + name + "'");
    }
    if (dest->rows() != static_cast<Eigen::Index>(rows) || dest->cols() != static_cast<Eigen::Index>(cols))
      throw IntegrityError("array '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                           ", expected " + std::to_string(dest->rows()) + "x" + std::to_string(dest->cols()));
    if (seen[name]) throw IntegrityError("array '" + name + "' appears twice");
    seen[name] = true;
    for (Eigen::Index k = 0; k < dest->size(); ++k) dest->data()[k] = r.f32();
  }
  if (!r.done()) throw IntegrityError("checkpoint has trailing bytes");
  for (const auto& p : params)
    if (!seen.count(p.name)) throw IntegrityError("checkpoint is missing parameter '" + p.name + "'");
  for (const auto& [name, mom] : st.optimizer.state())
    if (!seen.count("adamw.m." + name) || !seen.count("adamw.v." + name))
      throw IntegrityError("checkpoint has incomplete optimizer state for '" + name + "'");
  return out;
}

}  // namespace portionnet
