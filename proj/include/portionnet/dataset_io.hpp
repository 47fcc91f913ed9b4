#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "portionnet/config.hpp"
#include "portionnet/data_model.hpp"

namespace portionnet {

namespace fs = std::filesystem;

inline constexpr int kDatasetFormatVersion = 1;

namespace detail {

template <class U, class F>
void write_le_array(const fs::path& path, std::size_t n, F&& value_at) {
  std::vector<unsigned char> buf(n * sizeof(U));
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>>(value_at(i));
    for (std::size_t b = 0; b < sizeof(U); ++b) buf[i * sizeof(U) + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

template <class U>
std::vector<U> read_le_array(const fs::path& path, std::size_t n) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("dataset file '" + path.string() + "' is missing");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() != n * sizeof(U))
    throw IntegrityError("dataset file '" + path.string() + "' has " + std::to_string(buf.size()) + " bytes, expected " +
                         std::to_string(n * sizeof(U)));
  std::vector<U> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<Bits>(buf[i * sizeof(U) + b]) << (8 * b);
    out[i] = std::bit_cast<U>(bits);
  }
  return out;
}

inline std::string sample_stem(std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "%06zu.bin", i);
  return name;
}

}  // namespace detail

/**
 * @brief Writes a dataset directory.
 *
 *   index.json          metadata and per-sample records
 *   points/NNNNNN.bin   N x 3 float64 little-endian, row-major (x, y, z per point)
 *   images/NNNNNN.bin   H x W x 3 float32 little-endian, row-major, RGB interleaved
 *
 * Output is a pure function of the dataset, so equal datasets give equal bytes.
 */
inline void write_dataset(const Dataset& ds, const SyntheticConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir / "points");
  fs::create_directories(dir / "images");
  Json samples = Json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const FoodSample& s = ds.samples[i];
    const std::string stem = detail::sample_stem(i);
    const auto n = static_cast<std::size_t>(s.points.rows());
    detail::write_le_array<double>(dir / "points" / stem, n * 3,
                                   [&](std::size_t k) { return s.points(static_cast<Eigen::Index>(k / 3),
                                                                        static_cast<Eigen::Index>(k % 3)); });
    detail::write_le_array<float>(dir / "images" / stem, s.image.pixels.size(),
                                  [&](std::size_t k) { return s.image.pixels[k]; });
    samples.push_back({{"id", i},
                       {"class_id", s.class_id},
                       {"split", to_string(s.split)},
                       {"volume_ml", s.volume},
                       {"energy_kcal", s.energy},
                       {"bbox_dims_m", s.bbox_dims},
                       {"n_points", n},
                       {"image_height", s.image.height},
                       {"image_width", s.image.width},
                       {"points", "points/" + stem},
                       {"image", "images/" + stem}});
  }
  Json index = {{"format", "portionnet-dataset"},
                {"version", kDatasetFormatVersion},
                {"class_count", ds.class_count},
                {"generator", to_json(cfg)},
                {"samples", samples}};
  std::ofstream out(dir / "index.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + (dir / "index.json").string() + "'");
  out << index.dump(1) << '\n';
}

struct LoadedDataset {
  Dataset dataset;
  Json generator;  // the generating config as recorded in the index
};

inline LoadedDataset read_dataset(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path))
    throw InvalidArgument("no dataset at '" + dir.string() + "' (missing " + index_path.string() + ")");
  std::ifstream in(index_path);
  Json index;
  try {
    index = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw IntegrityError("dataset index '" + index_path.string() + "' is not valid JSON: " + e.what());
  }
  LoadedDataset out;
  try {
    if (index.at("format") != "portionnet-dataset") throw IntegrityError("'" + index_path.string() + "' is not a dataset index");
    if (index.at("version").get<int>() != kDatasetFormatVersion)
      throw IntegrityError("unsupported dataset version " + index.at("version").dump());
    out.dataset.class_count = index.at("class_count").get<int>();
    out.generator = index.at("generator");
    for (const auto& rec : index.at("samples")) {
      FoodSample s;
      s.class_id = rec.at("class_id").get<int>();
      if (s.class_id < 0 || s.class_id >= out.dataset.class_count)
        throw IntegrityError("sample " + rec.at("id").dump() + " has class id out of range");
      s.split = split_from_string(rec.at("split").get<std::string>());
      s.volume = rec.at("volume_ml").get<double>();
      s.energy = rec.at("energy_kcal").get<double>();
      s.bbox_dims = rec.at("bbox_dims_m").get<std::array<double, 3>>();
      const auto n = rec.at("n_points").get<std::size_t>();
      const auto pts = detail::read_le_array<double>(dir / rec.at("points").get<std::string>(), n * 3);
      s.points.resize(static_cast<Eigen::Index>(n), 3);
      for (std::size_t k = 0; k < pts.size(); ++k)
        s.points(static_cast<Eigen::Index>(k / 3), static_cast<Eigen::Index>(k % 3)) = pts[k];
      s.image.height = rec.at("image_height").get<int>();
      s.image.width = rec.at("image_width").get<int>();
      s.image.pixels = detail::read_le_array<float>(dir / rec.at("image").get<std::string>(),
                                                    static_cast<std::size_t>(s.image.height) * s.image.width * 3);
      out.dataset.samples.push_back(std::move(s));
    }
  } catch (const Json::exception& e) {
    throw IntegrityError("dataset index '" + index_path.string() + "' is malformed: " + e.what());
  } catch (const InvalidArgument& e) {
    throw IntegrityError("dataset index '" + index_path.string() + "' is malformed: " + e.what());
  }
  return out;
}

}  // namespace portionnet
