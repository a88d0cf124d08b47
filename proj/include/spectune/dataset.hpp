#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "spectune/config.hpp"
#include "spectune/error.hpp"
#include "spectune/pointcloud.hpp"

namespace spectune {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Per-sample seed: every cloud has its own stream, so generation order (or
/// parallel generation) cannot change the data.
inline std::uint64_t sample_seed(std::uint64_t master, std::size_t split, std::size_t cls,
                                 std::size_t idx) {
  std::uint64_t h = splitmix64(master ^ (0x51ed2701u + static_cast<std::uint64_t>(split)));
  h = splitmix64(h ^ (0xc2b2ae35u + static_cast<std::uint64_t>(cls)));
  return splitmix64(h ^ (0x165667b1u + static_cast<std::uint64_t>(idx)));
}

namespace detail {

inline Point3 gaussian_dir(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Point3 v{normal(rng), normal(rng), normal(rng)};
  double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  while (len < 1e-12) {
    v = {normal(rng), normal(rng), normal(rng)};
    len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  }
  return {v[0] / len, v[1] / len, v[2] / len};
}

inline Point3 sample_sphere(std::mt19937_64& rng) { return gaussian_dir(rng); }

inline Point3 sample_cube(std::mt19937_64& rng) {
  constexpr double a = 0.8;
  std::uniform_int_distribution<int> face(0, 5);
  std::uniform_real_distribution<double> coord(-a, a);
  const int f = face(rng);
  const double u = coord(rng), v = coord(rng);
  const double s = (f % 2 == 0) ? a : -a;
  switch (f / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

inline Point3 sample_torus(std::mt19937_64& rng) {
  constexpr double R = 0.7, r = 0.3;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u = angle(rng);
  // surface density along the tube angle is proportional to R + r cos(v)
  double v = angle(rng);
  while (unit(rng) > (R + r * std::cos(v)) / (R + r)) v = angle(rng);
  const double ring = R + r * std::cos(v);
  return {ring * std::cos(u), ring * std::sin(u), r * std::sin(v)};
}

inline Point3 sample_cylinder(std::mt19937_64& rng) {
  constexpr double radius = 0.5, half_h = 0.8;
  // area split: lateral 2*pi*r*2h vs two caps 2*pi*r^2
  constexpr double lateral = 2.0 * radius * (2.0 * half_h);
  constexpr double caps = 2.0 * radius * radius;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const double theta = angle(rng);
  if (unit(rng) < lateral / (lateral + caps)) {
    std::uniform_real_distribution<double> zc(-half_h, half_h);
    return {radius * std::cos(theta), radius * std::sin(theta), zc(rng)};
  }
  const double z = unit(rng) < 0.5 ? half_h : -half_h;
  const double rr = radius * std::sqrt(unit(rng));
  return {rr * std::cos(theta), rr * std::sin(theta), z};
}

inline Point3 sample_cone(std::mt19937_64& rng) {
  constexpr double base_r = 0.7, apex_z = 0.9, base_z = -0.7;
  const double h = apex_z - base_z;
  const double slant = std::sqrt(base_r * base_r + h * h);
  const double lateral_area = base_r * slant;  // common pi factor dropped
  const double base_area = base_r * base_r;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const double theta = angle(rng);
  if (unit(rng) < lateral_area / (lateral_area + base_area)) {
    const double t = std::sqrt(unit(rng));  // fraction of the way from apex
    const double rr = t * base_r;
    return {rr * std::cos(theta), rr * std::sin(theta), apex_z - t * h};
  }
  const double rr = base_r * std::sqrt(unit(rng));
  return {rr * std::cos(theta), rr * std::sin(theta), base_z};
}

inline Point3 sample_two_sphere(std::mt19937_64& rng) {
  constexpr double r = 0.45, off = 0.55;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double side = unit(rng) < 0.5 ? -off : off;
  const Point3 d = gaussian_dir(rng);
  return {side + r * d[0], r * d[1], r * d[2]};
}

/// Uniform random rotation from a normalized Gaussian quaternion.
inline Matrix random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double w = normal(rng), x = normal(rng), y = normal(rng), z = normal(rng);
  double len = std::sqrt(w * w + x * x + y * y + z * z);
  while (len < 1e-12) {
    w = normal(rng);
    x = normal(rng);
    y = normal(rng);
    z = normal(rng);
    len = std::sqrt(w * w + x * x + y * y + z * z);
  }
  w /= len;
  x /= len;
  y /= len;
  z /= len;
  Matrix rot(3, 3);
  rot(0, 0) = 1 - 2 * (y * y + z * z);
  rot(0, 1) = 2 * (x * y - w * z);
  rot(0, 2) = 2 * (x * z + w * y);
  rot(1, 0) = 2 * (x * y + w * z);
  rot(1, 1) = 1 - 2 * (x * x + z * z);
  rot(1, 2) = 2 * (y * z - w * x);
  rot(2, 0) = 2 * (x * z - w * y);
  rot(2, 1) = 2 * (y * z + w * x);
  rot(2, 2) = 1 - 2 * (x * x + y * y);
  return rot;
}

}  // namespace detail

inline Point3 sample_shape_point(const std::string& shape, std::mt19937_64& rng) {
  if (shape == "sphere") return detail::sample_sphere(rng);
  if (shape == "cube") return detail::sample_cube(rng);
  if (shape == "torus") return detail::sample_torus(rng);
  if (shape == "cylinder") return detail::sample_cylinder(rng);
  if (shape == "cone") return detail::sample_cone(rng);
  if (shape == "two_sphere") return detail::sample_two_sphere(rng);
  throw ConfigError("unknown shape name: " + shape);
}

/// One cloud: surface samples, one rigid rotation, then Gaussian noise.
inline PointCloud synth_cloud(const std::string& shape, std::size_t points, double noise,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PointCloud cloud;
  cloud.points.reserve(points);
  for (std::size_t i = 0; i < points; ++i) cloud.points.push_back(sample_shape_point(shape, rng));
  const Matrix rot = detail::random_rotation(rng);
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (Point3& p : cloud.points) {
    const Point3 q = p;
    for (std::size_t i = 0; i < 3; ++i)
      p[i] = rot(i, 0) * q[0] + rot(i, 1) * q[1] + rot(i, 2) * q[2];
    if (noise > 0.0)
      for (std::size_t i = 0; i < 3; ++i) p[i] += noise * jitter(rng);
  }
  return cloud;
}

inline constexpr const char* kSplitNames[4] = {"source_train", "source_test", "target_train",
                                               "target_test"};

struct DatasetEntry {
  std::string file;
  int label = 0;
  std::string shape;
};

/// Writes one .xyz file per cloud plus manifest.json describing every split.
inline nlohmann::json gen_synthetic(const ExperimentConfig& cfg, const std::string& out_dir) {
  config_validate(cfg);
  namespace fs = std::filesystem;
  nlohmann::json manifest;
  manifest["format"] = "spectune.dataset.v1";
  manifest["config"] = config_to_json(cfg);  // replayable via gen-data --from-manifest
  manifest["points"] = cfg.points;
  manifest["noise"] = cfg.noise;
  manifest["seed"] = cfg.data_seed;
  manifest["source_shapes"] = cfg.source_shapes;
  manifest["target_shapes"] = cfg.target_shapes;
  manifest["train_per_class"] = cfg.train_per_class;
  manifest["test_per_class"] = cfg.test_per_class;

  for (std::size_t split = 0; split < 4; ++split) {
    const bool source = split < 2;
    const bool train = (split % 2) == 0;
    const std::vector<std::string>& shapes = source ? cfg.source_shapes : cfg.target_shapes;
    const std::size_t per_class = train ? cfg.train_per_class : cfg.test_per_class;
    const std::string split_name = kSplitNames[split];
    fs::create_directories(fs::path(out_dir) / split_name);
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t cls = 0; cls < shapes.size(); ++cls) {
      for (std::size_t idx = 0; idx < per_class; ++idx) {
        PointCloud cloud = synth_cloud(shapes[cls], cfg.points,
                                       cfg.noise, sample_seed(cfg.data_seed, split, cls, idx));
        cloud.label = static_cast<int>(cls);
        char name[64];
        std::snprintf(name, sizeof(name), "c%zu_%04zu.xyz", cls, idx);
        const std::string rel = split_name + "/" + name;
        save_point_cloud(cloud, (fs::path(out_dir) / rel).string());
        nlohmann::json entry;
        entry["file"] = rel;
        entry["label"] = *cloud.label;
        entry["shape"] = shapes[cls];
        entries.push_back(std::move(entry));
      }
    }
    manifest["splits"][split_name] = std::move(entries);
  }

  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw DataError("cannot write dataset manifest in " + out_dir);
  out << manifest.dump(2) << "\n";
  return manifest;
}

inline nlohmann::json load_dataset_manifest(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "manifest.json");
  if (!in) throw DataError("cannot open dataset manifest in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad dataset manifest: ") + e.what());
  }
  if (manifest.value("format", "") != std::string("spectune.dataset.v1"))
    throw DataError("dataset manifest has unknown format tag");
  return manifest;
}

inline std::vector<PointCloud> load_split(const std::string& dir, const nlohmann::json& manifest,
                                          const std::string& split) {
  if (!manifest.contains("splits") || !manifest["splits"].contains(split))
    throw DataError("dataset manifest lacks split: " + split);
  std::vector<PointCloud> clouds;
  for (const auto& entry : manifest["splits"][split]) {
    PointCloud c =
        load_point_cloud((std::filesystem::path(dir) / entry["file"].get<std::string>()).string());
    c.label = entry["label"].get<int>();
    clouds.push_back(std::move(c));
  }
  return clouds;
}

}  // namespace spectune
