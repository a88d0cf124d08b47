#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spectune/adapter.hpp"
#include "spectune/backbone.hpp"
#include "spectune/error.hpp"
#include "spectune/ordering.hpp"

namespace spectune {

/// Everything a run needs, resolved. Config files are `key = value` lines
/// (# comments); CLI flags and --set overrides win over the file.
struct ExperimentConfig {
  // dataset
  std::vector<std::string> source_shapes{"sphere", "cube", "torus"};
  std::vector<std::string> target_shapes{"cylinder", "cone", "two_sphere"};
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t points = 256;
  double noise = 0.02;
  std::uint64_t data_seed = 1;
  // model
  std::size_t n = 32;  // key points / tokens
  std::size_t g = 16;  // patch size
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 1;
  std::size_t embed_hidden = 64;
  // adapter
  std::size_t adapter_r = 8;
  double adapter_s = 1.0;
  std::size_t groups_k = 4;
  OrderingMethod ordering = OrderingMethod::TransZOrder;
  BasisKind basis = BasisKind::Gft;
  // optimizer
  double lr = 0.05;
  std::size_t epochs = 50;
  std::size_t batch = 16;
  std::uint64_t seed = 7;
  // run
  Mode mode = Mode::Pcsa;
  std::size_t threads = 1;

  BackboneConfig backbone(std::size_t classes) const {
    BackboneConfig b;
    b.dim = dim;
    b.layers = layers;
    b.heads = heads;
    b.embed_hidden = embed_hidden;
    b.classes = classes;
    return b;
  }
};

namespace detail {

inline std::string join_csv(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += v[i];
  }
  return out;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ',')) {
    // trim spaces
    const auto a = cur.find_first_not_of(" \t");
    const auto b = cur.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    out.push_back(cur.substr(a, b - a + 1));
  }
  return out;
}

inline std::size_t config_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument("");
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + value + "'");
  }
}

inline std::uint64_t config_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("bad integer for " + key + ": '" + value + "'");
  }
}

inline double config_double(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end == nullptr || *end != '\0')
    throw ConfigError("bad number for " + key + ": '" + value + "'");
  return v;
}

}  // namespace detail

/// Set one key. Unknown keys are config errors so sweep/typo mistakes fail
/// loudly instead of silently running the defaults.
inline void config_apply(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::config_double;
  using detail::config_size;
  using detail::config_u64;
  if (key == "dataset.source_shapes") c.source_shapes = detail::split_csv(value);
  else if (key == "dataset.target_shapes") c.target_shapes = detail::split_csv(value);
  else if (key == "dataset.train_per_class") c.train_per_class = config_size(key, value);
  else if (key == "dataset.test_per_class") c.test_per_class = config_size(key, value);
  else if (key == "dataset.points") c.points = config_size(key, value);
  else if (key == "dataset.noise") c.noise = config_double(key, value);
  else if (key == "dataset.seed") c.data_seed = config_u64(key, value);
  else if (key == "model.n") c.n = config_size(key, value);
  else if (key == "model.g") c.g = config_size(key, value);
  else if (key == "model.dim") c.dim = config_size(key, value);
  else if (key == "model.layers") c.layers = config_size(key, value);
  else if (key == "model.heads") c.heads = config_size(key, value);
  else if (key == "model.embed_hidden") c.embed_hidden = config_size(key, value);
  else if (key == "adapter.r") c.adapter_r = config_size(key, value);
  else if (key == "adapter.s") c.adapter_s = config_double(key, value);
  // ordering.* accepted as aliases: the curve lives in the ordering module
  // but is configured alongside the adapter that consumes it
  else if (key == "adapter.k" || key == "ordering.k") c.groups_k = config_size(key, value);
  else if (key == "adapter.ordering" || key == "ordering.method")
    c.ordering = parse_ordering_method(value);
  else if (key == "adapter.basis") c.basis = parse_basis_kind(value);
  else if (key == "optim.lr") c.lr = config_double(key, value);
  else if (key == "optim.epochs") c.epochs = config_size(key, value);
  else if (key == "optim.batch") c.batch = config_size(key, value);
  else if (key == "optim.seed") c.seed = config_u64(key, value);
  else if (key == "mode") c.mode = parse_mode(value);
  else if (key == "threads") c.threads = config_size(key, value);
  else throw ConfigError("unknown config key: " + key);
}

inline void config_validate(const ExperimentConfig& c) {
  if (c.source_shapes.empty() || c.target_shapes.empty())
    throw ConfigError("shape lists must be non-empty");
  if (c.train_per_class == 0 || c.test_per_class == 0 || c.points == 0)
    throw ConfigError("dataset counts must be positive");
  if (c.noise < 0.0) throw ConfigError("dataset.noise must be non-negative");
  if (c.n == 0 || c.g == 0 || c.dim == 0 || c.layers == 0 || c.heads == 0 ||
      c.embed_hidden == 0 || c.epochs == 0 || c.batch == 0)
    throw ConfigError("model and optimizer counts must be positive");
  if (c.n > c.points) throw ConfigError("model.n cannot exceed dataset.points");
  if (c.g > c.points) throw ConfigError("model.g cannot exceed dataset.points");
  if (c.dim % c.heads != 0) throw ConfigError("model.heads must divide model.dim");
  if (c.groups_k == 0 || c.n % c.groups_k != 0)
    throw ConfigError("adapter.k must divide model.n");
  if (c.n / c.groups_k < 2)
    throw ConfigError("adapter.k leaves groups smaller than 2 points");
  if (c.adapter_r == 0 || c.adapter_r >= c.dim)
    throw ConfigError("adapter.r must satisfy 0 < r < model.dim");
  if (c.lr <= 0.0) throw ConfigError("optim.lr must be positive");
  if (c.threads == 0) throw ConfigError("threads must be positive");
}

/// `key = value` per line; '#' starts a comment.
inline void config_load_file(ExperimentConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto x = s.find_first_not_of(" \t\r");
      const auto y = s.find_last_not_of(" \t\r");
      return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    config_apply(c, key, value);
  }
}

/// Resolved config as a flat JSON object keyed exactly like config_apply, so
/// a manifest can be replayed through the same code path.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["dataset.source_shapes"] = detail::join_csv(c.source_shapes);
  j["dataset.target_shapes"] = detail::join_csv(c.target_shapes);
  j["dataset.train_per_class"] = c.train_per_class;
  j["dataset.test_per_class"] = c.test_per_class;
  j["dataset.points"] = c.points;
  j["dataset.noise"] = c.noise;
  j["dataset.seed"] = c.data_seed;
  j["model.n"] = c.n;
  j["model.g"] = c.g;
  j["model.dim"] = c.dim;
  j["model.layers"] = c.layers;
  j["model.heads"] = c.heads;
  j["model.embed_hidden"] = c.embed_hidden;
  j["adapter.r"] = c.adapter_r;
  j["adapter.s"] = c.adapter_s;
  j["adapter.k"] = c.groups_k;
  j["adapter.ordering"] = to_string(c.ordering);
  j["adapter.basis"] = to_string(c.basis);
  j["optim.lr"] = c.lr;
  j["optim.epochs"] = c.epochs;
  j["optim.batch"] = c.batch;
  j["optim.seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["threads"] = c.threads;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string value;
    if (it->is_string()) {
      value = it->get<std::string>();
    } else if (it->is_number_float()) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", it->get<double>());
      value = buf;
    } else {
      value = it->dump();
    }
    config_apply(c, it.key(), value);
  }
  config_validate(c);
  return c;
}

}  // namespace spectune
