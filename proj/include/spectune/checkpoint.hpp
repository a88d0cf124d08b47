#pragma once

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "spectune/backbone.hpp"
#include "spectune/error.hpp"

namespace spectune {

inline constexpr const char* kCheckpointMagic = "spectune.ckpt.v1";

namespace detail {

/// %a round-trips doubles exactly through strtod.
inline std::string hex_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%a", v);
  return buf;
}

inline double parse_double(const std::string& tok, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == nullptr || *end != '\0' || tok.empty())
    throw DataError(std::string("checkpoint: bad number for ") + what + ": '" + tok + "'");
  return v;
}

inline long long parse_int(const std::string& tok, const char* what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(tok, &pos);
  } catch (const std::exception&) {
    throw DataError(std::string("checkpoint: bad integer for ") + what + ": '" + tok + "'");
  }
  if (pos != tok.size())
    throw DataError(std::string("checkpoint: bad integer for ") + what + ": '" + tok + "'");
  return v;
}

inline std::string expect_token(std::istream& in, const char* what) {
  std::string tok;
  if (!(in >> tok)) throw DataError(std::string("checkpoint: truncated before ") + what);
  return tok;
}

inline std::string expect_keyed(std::istream& in, const std::string& key) {
  const std::string k = expect_token(in, key.c_str());
  if (k != key) throw DataError("checkpoint: expected key '" + key + "', got '" + k + "'");
  return expect_token(in, key.c_str());
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << kCheckpointMagic << "\n";
  out << "dim " << p.cfg.dim << "\n";
  out << "layers " << p.cfg.layers << "\n";
  out << "heads " << p.cfg.heads << "\n";
  out << "embed_hidden " << p.cfg.embed_hidden << "\n";
  out << "classes " << p.cfg.classes << "\n";
  out << "ln_eps " << detail::hex_double(p.cfg.ln_eps) << "\n";
  out << "adapters " << (p.has_adapters() ? 1 : 0) << "\n";
  if (p.has_adapters()) {
    out << "adapter_r " << p.adapters.front().rank() << "\n";
    out << "adapter_scale " << detail::hex_double(p.adapters.front().scale) << "\n";
  }
  std::size_t count = 0;
  for_each_tensor(p, [&](const std::string&, const Matrix&) { ++count; });
  out << "tensors " << count << "\n";
  for_each_tensor(p, [&](const std::string& name, const Matrix& m) {
    out << "tensor " << name << " " << m.rows() << " " << m.cols() << " "
        << (p.trainable.count(name) ? 1 : 0) << "\n";
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) {
        if (j) out << ' ';
        out << detail::hex_double(m(i, j));
      }
      out << "\n";
    }
  });
  out << "end\n";
  if (!out) throw DataError("write failure on checkpoint: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic)
    throw DataError("checkpoint: bad magic line '" + magic + "' in " + path);

  BackboneConfig cfg;
  cfg.dim = static_cast<std::size_t>(detail::parse_int(detail::expect_keyed(in, "dim"), "dim"));
  cfg.layers =
      static_cast<std::size_t>(detail::parse_int(detail::expect_keyed(in, "layers"), "layers"));
  cfg.heads =
      static_cast<std::size_t>(detail::parse_int(detail::expect_keyed(in, "heads"), "heads"));
  cfg.embed_hidden = static_cast<std::size_t>(
      detail::parse_int(detail::expect_keyed(in, "embed_hidden"), "embed_hidden"));
  cfg.classes =
      static_cast<std::size_t>(detail::parse_int(detail::expect_keyed(in, "classes"), "classes"));
  cfg.ln_eps = detail::parse_double(detail::expect_keyed(in, "ln_eps"), "ln_eps");
  const long long has_adapters =
      detail::parse_int(detail::expect_keyed(in, "adapters"), "adapters");

  ModelParams p = init_model(cfg, 0);
  p.trainable.clear();
  if (has_adapters) {
    const std::size_t r = static_cast<std::size_t>(
        detail::parse_int(detail::expect_keyed(in, "adapter_r"), "adapter_r"));
    const double scale =
        detail::parse_double(detail::expect_keyed(in, "adapter_scale"), "adapter_scale");
    attach_adapters(p, r, scale, 0);
  }

  const long long declared = detail::parse_int(detail::expect_keyed(in, "tensors"), "tensors");
  struct Record {
    std::size_t rows = 0, cols = 0;
    bool trainable = false;
    std::vector<double> values;
  };
  std::map<std::string, Record> records;
  for (long long t = 0; t < declared; ++t) {
    const std::string kw = detail::expect_token(in, "tensor keyword");
    if (kw != "tensor") throw DataError("checkpoint: expected 'tensor', got '" + kw + "'");
    const std::string name = detail::expect_token(in, "tensor name");
    Record rec;
    rec.rows =
        static_cast<std::size_t>(detail::parse_int(detail::expect_token(in, "rows"), "rows"));
    rec.cols =
        static_cast<std::size_t>(detail::parse_int(detail::expect_token(in, "cols"), "cols"));
    rec.trainable = detail::parse_int(detail::expect_token(in, "flag"), "flag") != 0;
    rec.values.resize(rec.rows * rec.cols);
    for (double& v : rec.values) v = detail::parse_double(detail::expect_token(in, name.c_str()), name.c_str());
    if (!records.emplace(name, std::move(rec)).second)
      throw DataError("checkpoint: duplicate tensor " + name);
  }
  const std::string tail = detail::expect_token(in, "end marker");
  if (tail != "end") throw DataError("checkpoint: missing end marker");

  std::size_t filled = 0;
  for_each_tensor(p, [&](const std::string& name, Matrix& m) {
    auto it = records.find(name);
    if (it == records.end()) throw DataError("checkpoint: missing tensor " + name);
    const Record& rec = it->second;
    if (rec.rows != m.rows() || rec.cols != m.cols())
      throw DataError("checkpoint: shape mismatch for " + name);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rec.values[i * m.cols() + j];
    if (rec.trainable) p.trainable.insert(name);
    ++filled;
  });
  if (filled != records.size()) throw DataError("checkpoint: extra tensors present");
  return p;
}

}  // namespace spectune
