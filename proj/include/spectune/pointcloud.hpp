#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spectune/error.hpp"
#include "spectune/matrix.hpp"

namespace spectune {

using Point3 = std::array<double, 3>;

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline double distance(const Point3& a, const Point3& b) {
  return std::sqrt(squared_distance(a, b));
}

/// Raw 3D points with per-sample metadata.
struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;
  std::string id;

  std::size_t size() const { return points.size(); }
};

/// Key points plus their recentred neighbor groups. Patch i holds the g
/// nearest neighbors of keypoint i (the keypoint itself included), each
/// shifted so the keypoint sits at the origin.
struct PatchSet {
  Matrix keypoints;                        // n x 3
  std::vector<std::vector<Point3>> patches;  // n groups of g points
  std::size_t n = 0;
  std::size_t g = 0;
};

/// n x d point tokens. order_tag names the keypoint ordering the rows
/// follow ("original" unless a sort has been applied).
struct TokenMatrix {
  Matrix values;
  std::string order_tag = "original";
};

/// Farthest point sampling. Greedy max-min selection; ties broken by the
/// lowest point index so the result is platform independent.
inline std::vector<std::size_t> farthest_point_sampling(const PointCloud& cloud, std::size_t n,
                                                        std::size_t start = 0) {
  const std::size_t total = cloud.size();
  if (n > total) throw SizeError("farthest_point_sampling: n exceeds cloud size");
  if (start >= total) throw RangeError("farthest_point_sampling: start index out of range");
  for (const Point3& p : cloud.points)
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw NumericError("farthest_point_sampling: non-finite coordinate");

  std::vector<std::size_t> picked;
  picked.reserve(n);
  std::vector<bool> selected(total, false);
  std::vector<double> min_sq(total, std::numeric_limits<double>::infinity());
  std::size_t current = start;
  for (std::size_t step = 0; step < n; ++step) {
    picked.push_back(current);
    selected[current] = true;
    const Point3& c = cloud.points[current];
    for (std::size_t i = 0; i < total; ++i)
      min_sq[i] = std::min(min_sq[i], squared_distance(cloud.points[i], c));
    if (step + 1 == n) break;
    std::size_t best = total;
    double best_d = -1.0;
    // Strict > keeps the lowest index on distance ties.
    for (std::size_t i = 0; i < total; ++i)
      if (!selected[i] && min_sq[i] > best_d) {
        best_d = min_sq[i];
        best = i;
      }
    current = best;
  }
  return picked;
}

/// g nearest neighbors of each keypoint (keypoint included), recentred on
/// the keypoint. Distance ties broken by the lowest point index.
inline PatchSet group_patches(const PointCloud& cloud, const std::vector<std::size_t>& keypoints,
                              std::size_t g) {
  if (g > cloud.size()) throw SizeError("group_patches: g exceeds cloud size");
  if (g == 0) throw SizeError("group_patches: g must be positive");

  PatchSet set;
  set.n = keypoints.size();
  set.g = g;
  set.keypoints = Matrix(set.n, 3);
  set.patches.resize(set.n);

  std::vector<std::pair<double, std::size_t>> order(cloud.size());
  for (std::size_t ki = 0; ki < keypoints.size(); ++ki) {
    const Point3& center = cloud.points[keypoints[ki]];
    for (std::size_t j = 0; j < 3; ++j) set.keypoints(ki, j) = center[j];
    for (std::size_t i = 0; i < cloud.size(); ++i)
      order[i] = {squared_distance(cloud.points[i], center), i};
    std::sort(order.begin(), order.end());
    set.patches[ki].reserve(g);
    for (std::size_t i = 0; i < g; ++i) {
      const Point3& p = cloud.points[order[i].second];
      set.patches[ki].push_back({p[0] - center[0], p[1] - center[1], p[2] - center[2]});
    }
  }
  return set;
}

/// PointNet-lite patch embedder: shared per-point affine + ReLU, max-pool
/// over the g points, then a second affine to dimension d.
struct EmbedParams {
  Matrix w1;  // h x 3
  Matrix b1;  // 1 x h
  Matrix w2;  // d x h
  Matrix b2;  // 1 x d

  std::size_t hidden() const { return w1.rows(); }
  std::size_t dim() const { return w2.rows(); }
};

namespace detail {
inline void check_embed_params(const EmbedParams& p) {
  if (p.w1.cols() != 3 || p.b1.cols() != p.w1.rows() || p.w2.cols() != p.w1.rows() ||
      p.b2.cols() != p.w2.rows())
    throw SizeError("embed_patches: inconsistent embedding weight shapes");
  if (!all_finite(p.w1) || !all_finite(p.b1) || !all_finite(p.w2) || !all_finite(p.b2))
    throw NumericError("embed_patches: non-finite weights");
}
}  // namespace detail

/// Cache for the backward pass: which point won each max-pool slot, and the
/// pre-activation values.
struct EmbedCache {
  // pooled[patch][h], argmax point index per (patch, h), relu mask
  Matrix pooled;                               // n x h
  std::vector<std::vector<std::size_t>> arg;   // n x h
  std::vector<Matrix> pre;                     // per patch: g x h pre-activation
};

inline TokenMatrix embed_patches(const PatchSet& set, const EmbedParams& params,
                                 EmbedCache* cache = nullptr) {
  detail::check_embed_params(params);
  const std::size_t h = params.hidden(), d = params.dim();
  TokenMatrix tokens;
  tokens.values = Matrix(set.n, d);
  if (cache) {
    cache->pooled = Matrix(set.n, h);
    cache->arg.assign(set.n, std::vector<std::size_t>(h, 0));
    cache->pre.assign(set.n, Matrix());
  }
  Matrix pooled_row(1, h);
  for (std::size_t pi = 0; pi < set.n; ++pi) {
    const auto& patch = set.patches[pi];
    Matrix pre(patch.size(), h);
    for (std::size_t pt = 0; pt < patch.size(); ++pt)
      for (std::size_t u = 0; u < h; ++u)
        pre(pt, u) = params.w1(u, 0) * patch[pt][0] + params.w1(u, 1) * patch[pt][1] +
                     params.w1(u, 2) * patch[pt][2] + params.b1(0, u);
    for (std::size_t u = 0; u < h; ++u) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_pt = 0;
      for (std::size_t pt = 0; pt < patch.size(); ++pt) {
        const double a = std::max(0.0, pre(pt, u));
        if (a > best) {
          best = a;
          best_pt = pt;
        }
      }
      pooled_row(0, u) = best;
      if (cache) {
        cache->pooled(pi, u) = best;
        cache->arg[pi][u] = best_pt;
      }
    }
    if (cache) cache->pre[pi] = pre;
    for (std::size_t v = 0; v < d; ++v) {
      double s = params.b2(0, v);
      for (std::size_t u = 0; u < h; ++u) s += params.w2(v, u) * pooled_row(0, u);
      tokens.values(pi, v) = s;
    }
  }
  return tokens;
}

/// Gradients of embed_patches. d_tokens is n x d upstream.
struct EmbedGrads {
  Matrix w1, b1, w2, b2;
};

inline EmbedGrads embed_patches_backward(const PatchSet& set, const EmbedParams& params,
                                         const EmbedCache& cache, const Matrix& d_tokens) {
  const std::size_t h = params.hidden(), d = params.dim();
  EmbedGrads g;
  g.w1 = Matrix(h, 3);
  g.b1 = Matrix(1, h);
  g.w2 = Matrix(d, h);
  g.b2 = Matrix(1, d);
  for (std::size_t pi = 0; pi < set.n; ++pi) {
    for (std::size_t v = 0; v < d; ++v) {
      const double up = d_tokens(pi, v);
      g.b2(0, v) += up;
      for (std::size_t u = 0; u < h; ++u) g.w2(v, u) += up * cache.pooled(pi, u);
    }
    for (std::size_t u = 0; u < h; ++u) {
      double d_pool = 0.0;
      for (std::size_t v = 0; v < d; ++v) d_pool += d_tokens(pi, v) * params.w2(v, u);
      const std::size_t pt = cache.arg[pi][u];
      if (cache.pre[pi](pt, u) <= 0.0) continue;  // ReLU gate
      g.b1(0, u) += d_pool;
      const Point3& p = set.patches[pi][pt];
      g.w1(u, 0) += d_pool * p[0];
      g.w1(u, 1) += d_pool * p[1];
      g.w1(u, 2) += d_pool * p[2];
    }
  }
  return g;
}

/// Plain-text cloud format: optional "# label <int>" header, then one
/// "x y z" line per point.
inline PointCloud load_point_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open point cloud file: " + path);
  PointCloud cloud;
  cloud.id = path;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string key;
      long long value;
      if (hs >> key >> value && key == "label") {
        cloud.label = static_cast<int>(value);
        continue;
      }
      throw DataError(path + ": line " + std::to_string(lineno) + ": malformed header");
    }
    std::istringstream ls(line);
    Point3 p;
    std::string extra;
    if (!(ls >> p[0] >> p[1] >> p[2]) || (ls >> extra))
      throw DataError(path + ": line " + std::to_string(lineno) + ": expected 'x y z'");
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw DataError(path + ": line " + std::to_string(lineno) + ": non-finite coordinate");
    cloud.points.push_back(p);
  }
  return cloud;
}

inline void save_point_cloud(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write point cloud file: " + path);
  char buf[96];
  if (cloud.label) out << "# label " << *cloud.label << "\n";
  for (const Point3& p : cloud.points) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
}

}  // namespace spectune
