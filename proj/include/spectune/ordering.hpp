#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "spectune/error.hpp"
#include "spectune/matrix.hpp"
#include "spectune/pointcloud.hpp"

namespace spectune {

enum class OrderingMethod { Random, Knn, ZOrder, TransZOrder, Hilbert };

inline std::string to_string(OrderingMethod m) {
  switch (m) {
    case OrderingMethod::Random: return "random";
    case OrderingMethod::Knn: return "knn";
    case OrderingMethod::ZOrder: return "z_order";
    case OrderingMethod::TransZOrder: return "trans_z_order";
    case OrderingMethod::Hilbert: return "hilbert";
  }
  return "?";
}

inline OrderingMethod parse_ordering_method(const std::string& s) {
  if (s == "random") return OrderingMethod::Random;
  if (s == "knn") return OrderingMethod::Knn;
  if (s == "z_order") return OrderingMethod::ZOrder;
  if (s == "trans_z_order") return OrderingMethod::TransZOrder;
  if (s == "hilbert") return OrderingMethod::Hilbert;
  throw ConfigError("unknown ordering method: " + s);
}

/// Axis-aligned bounding box used to quantize coordinates for curve keys.
struct Bounds3 {
  Point3 lo{0.0, 0.0, 0.0};
  Point3 hi{1.0, 1.0, 1.0};

  static Bounds3 of(const Matrix& pts) {
    Bounds3 b;
    for (std::size_t a = 0; a < 3; ++a) {
      b.lo[a] = pts(0, a);
      b.hi[a] = pts(0, a);
    }
    for (std::size_t i = 1; i < pts.rows(); ++i)
      for (std::size_t a = 0; a < 3; ++a) {
        b.lo[a] = std::min(b.lo[a], pts(i, a));
        b.hi[a] = std::max(b.hi[a], pts(i, a));
      }
    return b;
  }

  bool contains(const Point3& p) const {
    for (std::size_t a = 0; a < 3; ++a)
      if (p[a] < lo[a] || p[a] > hi[a]) return false;
    return true;
  }
};

namespace detail {

inline std::array<std::uint32_t, 3> quantize(const Point3& p, const Bounds3& bounds, int bits) {
  const std::uint32_t levels = 1u << bits;
  std::array<std::uint32_t, 3> q{};
  for (std::size_t a = 0; a < 3; ++a) {
    const double extent = bounds.hi[a] - bounds.lo[a];
    if (extent <= 0.0) {
      q[a] = 0;
      continue;
    }
    auto cell = static_cast<std::int64_t>((p[a] - bounds.lo[a]) / extent * levels);
    q[a] = static_cast<std::uint32_t>(std::clamp<std::int64_t>(cell, 0, levels - 1));
  }
  return q;
}

/// Interleave the quantized axes MSB-first; axes[0]'s bit lands in the most
/// significant position of each 3-bit group.
inline std::uint64_t interleave(const std::array<std::uint32_t, 3>& axes, int bits) {
  std::uint64_t code = 0;
  for (int b = bits - 1; b >= 0; --b)
    for (std::size_t a = 0; a < 3; ++a) code = (code << 1) | ((axes[a] >> b) & 1u);
  return code;
}

inline void check_curve_args(const Point3& p, const Bounds3& bounds, int bits) {
  if (bits < 1 || bits > 21) throw RangeError("curve key: bits must be in [1,21]");
  if (!bounds.contains(p)) throw RangeError("curve key: point outside bounds");
}

/// Converts per-axis coordinates into the Hilbert "transpose" form
/// (Skilling's algorithm), so interleaving them yields the Hilbert index.
inline std::array<std::uint32_t, 3> hilbert_transpose(std::array<std::uint32_t, 3> x, int bits) {
  const std::uint32_t m = 1u << (bits - 1);
  // Inverse undo.
  for (std::uint32_t q = m; q > 1; q >>= 1) {
    const std::uint32_t p = q - 1;
    for (std::size_t i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        const std::uint32_t t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  // Gray encode.
  for (std::size_t i = 1; i < 3; ++i) x[i] ^= x[i - 1];
  std::uint32_t t = 0;
  for (std::uint32_t q = m; q > 1; q >>= 1)
    if (x[2] & q) t ^= q - 1;
  for (std::size_t i = 0; i < 3; ++i) x[i] ^= t;
  return x;
}

}  // namespace detail

/// Morton key: quantize each axis to `bits` levels over `bounds`, then
/// bit-interleave in (x,y,z) order from the most significant bit.
inline std::uint64_t z_order_key(const Point3& p, const Bounds3& bounds, int bits) {
  detail::check_curve_args(p, bounds, bits);
  return detail::interleave(detail::quantize(p, bounds, bits), bits);
}

/// Transposed-Z key: same quantization, interleave order reversed to (z,y,x).
inline std::uint64_t trans_z_order_key(const Point3& p, const Bounds3& bounds, int bits) {
  detail::check_curve_args(p, bounds, bits);
  auto q = detail::quantize(p, bounds, bits);
  return detail::interleave({q[2], q[1], q[0]}, bits);
}

inline std::uint64_t hilbert_key(const Point3& p, const Bounds3& bounds, int bits) {
  detail::check_curve_args(p, bounds, bits);
  auto t = detail::hilbert_transpose(detail::quantize(p, bounds, bits), bits);
  return detail::interleave(t, bits);
}

/// Result of sorting n key points and partitioning them into k groups of m.
/// permutation[j] = original index of the point at sorted position j.
struct OrderingResult {
  std::vector<std::size_t> permutation;
  std::vector<std::size_t> inverse;
  OrderingMethod method = OrderingMethod::TransZOrder;
  std::size_t k = 1;
  std::size_t m = 0;

  std::size_t n() const { return permutation.size(); }
};

namespace detail {

inline std::vector<std::size_t> knn_chain(const Matrix& pts) {
  const std::size_t n = pts.rows();
  std::vector<std::size_t> chain;
  chain.reserve(n);
  std::vector<bool> visited(n, false);
  std::size_t current = 0;
  chain.push_back(0);
  visited[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (visited[i]) continue;
      double d = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double diff = pts(i, a) - pts(current, a);
        d += diff * diff;
      }
      if (d < best_d) {  // strict < keeps the lowest index on ties
        best_d = d;
        best = i;
      }
    }
    chain.push_back(best);
    visited[best] = true;
    current = best;
  }
  return chain;
}

inline Point3 row_point(const Matrix& pts, std::size_t i) {
  return {pts(i, 0), pts(i, 1), pts(i, 2)};
}

}  // namespace detail

/// Sorts key points by the chosen method and splits them into k groups of m
/// consecutive sorted positions. Stable sort; key ties keep original index
/// order. `seed` is only consumed by the random method.
inline OrderingResult sort_keypoints(const Matrix& keypoints, OrderingMethod method, std::size_t k,
                                     std::uint64_t seed = 0, int bits = 10) {
  const std::size_t n = keypoints.rows();
  if (n == 0 || keypoints.cols() != 3) throw SizeError("sort_keypoints: expected n x 3 keypoints");
  if (k == 0 || n % k != 0)
    throw ConfigError("sort_keypoints: group count k=" + std::to_string(k) +
                      " must divide n=" + std::to_string(n));

  OrderingResult result;
  result.method = method;
  result.k = k;
  result.m = n / k;
  result.permutation.resize(n);
  std::iota(result.permutation.begin(), result.permutation.end(), std::size_t{0});

  switch (method) {
    case OrderingMethod::Random: {
      // Hand-rolled Fisher-Yates so the permutation does not depend on the
      // standard library's shuffle implementation.
      std::mt19937_64 rng(seed);
      for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(result.permutation[i], result.permutation[j]);
      }
      break;
    }
    case OrderingMethod::Knn:
      result.permutation = detail::knn_chain(keypoints);
      break;
    case OrderingMethod::ZOrder:
    case OrderingMethod::TransZOrder:
    case OrderingMethod::Hilbert: {
      const Bounds3 bounds = Bounds3::of(keypoints);
      std::vector<std::uint64_t> keys(n);
      for (std::size_t i = 0; i < n; ++i) {
        const Point3 p = detail::row_point(keypoints, i);
        keys[i] = method == OrderingMethod::ZOrder        ? z_order_key(p, bounds, bits)
                  : method == OrderingMethod::TransZOrder ? trans_z_order_key(p, bounds, bits)
                                                          : hilbert_key(p, bounds, bits);
      }
      std::stable_sort(result.permutation.begin(), result.permutation.end(),
                       [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
      break;
    }
  }

  result.inverse.resize(n);
  for (std::size_t j = 0; j < n; ++j) result.inverse[result.permutation[j]] = j;
  return result;
}

/// original-order rows -> sorted-order rows.
inline Matrix sort_rows(const Matrix& original, const OrderingResult& ordering) {
  if (original.rows() != ordering.n()) throw SizeError("sort_rows: row count mismatch");
  Matrix sorted(original.rows(), original.cols());
  for (std::size_t j = 0; j < ordering.n(); ++j)
    for (std::size_t c = 0; c < original.cols(); ++c)
      sorted(j, c) = original(ordering.permutation[j], c);
  return sorted;
}

/// sorted-order rows -> original-order rows; inverse of sort_rows.
inline TokenMatrix reorder_tokens(const TokenMatrix& sorted, const OrderingResult& ordering) {
  if (sorted.values.rows() != ordering.n()) throw SizeError("reorder_tokens: row count mismatch");
  TokenMatrix original;
  original.values = Matrix(sorted.values.rows(), sorted.values.cols());
  original.order_tag = "original";
  for (std::size_t j = 0; j < ordering.n(); ++j)
    for (std::size_t c = 0; c < sorted.values.cols(); ++c)
      original.values(ordering.permutation[j], c) = sorted.values(j, c);
  return original;
}

}  // namespace spectune
