#pragma once

#include <cmath>
#include <numbers>

#include "spectune/matrix.hpp"

namespace spectune {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Swish with beta = 1: x * sigmoid(x).
inline double swish(double x) { return x * sigmoid(x); }

inline double swish_prime(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

/// Exact GELU, erf form.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_prime(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Matrix map_swish(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = swish(m(i, j));
  return out;
}

inline Matrix map_swish_prime(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = swish_prime(m(i, j));
  return out;
}

}  // namespace spectune
